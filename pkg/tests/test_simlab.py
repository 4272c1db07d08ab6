import numpy as np
import pytest
from scipy.special import expit

from iwborrow.inference import SamplerConfig
from iwborrow.simlab import (SOURCES, CovariateModel, ScenarioConfig, aggregate_metrics, concordant_scenario,
                             generate_scenario, method_specs, default_scenarios, run_study, scenario_table,
                             true_marginal_effect)

FAST = SamplerConfig(n_chains=2, warmup=200, draws=200, rhat_threshold=1.05, warn=False)


def test_default_scenarios():
    sc = {s.label: s for s in default_scenarios()}
    assert list(sc) == [str(k) for k in range(1, 9)] + ["01", "02", "03"]
    assert sc["7"].sizes == {"rct": 200, "res": 1000, "sct": 300}
    assert sc["1"].psi1["sct"] == sc["1"].psi1["rct"] and sc["3"].psi1["sct"] != sc["3"].psi1["rct"]
    assert sc["3"].covariates["res"] == sc["3"].covariates["rct"]
    assert all(sc[k].hypothesis == "null" and sc[k].psi0 == 0 for k in ("01", "02", "03"))
    rows = {r["label"]: r for r in scenario_table()}
    assert rows["1"]["covariate_discordance"] == 1 and rows["1"]["psi1_discordance"] == 0
    assert rows["2"]["rho"] == 0.5


def test_covariate_model_moments(rng):
    m = CovariateModel(mean=(1.0, -1.0), sd=(2.0, 0.5), rho=0.5, p3=0.7, p4=0.2)
    x = m.sample(200_000, rng)
    assert abs(x["x1"].mean() - 1) < 0.02 and abs(x["x2"].std() - 0.5) < 0.01
    assert abs(np.corrcoef(x["x1"], x["x2"])[0, 1] - 0.5) < 0.01
    assert abs(x["x3"].mean() - 0.7) < 0.01 and abs(x["x4"].mean() - 0.2) < 0.01
    with pytest.raises(ValueError):
        CovariateModel(rho=2.0)


def test_generate_scenario_structure(rng):
    data = generate_scenario(default_scenarios()[0], rng)
    assert [data[s].n for s in SOURCES] == [200, 500, 100]
    assert np.all(data["res"].arm == 0) and np.all(data["sct"].arm == 1)
    assert 0.35 < data["rct"].arm.mean() < 0.65
    assert data["res"].covariates["x1"].mean() < 0 < data["sct"].covariates["x1"].mean()


def test_scenario_round_trip():
    sc = default_scenarios()[5]
    back = ScenarioConfig.from_dict(sc.to_dict())
    assert back.to_dict() == sc.to_dict()
    with pytest.raises(ValueError):
        ScenarioConfig("bad", beta=(1, 2))


def test_truth_oracle(rng):
    null = default_scenarios()[8]
    assert true_marginal_effect(null, 1000)[0] == 0.0
    sc = default_scenarios()[1]
    est, se = true_marginal_effect(sc, 400_000, rng)
    # oracle: b1*x1 + b2*x2 is normal, so one Gauss-Hermite sum per x3 level
    b, law = sc.beta, sc.covariates["rct"]
    m = b[1] * law.mean[0] + b[2] * law.mean[1]
    v = (b[1] * law.sd[0]) ** 2 + (b[2] * law.sd[1]) ** 2 + 2 * law.rho * b[1] * b[2] * law.sd[0] * law.sd[1]
    nodes, wts = np.polynomial.hermite_e.hermegauss(60)
    wts = wts / wts.sum()
    effect = sc.psi0 + sc.psi1["rct"]
    truth = 0.0
    for x3, p3 in ((1.0, law.p3), (0.0, 1 - law.p3)):
        lp = b[0] + b[4] + b[3] * x3 + m + np.sqrt(v) * nodes
        truth += p3 * np.sum(wts * (expit(lp + effect) - expit(lp)))
    assert abs(est - truth) < 4 * se


def test_method_specs():
    specs = method_specs(sampler=FAST)
    assert set(specs) == {"FB", "IW", "IW.t", "IW.m", "IW.m.t", "NB"}
    assert specs["FB"].weighting.method == "full" and specs["NB"].weighting.method == "none"
    assert specs["IW.m"].weighting.covariates == ("x1", "x3")
    assert specs["IW.t"].weighting.truncation == "ess_cap"
    with pytest.raises((KeyError, ValueError)):
        method_specs(["nope"])


def test_run_study_deterministic_and_thread_invariant():
    sc = concordant_scenario(n0=60, n1=80, n2=30)
    a = run_study(sc, 3, seed=4, methods=("NB", "IW"), sampler=FAST)
    b = run_study(sc, 3, seed=4, methods=("NB", "IW"), sampler=FAST, threads=2)
    assert a == b and len(a) == 6
    assert {r["method"] for r in a} == {"NB", "IW"}
    nb = [r for r in a if r["method"] == "NB"]
    assert all(r["ess"] == 0 for r in nb)


def test_aggregate_metrics():
    rows = [{"method": "A", "scenario": "s", "median": m, "lower": m - 0.1, "upper": m + 0.1,
             "tau": t, "converged": c} for m, t, c in ((0.1, 0.99, True), (0.3, 0.5, True), (9.0, 1.0, False))]
    (m,) = aggregate_metrics(rows, truth=0.15)
    assert m.n_reps == 2 and m.n_excluded == 1
    assert m.bias == pytest.approx(0.05) and m.rmse == pytest.approx(np.sqrt((0.05**2 + 0.15**2) / 2))
    assert m.coverage == 0.5 and m.rejection == {"0.95": 0.5, "0.975": 0.5}
    assert m.flat()["rejection_0.95"] == 0.5
