import numpy as np
import pytest
from scipy.special import expit

from iwborrow.dataset import CovariateSpec, Formula, TrialDataset

SCHEMA = (
    CovariateSpec("x1", "continuous"),
    CovariateSpec("x3", "binary"),
    CovariateSpec("x4", "binary", role="both"),
)
FORMULA = Formula(("x1", "x3", "x4"), ("x4",))


def make_trial(n, rng, shift=0.0, arm=None, source_id="trial", coef=(-0.5, 0.4, 0.3, 0.3, 0.3, 0.6)):
    """Logistic data on (x1, x3, x4) with s = (1, x4)."""
    x1 = rng.normal(shift, 1.0, n)
    x3 = (rng.random(n) < 0.5).astype(float)
    x4 = (rng.random(n) < 0.4).astype(float)
    a = (rng.random(n) < 0.5).astype(np.int8) if arm is None else np.full(n, arm, dtype=np.int8)
    b0, b1, b3, b4, p0, p1 = coef
    lp = b0 + b1 * x1 + b3 * x3 + b4 * x4 + (p0 + p1 * x4) * a
    y = (rng.random(n) < expit(lp)).astype(np.int8)
    return TrialDataset(source_id, SCHEMA, y, a, {"x1": x1, "x3": x3, "x4": x4})


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def bundle(X, S, arm, y):
    from iwborrow.dataset import DesignMatrixBundle
    X, S = np.atleast_2d(X), np.atleast_2d(S)
    return DesignMatrixBundle(X, S, np.asarray(arm, float), np.asarray(y, float),
                              tuple(f"b{i}" for i in range(X.shape[1])),
                              tuple(f"g{i}" for i in range(S.shape[1])))


def random_bundle(rng, n, p, q):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    S = np.column_stack([np.ones(n), (rng.random((n, q - 1)) < 0.5).astype(float)])
    arm = (rng.random(n) < 0.5).astype(float)
    y = (rng.random(n) < 0.4).astype(float)
    return bundle(X, S, arm, y)


def quadrature_models():
    """Six one- and two-parameter models with known-good grid bounds."""
    from iwborrow.inference import PriorSpec, WeightedModel
    r = np.random.default_rng(5)
    ones = lambda n: np.ones((n, 1))

    def arm_design(n, p_ctrl, p_trt):
        arm = np.arange(n) % 2
        y = np.where(arm == 1, r.random(n) < p_trt, r.random(n) < p_ctrl).astype(float)
        return bundle(ones(n), ones(n), arm, y)

    def intercept_only(y):
        y = np.asarray(y, float)
        return bundle(ones(y.size), np.zeros((y.size, 0)), np.zeros(y.size), y)

    m = []
    # 1. intercept-only, 10 of 20 events, N(0, 2.5)
    m.append(("intercept", WeightedModel(intercept_only(np.r_[np.ones(10), np.zeros(10)])),
              [(-3, 3)]))
    # 2. intercept-only with a half-weighted external block
    ext = intercept_only(np.r_[np.ones(24), np.zeros(6)])
    m.append(("intercept+ext", WeightedModel(intercept_only(np.r_[np.ones(3), np.zeros(9)]), ext,
                                             np.full(30, 0.5)), [(-4, 4)]))
    # 3. intercept-only, rare events, varied external weights
    ext = intercept_only((r.random(40) < 0.1).astype(float))
    m.append(("rare+ext", WeightedModel(intercept_only(np.r_[1.0, np.zeros(7)]), ext,
                                        r.uniform(0, 1, 40)), [(-9, 3)]))
    # 4. intercept + treatment, internal only
    m.append(("arm", WeightedModel(arm_design(40, 0.3, 0.6)), [(-7, 6), (-7, 8)]))
    # 5. intercept + treatment, external block with random weights
    m.append(("arm+ext", WeightedModel(arm_design(30, 0.4, 0.5), arm_design(60, 0.3, 0.7),
                                       r.uniform(0.2, 1.0, 60)), [(-6, 5), (-6, 7)]))
    # 6. intercept + continuous slope, N(1, 1) prior, external weights 0.3
    x = r.normal(size=25)
    y = (r.random(25) < 1 / (1 + np.exp(-(0.2 + 0.8 * x)))).astype(float)
    xe = r.normal(size=50)
    ye = (r.random(50) < 1 / (1 + np.exp(-(-0.3 + 1.2 * xe)))).astype(float)
    slope = lambda x_, y_: bundle(np.column_stack([np.ones(x_.size), x_]), np.zeros((x_.size, 0)),
                                  np.zeros(x_.size), y_)
    m.append(("slope+ext", WeightedModel(slope(x, y), slope(xe, ye), np.full(50, 0.3),
                                         PriorSpec.normal(2, 1.0, 1.0)), [(-5, 5), (-4, 6)]))
    return m


# small budgets so every CLI subcommand finishes in seconds
CLI_FAST = [
    "sampler.n_chains=2", "sampler.warmup=200", "sampler.draws=200", "sampler.rhat_threshold=1.1",
    "design.posterior_sampler={warmup: 300, draws: 1000}", "design.min_draws=20",
    "design.analysis_sampler={warmup: 200, draws: 200}", "design.synthesize_n=200",
    "design.n_reps=5", "design.n_internal=60", "design.n_grid=[40, 120]", "design.alpha=0.5",
    "simulation.labels=['1']", "simulation.n_reps=2", "simulation.methods=[NB, IW]",
    "simulation.n_oracle=10000", "synthesize.n=50",
]

CLI_COMMANDS = ("weights", "fit", "estimate", "simulate", "oc", "calibrate", "power-curve", "ssd",
                "synthesize-external")


def run_cli(command, out_dir, *extra, threads="1", overrides=CLI_FAST):
    """Run the CLI in-process; returns (exit code, {file name: bytes})."""
    from pathlib import Path
    from iwborrow.cli import main
    argv = [command, "--out-dir", str(out_dir), "--threads", str(threads), "--seed", "7", *extra]
    for o in overrides:
        argv += ["--set", o]
    code = main(argv)
    out = Path(out_dir)
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir())} if out.exists() else {}
    return code, files


def stable_files(files):
    """Outputs with the manifest's thread count and wall time removed."""
    import json
    out = dict(files)
    if "manifest.json" in out:
        m = json.loads(out["manifest.json"])
        m.pop("threads", None)
        m.pop("duration_seconds", None)
        out["manifest.json"] = json.dumps(m, sort_keys=True).encode()
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
