import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iwborrow.dataset import CovariateSpec, TrialDataset
from iwborrow.similarity import (BinaryComponent, SimilarityError, SimilarityModel, WeightVector,
                                 compute_weights, constant_weights, effective_sample_size,
                                 fit_similarity_model, gower_weights, propensity_weights, raw_weight,
                                 raw_weights, truncate)


def ds(cols, schema, source="d"):
    n = len(next(iter(cols.values()))) if cols else 1
    return TrialDataset(source, schema, np.zeros(n), np.zeros(n), cols)


BIN = [CovariateSpec("x", "binary")]
CAT = [CovariateSpec("c", "categorical", ("a", "b", "c"))]
CONT = [CovariateSpec("u", "continuous")]


def brute_force_ess_cap(w, cap):
    """Largest prefix of the stable weight order whose sum stays within ``cap``."""
    order = np.argsort(-w, kind="stable")
    best = 0
    for k in range(len(w) + 1):
        if w[order[:k]].sum() <= cap:
            best = k
    mask = np.zeros(len(w), bool)
    mask[order[:best]] = True
    return mask


# --- closed forms -------------------------------------------------------

def test_beta_binomial_predictive():
    model = fit_similarity_model(ds({"x": np.r_[np.ones(7), np.zeros(3)]}, BIN))
    assert abs(raw_weight(model, {"x": 1}) - 8 / 12) < 1e-12
    assert abs(raw_weight(model, {"x": 0}) - 4 / 12) < 1e-12


def test_dirichlet_multinomial_predictive():
    col = np.array(["a"] * 3 + ["b"] * 5 + ["c"] * 2, dtype=object)
    model = fit_similarity_model(ds({"c": col}, CAT))
    got = [raw_weight(model, {"c": v}) for v in "abc"]
    assert np.allclose(got, [4 / 13, 6 / 13, 3 / 13], atol=1e-12, rtol=0)


def test_constant_continuous_rejected():
    with pytest.raises(SimilarityError, match="constant"):
        fit_similarity_model(ds({"u": np.zeros(5)}, CONT))


def test_modifier_rejected():
    schema = [CovariateSpec("x", "binary", role="both")]
    with pytest.raises(SimilarityError, match="effect modifier"):
        fit_similarity_model(ds({"x": np.ones(3)}, schema), ["x"])


def test_kde_integrates_to_one(rng):
    model = fit_similarity_model(ds({"u": rng.normal(size=40)}, CONT))
    grid = np.linspace(-10, 10, 20001)
    mass = np.trapezoid(model.components[0](grid), grid) if hasattr(np, "trapezoid") else np.trapz(
        model.components[0](grid), grid)
    assert abs(mass - 1) < 1e-6


def test_raw_weight_products():
    two = SimilarityModel((BinaryComponent("a", 0.5), BinaryComponent("b", 0.5)))
    assert raw_weight(two, {"a": 1, "b": 0}) == 0.25
    assert raw_weight(SimilarityModel(()), {}) == 1.0
    with pytest.raises(SimilarityError, match="missing"):
        raw_weight(two, {"a": 1})


def test_unseen_level_gets_pseudocount_mass():
    model = fit_similarity_model(ds({"c": np.array(["a"] * 4, dtype=object)}, CAT))
    assert raw_weight(model, {"c": "c"}) == pytest.approx(1 / 7)


# --- normalization ------------------------------------------------------

def test_max_internal_normalization_hand_example():
    internal = ds({"x": np.r_[np.ones(7), np.zeros(1)]}, BIN)   # (7+1)/(8+2) = 0.8
    external = ds({"x": np.array([1.0, 0.0])}, BIN, "e")
    w = compute_weights(fit_similarity_model(internal), external)
    assert np.allclose(w.raw, [0.8, 0.2]) and np.allclose(w.weights, [1.0, 0.25])
    assert w.normalizer == pytest.approx(0.8)


def test_modal_internal_patient_gets_one(rng):
    u = rng.normal(size=50)
    internal = ds({"u": u}, CONT)
    model = fit_similarity_model(internal)
    best = u[np.argmax(raw_weights(model, internal))]
    w = compute_weights(model, ds({"u": np.array([best, best + 3])}, CONT, "e"))
    assert w.weights[0] == pytest.approx(1.0) and w.weights[1] < 1


def test_matched_distributions_positive(rng):
    internal = ds({"u": rng.normal(size=200)}, CONT)
    external = ds({"u": rng.normal(size=200)}, CONT, "e")
    model = fit_similarity_model(internal)
    w = compute_weights(model, external)
    ref = compute_weights(model, internal).weights.mean()
    assert w.weights.min() > 0 and abs(w.weights.mean() - ref) < 0.1


def test_other_normalizations(rng):
    internal = ds({"u": rng.normal(size=30)}, CONT)
    external = ds({"u": rng.normal(2, 1, size=30)}, CONT, "e")
    model = fit_similarity_model(internal)
    assert compute_weights(model, external, "max_external").weights.max() == 1.0
    cap = compute_weights(model, external, "cap_at_one")
    assert np.allclose(cap.weights, np.minimum(cap.raw, 1))
    with pytest.raises(SimilarityError):
        compute_weights(model, external, "bogus")


def test_prior_variant_ignores_internal_values():
    internal = ds({"x": np.ones(9)}, BIN)
    model = fit_similarity_model(internal, variant="prior")
    assert raw_weight(model, {"x": 1}) == raw_weight(model, {"x": 0}) == 0.5


# --- gower and propensity ----------------------------------------------

def test_gower_examples():
    with pytest.warns(UserWarning, match="zero range"):
        identical = gower_weights(ds({"u": np.ones(4)}, CONT), ds({"u": np.ones(2)}, CONT, "e"))
    assert np.all(identical.weights == 1)
    half = gower_weights(ds({"x": np.array([0.0, 1.0])}, BIN), ds({"x": np.array([1.0])}, BIN, "e"))
    assert half.weights[0] == pytest.approx(0.5)
    mid = gower_weights(ds({"u": np.array([0.0, 10.0])}, CONT), ds({"u": np.array([5.0])}, CONT, "e"))
    assert mid.weights[0] == pytest.approx(0.5)


def test_propensity_examples(rng):
    u = rng.normal(size=300)
    w = propensity_weights(ds({"u": u}, CONT), ds({"u": u.copy()}, CONT, "e"))
    assert np.allclose(w.weights, 0.5, atol=1e-6)
    w0 = propensity_weights(ds({"u": u[:100]}, CONT), ds({"u": u}, CONT, "e"), [])
    assert np.allclose(w0.weights, 100 / 400)


def test_propensity_separation_and_penalty():
    internal = ds({"u": np.linspace(-2, -1, 20)}, CONT)
    external = ds({"u": np.linspace(1, 2, 20)}, CONT, "e")
    with pytest.raises(SimilarityError, match="penalty"):
        propensity_weights(internal, external)
    w = propensity_weights(internal, external, penalty=1.0)
    assert np.all(w.weights > 0) and np.all(w.weights < 0.5)


@pytest.mark.parametrize("method", ["pp", "gower", "propensity"])
def test_permutation_invariance(rng, method):
    schema = CONT + BIN
    internal = ds({"u": rng.normal(size=25), "x": (rng.random(25) < 0.4).astype(float)}, schema)
    external = ds({"u": rng.normal(0.5, 1, 15), "x": (rng.random(15) < 0.6).astype(float)}, schema, "e")
    perm = internal.take(rng.permutation(25))
    if method == "pp":
        f = lambda i: compute_weights(fit_similarity_model(i), external).weights
    elif method == "gower":
        f = lambda i: gower_weights(i, external).weights
    else:
        f = lambda i: propensity_weights(i, external, penalty=0.1).weights
    assert np.allclose(f(internal), f(perm), rtol=1e-10, atol=1e-12)


@given(st.integers(0, 10), st.integers(1, 10))
def test_binary_majority_monotone(k, extra):
    n = k + extra
    model = fit_similarity_model(ds({"x": np.r_[np.ones(k), np.zeros(n - k)]}, BIN))
    hi, lo = (1, 0) if 2 * k >= n else (0, 1)
    assert raw_weight(model, {"x": hi}) >= raw_weight(model, {"x": lo})


@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=15), st.sampled_from("abc"))
def test_adding_identical_patient_never_lowers_weight(levels, z):
    def w(values):
        model = fit_similarity_model(ds({"c": np.array(values, dtype=object)}, CAT))
        return raw_weight(model, {"c": z})
    assert w(levels + [z]) >= w(levels) - 1e-15


# --- truncation ---------------------------------------------------------

def test_truncate_examples():
    w = WeightVector(np.array([0.9, 0.8, 0.5, 0.2, 0.1]))
    t = truncate(w, ("ess_cap", 2))
    assert t.retained.tolist() == [True, True, False, False, False]
    assert effective_sample_size(t) == pytest.approx(1.7)
    assert t.cutoff_value == 0.5
    same = truncate(w, ("ess_cap", 10))
    assert same.retained.all() and same.cutoff_value is None
    q = truncate(WeightVector(np.linspace(0.1, 1.0, 10)[::-1]), ("quantile", 0.2))
    assert q.retained.sum() == 8 and not q.retained[-2:].any()


def test_truncate_errors():
    w = WeightVector(np.array([0.5]))
    with pytest.raises(SimilarityError):
        truncate(w, ("quantile", 1.0))
    with pytest.raises(SimilarityError):
        truncate(w, ("ess_cap", 0))
    with pytest.raises(SimilarityError):
        truncate(truncate(w, ("ess_cap", 1)), ("ess_cap", 1))


def test_ess_examples():
    assert effective_sample_size(WeightVector(np.array([0.5, 0.25, 0.25]))) == 1.0
    assert constant_weights(4, 0.0).ess == 0.0


@settings(max_examples=200)
@given(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.5, 0.75, 1.0]), min_size=1, max_size=12),
       st.floats(0.05, 6.0))
def test_ess_cap_matches_brute_force(values, cap):
    w = np.array(values)
    got = truncate(WeightVector(w), ("ess_cap", cap)).retained
    assert np.array_equal(got, brute_force_ess_cap(w, cap))


def test_propensity_matches_statsmodels(rng):
    sm = pytest.importorskip("statsmodels.api")
    schema = CONT + BIN
    internal = ds({"u": rng.normal(size=80), "x": (rng.random(80) < 0.3).astype(float)}, schema)
    external = ds({"u": rng.normal(0.7, 1, 120), "x": (rng.random(120) < 0.6).astype(float)}, schema, "e")
    X = np.column_stack([np.r_[internal.covariates["u"], external.covariates["u"]],
                         np.r_[internal.covariates["x"], external.covariates["x"]]])
    y = np.r_[np.ones(80), np.zeros(120)]
    fit = sm.Logit(y, sm.add_constant(X)).fit(disp=0)
    want = fit.predict(sm.add_constant(X))[80:]
    assert np.allclose(propensity_weights(internal, external).weights, want, atol=1e-8)
