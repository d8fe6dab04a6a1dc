import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from ivmed import nuisance
from ivmed.data import INTERCEPT, L1, LINEAR, MAIN, LearnerKind, LearnerSpec
from ivmed.scm import W_NAMES, build_dgm


def logistic_data(n=600, k=6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    beta = np.linspace(-1, 1, k)
    y = (rng.uniform(size=n) < expit(0.3 + x @ beta)).astype(float)
    return x, y


def test_feature_map_term_counts():
    names = ("a", "b", "c")
    assert len(nuisance.FeatureMap.main(names).terms) == 3
    assert len(nuisance.FeatureMap.interactions(names, 2).terms) == 6
    fmap = nuisance.FeatureMap.interactions(names, None)
    assert len(fmap.terms) == 7
    assert fmap.names[-1] == "a:b:c"


def test_centered_expansion_spans_raw_products():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 2, size=(50, 3)).astype(float)
    raw = nuisance.FeatureMap.interactions("abc", None).expand(x)
    cen = nuisance.FeatureMap.interactions("abc", None, centers=x.mean(0)).expand(x)
    one = np.ones((50, 1))
    coef = np.linalg.lstsq(np.hstack([one, cen]), np.hstack([one, raw]), rcond=None)[0]
    np.testing.assert_allclose(np.hstack([one, cen]) @ coef, np.hstack([one, raw]), atol=1e-10)


def test_intercept_only_mean():
    y = np.array([1, 1, 1, 0] * 5, dtype=float)
    model = nuisance.fit(INTERCEPT, np.zeros((20, 1)), y)
    np.testing.assert_allclose(model.predict(np.zeros((3, 1))), 0.75)


def test_constant_outcome_flags_degenerate():
    model = nuisance.fit(L1, np.random.default_rng(0).integers(0, 2, (30, 2)), np.ones(30))
    assert model.degenerate
    np.testing.assert_allclose(model.predict(np.zeros((2, 2))), 1 - nuisance.CLIP)


def test_tiny_penalty_matches_unpenalized_logistic():
    x, y = logistic_data()
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, lambda_grid=(1e-10,), max_order=1)
    model = nuisance.fit(spec, x, y)
    ref = nuisance.newton_logistic(x, y, np.ones(len(y)))
    # slopes are unaffected by the centering of the interaction expansion
    np.testing.assert_allclose(model.coefficients[1:], ref[1:], atol=1e-4)
    np.testing.assert_allclose(model.predict(x), expit(ref[0] + x @ ref[1:]), atol=1e-5)


def test_logistic_main_matches_newton():
    x, y = logistic_data(seed=3)
    model = nuisance.fit(MAIN, x, y)
    ref = nuisance.newton_logistic(x, y, np.ones(len(y)))
    np.testing.assert_allclose(model.coefficients, ref, atol=1e-8)


def test_huge_penalty_returns_mean():
    x, y = logistic_data(seed=4)
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, lambda_grid=(1e6,))
    model = nuisance.fit(spec, x, y)
    np.testing.assert_allclose(model.predict(x), y.mean(), atol=1e-10)
    np.testing.assert_allclose(model.coefficients[1:], 0.0)


def test_lambda_max_zeroes_everything():
    x, y = logistic_data(seed=5)
    w = np.full(len(y), 1 / len(y))
    std = nuisance._standardize(x, w)
    lmax = nuisance.lambda_max(std.X, y, w)
    path = nuisance._run_path(std, y, w, np.array([lmax * 1.0001, lmax * 0.9]), True)
    assert np.all(path[0, 1:] == 0)
    assert np.any(path[1, 1:] != 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 0.2))
def test_coordinate_descent_objective_nonincreasing(seed, lam_frac):
    rng = np.random.default_rng(seed)
    n, p = 40, 5
    X = rng.normal(size=(n, p))
    X = (X - X.mean(0)) / X.std(0)
    y = (rng.uniform(size=n) < 0.4).astype(float)
    w = np.full(n, 1 / n)
    lam = lam_frac * max(nuisance.lambda_max(X, y, w), 1e-3)
    beta = np.zeros(p + 1)
    sweeps, hist = nuisance.cd_logistic(X, y, w, lam, beta, 1e-9, 500, True)
    start = nuisance._logistic_loss(np.zeros(n), y, w)
    assert hist[0] <= start + 1e-15
    assert np.all(np.diff(hist) <= 1e-15)


def test_gaussian_descent_matches_least_squares():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 4))
    y = 1 + x @ np.array([0.5, -1, 0, 2]) + rng.normal(size=300)
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, lambda_grid=(1e-12,), max_order=1)
    model = nuisance.fit(spec, x, y, "continuous")
    ref = nuisance.fit(LINEAR, x, y, "continuous")
    np.testing.assert_allclose(model.coefficients[1:], ref.coefficients[1:], atol=1e-6)
    np.testing.assert_allclose(model.predict(x), ref.predict(x), atol=1e-6)
    np.testing.assert_allclose(ref.coefficients, np.linalg.lstsq(np.column_stack([np.ones(300), x]), y,
                                                                 rcond=None)[0], atol=1e-10)


def test_row_order_invariance():
    scm = build_dgm("single")
    d = scm.sample(800, 11)
    x = np.column_stack([d.a] + [d.w[:, j] for j in range(3)])
    perm = np.random.default_rng(0).permutation(d.n)
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, n_lambda=15)
    m1 = nuisance.fit(spec, x, d.z, seed=3)
    m2 = nuisance.fit(spec, x[perm], d.z[perm], seed=3)
    assert m1.lam == m2.lam
    np.testing.assert_allclose(m1.coefficients, m2.coefficients, atol=1e-12)


def test_predictions_clipped():
    x = np.array([[0.0], [1.0]] * 20)
    y = x[:, 0].copy()
    y[0] = 1.0  # avoid perfect separation collapsing to a constant
    model = nuisance.fit(MAIN, x, y, clip=0.01)
    p = model.predict(x)
    assert p.min() >= 0.01 and p.max() <= 0.99


def test_override_and_unknown_column():
    x, y = logistic_data(n=200, k=2, seed=7)
    model = nuisance.fit(MAIN, x, y, names=("a", "w1"))
    req = nuisance.PredictionRequest({"w1": x[:, 1]}, {"a": 1.0})
    want = model.predict(np.column_stack([np.ones(200), x[:, 1]]))
    np.testing.assert_allclose(nuisance.predict(model, req), want)
    with pytest.raises(nuisance.UnknownColumn):
        model.predict(nuisance.PredictionRequest({"w1": x[:, 1]}, {"zz": 0.0}))
    with pytest.raises(nuisance.UnknownColumn):
        model.predict(nuisance.PredictionRequest({"a": x[:, 0]}))


def test_zero_coefficient_override_ignored():
    rng = np.random.default_rng(8)
    x = rng.integers(0, 2, size=(400, 2)).astype(float)
    y = (rng.uniform(size=400) < 0.3 + 0.4 * x[:, 1]).astype(float)
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, lambda_grid=(1e6,))
    model = nuisance.fit(spec, x, y, names=("a", "w1"))
    p0 = model.predict(nuisance.PredictionRequest({"w1": x[:, 1]}, {"a": 0.0}))
    p1 = model.predict(nuisance.PredictionRequest({"w1": x[:, 1]}, {"a": 1.0}))
    np.testing.assert_array_equal(p0, p1)


def test_bad_inputs():
    with pytest.raises(ValueError):
        nuisance.fit(MAIN, np.zeros((5, 1)), np.array([0, 1, 2, 0, 1.0]))
    with pytest.raises(ValueError):
        nuisance.fit(MAIN, np.zeros((5, 1)), np.zeros(4))
    with pytest.raises(ValueError):
        nuisance.fit(MAIN, np.zeros((5, 1)), np.zeros(5), outcome_type="count")


def test_weights_equal_replication():
    x, y = logistic_data(n=100, k=2, seed=9)
    w = np.random.default_rng(0).integers(1, 4, 100)
    weighted = nuisance.fit(MAIN, x, y, weights=w.astype(float))
    replicated = nuisance.fit(MAIN, np.repeat(x, w, axis=0), np.repeat(y, w))
    np.testing.assert_allclose(weighted.coefficients, replicated.coefficients, atol=1e-8)


def test_instrument_propensity_recovered():
    scm = build_dgm("single")
    d = scm.sample(5000, 21)
    x = np.column_stack([d.a, d.w])
    model = nuisance.fit(LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, max_order=None), x, d.z,
                         names=("a",) + W_NAMES)
    sup = scm.support()
    truth = scm.cond({"z": 1}, {"a": sup["a"], **{w: sup[w] for w in W_NAMES}})
    pred = model.predict(np.column_stack([sup["a"]] + [sup[w] for w in W_NAMES]))
    assert np.max(np.abs(pred - truth)) < 0.05
