import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from dratt.errors import ConfigError, DataError
from dratt.learners import (PROBABILITY, REAL, ConstantModel, LearnerSpec, design, fit_learner, fit_logistic,
                            fit_random_forest, fit_ridge, fit_super_learner, fit_tree, parse_learners,
                            predict_clipped, project_simplex, simplex_least_squares)
from dratt.learners.logistic import penalized_loglik


def newton_oracle(x, t, lam, iters=60):
    """Plain full-Hessian Newton on the penalized mean log-likelihood."""
    x1 = np.column_stack([np.ones(len(t)), x])
    b = np.zeros(x1.shape[1])
    pen = np.diag([0.0] + [lam] * x.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-x1 @ b))
        g = x1.T @ (t - p) / len(t) - pen @ b
        h = -(x1.T * (p * (1 - p))) @ x1 / len(t) - pen
        b = b - np.linalg.solve(h, g)
    return b


def test_logistic_matches_newton_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 3))
    t = (rng.random(20) < 1 / (1 + np.exp(-(x @ [1.0, -0.5, 0.3])))).astype(float)
    model = fit_logistic(x, t, lam=0.1)
    np.testing.assert_allclose(model.coef, newton_oracle(x, t, 0.1), atol=1e-6)


def test_logistic_matches_scipy_optimizer():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(60, 2))
    t = (rng.random(60) < 0.4).astype(float)
    lam = 0.05
    x1 = np.column_stack([np.ones(60), x])
    res = optimize.minimize(lambda b: -penalized_loglik(b, x1, t, lam), np.zeros(3), method="BFGS",
                            options={"gtol": 1e-10})
    np.testing.assert_allclose(fit_logistic(x, t, lam=lam).coef, res.x, atol=1e-5)


def test_logistic_symmetric_constant_design():
    x = np.ones((10, 1))
    t = np.array([0, 1] * 5, dtype=float)
    np.testing.assert_allclose(fit_logistic(x, t).predict(x), 0.5, atol=1e-12)


def test_logistic_separable_is_monotone_and_bounded():
    x = np.linspace(-2, 2, 30)[:, None]
    t = (x[:, 0] > 0).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_logistic(x, t, lam=1e-3)
    p = model.predict(np.linspace(-3, 3, 50)[:, None])
    assert np.all(np.diff(p) > 0)
    assert 0 < p.min() and p.max() < 1
    assert p.min() > 1e-12 and p.max() < 1 - 1e-12


def test_logistic_loglik_never_decreases():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 4))
    t = (rng.random(200) < 1 / (1 + np.exp(-3 * x[:, 0]))).astype(float)
    model = fit_logistic(x, t, lam=1e-4, interactions=2)
    assert model.converged
    assert np.all(np.diff(model.trace) >= -1e-14)


def test_logistic_rejects_non_binary():
    with pytest.raises(DataError):
        fit_logistic(np.zeros((3, 1)), np.array([0.0, 0.5, 1.0]))


def test_logistic_constant_target():
    m = fit_logistic(np.zeros((4, 1)), np.ones(4))
    assert isinstance(m, ConstantModel) and m.predict(np.zeros((2, 1))).tolist() == [1.0, 1.0]


def test_logistic_singular_design_is_damped():
    x = np.column_stack([np.r_[0, 0, 1, 1, 0, 1], np.r_[0, 0, 1, 1, 0, 1]]).astype(float)
    t = np.array([0, 1, 1, 0, 0, 1], dtype=float)
    with pytest.warns(RuntimeWarning, match="singular"):
        m = fit_logistic(x, t, lam=0.0)
    assert np.isfinite(m.coef).all()


def test_ridge_recovers_linear_map():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 2))
    t = 1.0 + x @ [2.0, -1.0]
    np.testing.assert_allclose(fit_ridge(x, t, lam=0.0).coef, [1.0, 2.0, -1.0], atol=1e-9)


def test_design_products_of_distinct_columns():
    x = np.array([[1.0, 2.0, 3.0]])
    assert design(x, 2).tolist() == [[1, 2, 3, 2, 3, 6]]
    assert design(x, 3).tolist() == [[1, 2, 3, 2, 3, 6, 6]]


def test_forest_constant_target():
    x = np.random.default_rng(0).normal(size=(40, 3))
    m = fit_random_forest(x, np.full(40, 0.3), n_trees=5, seed=1)
    np.testing.assert_allclose(m.predict(x[:7]), 0.3)


def test_single_stump_gives_branch_means():
    x = np.array([[0.0], [0.0], [0.0], [1.0], [1.0], [1.0], [1.0]])
    t = np.array([1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])
    m = fit_random_forest(x, t, n_trees=1, max_depth=1, min_leaf=1, bootstrap=False, seed=0)
    assert m.predict(np.array([[0.0], [1.0]])).tolist() == pytest.approx([1 / 3, 3 / 4])


def test_forest_beats_linear_on_xor():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 2, size=(400, 2)).astype(float)
    t = np.logical_xor(x[:, 0], x[:, 1]).astype(float)
    forest = fit_random_forest(x, t, n_trees=20, max_depth=3, min_leaf=2, max_features=2, seed=0)
    linear = fit_logistic(x, t)
    acc = lambda p: np.mean((p > 0.5) == t)  # noqa: E731
    assert acc(forest.predict(x)) > acc(linear.predict(x))
    assert acc(forest.predict(x)) == 1.0


def test_forest_deterministic_given_seed():
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(80, 3)), rng.normal(size=80)
    a = fit_random_forest(x, t, n_trees=4, seed=11).predict(x)
    b = fit_random_forest(x, t, n_trees=4, seed=11).predict(x)
    np.testing.assert_array_equal(a, b)


def test_tree_respects_depth_and_leaf_size():
    rng = np.random.default_rng(4)
    x, t = rng.normal(size=(300, 2)), rng.normal(size=300)
    tree = fit_tree(x, t, max_depth=3, min_leaf=10)
    assert tree.depth <= 3
    leaves = tree.predict(x)
    for v in np.unique(leaves):
        assert np.sum(leaves == v) >= 10


def test_regression_tree_split_oracle():
    # brute force over every threshold of the single feature
    rng = np.random.default_rng(9)
    x = rng.normal(size=(25, 1))
    t = rng.normal(size=25)
    best = None
    xs = np.sort(x[:, 0])
    for thr in (xs[:-1] + xs[1:]) / 2:
        left = t[x[:, 0] <= thr]
        right = t[x[:, 0] > thr]
        if len(left) < 3 or len(right) < 3:
            continue
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if best is None or sse < best[0]:
            best = (sse, thr)
    tree = fit_tree(x, t, max_depth=1, min_leaf=3)
    assert tree.threshold[0] == pytest.approx(best[1])


def test_forest_too_few_rows():
    with pytest.raises(DataError):
        fit_random_forest(np.zeros((3, 1)), np.zeros(3), min_leaf=5)


def test_project_simplex_examples():
    np.testing.assert_allclose(project_simplex(np.array([0.5, 0.5])), [0.5, 0.5])
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex(np.array([0.3, 0.3, 0.3])), [1 / 3] * 3)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_project_simplex_is_on_simplex(v):
    w = project_simplex(np.array(v))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_simplex_least_squares_matches_scipy():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(50, 3))
    t = z @ [0.6, 0.4, 0.0] + 0.1 * rng.normal(size=50)
    w = simplex_least_squares(z, t)
    res = optimize.minimize(lambda v: np.mean((t - z @ v) ** 2), np.full(3, 1 / 3), method="SLSQP",
                            bounds=[(0, 1)] * 3, constraints={"type": "eq", "fun": lambda v: v.sum() - 1},
                            options={"ftol": 1e-14})
    np.testing.assert_allclose(w, res.x, atol=1e-5)


def test_super_learner_single_base():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 2))
    t = (rng.random(60) < 0.5).astype(float)
    spec = LearnerSpec("super_learner", bases=(LearnerSpec("logistic"),), folds=3)
    sl = fit_super_learner(x, t, spec, seed=1)
    assert sl.weights.tolist() == [1.0]
    np.testing.assert_allclose(sl.predict(x), fit_logistic(x, t).predict(x))


def test_super_learner_identical_bases():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 2))
    t = (rng.random(60) < 0.5).astype(float)
    spec = LearnerSpec("super_learner", bases=(LearnerSpec("logistic"), LearnerSpec("logistic")), folds=3)
    sl = fit_super_learner(x, t, spec, seed=1)
    np.testing.assert_allclose(sl.predict(x), fit_logistic(x, t).predict(x), atol=1e-10)


def test_super_learner_prefers_correct_model():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(600, 2))
    t = (rng.random(600) < 1 / (1 + np.exp(-(2 * x[:, 0] - x[:, 1])))).astype(float)
    spec = LearnerSpec("super_learner", bases=(LearnerSpec("logistic"), LearnerSpec("forest", max_depth=0, n_trees=3)),
                       folds=5)
    sl = fit_super_learner(x, t, spec, seed=0)
    assert sl.cv_risk[0] < sl.cv_risk[1]
    assert sl.weights[0] >= 0.5
    assert sl.stacked_cv_risk <= sl.cv_risk.min() + 1e-12


def test_super_learner_drops_failing_base():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 2))
    t = (rng.random(40) < 0.5).astype(float)
    spec = LearnerSpec("super_learner", bases=(LearnerSpec("logistic"), LearnerSpec("forest", min_leaf=100)),
                       folds=2)
    with pytest.warns(RuntimeWarning, match="dropped"):
        sl = fit_super_learner(x, t, spec, seed=0)
    assert sl.weights.tolist() == [1.0, 0.0]
    bad = LearnerSpec("super_learner", bases=(LearnerSpec("forest", min_leaf=100),), folds=2)
    with pytest.raises(DataError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_super_learner(x, t, bad, seed=0)


def test_super_learner_needs_rows():
    spec = LearnerSpec("super_learner", bases=(LearnerSpec("logistic"),), folds=5)
    with pytest.raises(DataError):
        fit_super_learner(np.zeros((9, 1)), np.r_[np.zeros(5), np.ones(4)], spec)


def test_predict_clipped():
    low = ConstantModel(0.001)
    out, count = predict_clipped(low, np.zeros((3, 1)))
    assert out.tolist() == [0.01] * 3 and count == 3
    out, count = predict_clipped(ConstantModel(0.5), np.zeros((2, 1)))
    assert out.tolist() == [0.5, 0.5] and count == 0
    for eps in (0.0, 0.5, -1.0):
        with pytest.raises(ConfigError):
            predict_clipped(low, np.zeros((1, 1)), eps)
    with pytest.raises(ConfigError):
        predict_clipped(ConstantModel(0.3, REAL), np.zeros((1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_probability_predictions_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 2))
    t = (rng.random(30) < 0.5).astype(float)
    for spec in (LearnerSpec("logistic"), LearnerSpec("forest", n_trees=3, min_leaf=2)):
        p = fit_learner(x, t, spec, seed=seed, target_kind=PROBABILITY).predict(rng.normal(size=(10, 2)) * 3)
        assert np.all((p >= 0) & (p <= 1))


def test_spec_validation():
    for kw in ({"kind": "nope"}, {"lam": -1}, {"n_trees": 0}, {"kind": "super_learner"},
               {"kind": "super_learner", "bases": (LearnerSpec(),), "folds": 1}):
        with pytest.raises(ConfigError):
            LearnerSpec(**kw)
    assert LearnerSpec("rf").kind == "random_forest"


def test_parse_learners():
    assert parse_learners("logistic") == LearnerSpec("logistic")
    sl = parse_learners("logistic,forest", ["forest.n_trees=50", "logistic.lam=0.5", "stack.folds=3"])
    assert sl.kind == "super_learner" and sl.folds == 3
    assert sl.bases[0].lam == 0.5 and sl.bases[1].n_trees == 50
    for bad in (["n_trees=5"], ["forest.bogus=1"], ["forest.n_trees=x"]):
        with pytest.raises(ConfigError):
            parse_learners("forest", bad)
    with pytest.raises(ConfigError):
        parse_learners(" , ")
