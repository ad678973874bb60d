import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dratt.crossfit import NuisanceSurface, assign_folds, crossfit_predict, fit_nuisances
from dratt.data_model import BINARY, CausalDataset, Column, CovariateSchema, RoleMap
from dratt.errors import ConfigError, DataError
from dratt.learners import LearnerSpec
from dratt.sim import confounded_dgp, generate


@given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 2**31))
def test_folds_partition_rows(n, k, seed):
    if k > n:
        with pytest.raises(ConfigError):
            assign_folds(n, k, seed)
        return
    f = assign_folds(n, k, seed)
    assert sorted(set(f.fold_of.tolist())) == list(range(k))
    assert max(f.sizes) - min(f.sizes) <= 1
    np.testing.assert_array_equal(f.fold_of, assign_folds(n, k, seed).fold_of)


def test_fold_count_validation():
    with pytest.raises(ConfigError):
        assign_folds(10, 1)


def small_data(n=400, seed=0):
    return generate(confounded_dgp(), n, seed).dataset


def test_predictions_are_out_of_fold():
    # perturbing the outcomes inside fold 0 must not move fold-0 predictions
    ds = small_data()
    folds = assign_folds(ds.n, 4, 1)
    spec = LearnerSpec("logistic", interactions=2)
    base = fit_nuisances(ds, spec, folds, want_mu_y=True)
    inside = folds.fold_of == 0
    obs = ds.r == 1
    y = ds.y.copy()
    y[inside & obs] = 1 - y[inside & obs]
    a = ds.a.copy()
    a[inside & obs] = 1 - a[inside & obs]
    flipped = CausalDataset(x=ds.x, r=ds.r, a=a, y=y, ids=ds.ids, schema=ds.schema, roles=ds.roles)
    other = fit_nuisances(flipped, spec, folds, want_mu_y=True)
    for name in ("omega", "pi", "mu0", "mu1", "mu_y"):
        np.testing.assert_array_equal(getattr(base, name)[inside], getattr(other, name)[inside])
        assert not np.array_equal(getattr(base, name)[~inside], getattr(other, name)[~inside]) or name == "omega"


def test_surface_clipped_and_deterministic():
    ds = small_data()
    folds = assign_folds(ds.n, 5, 3)
    spec = LearnerSpec("forest", n_trees=5, min_leaf=2)
    s1 = fit_nuisances(ds, spec, folds, eps=0.05)
    s2 = fit_nuisances(ds, spec, folds, eps=0.05, n_jobs=2)
    for name in ("omega", "pi", "mu0", "mu1"):
        np.testing.assert_array_equal(getattr(s1, name), getattr(s2, name))
    for name in ("omega", "pi"):
        v = getattr(s1, name)
        assert v.min() >= 0.05 and v.max() <= 0.95
    assert 0 <= s1.mu0.min() and s1.mu1.max() <= 1


def test_constant_option_uses_training_means():
    ds = small_data()
    folds = assign_folds(ds.n, 3, 0)
    s = fit_nuisances(ds, LearnerSpec("logistic"), folds, constant=("omega",))
    for k in range(3):
        inside = folds.fold_of == k
        np.testing.assert_allclose(s.omega[inside], ds.r[~inside].mean())


def test_empty_training_subset_is_reported():
    n = 6
    ds = CausalDataset(x=np.zeros((n, 1)), r=np.array([1, 1, 0, 0, 0, 0]), a=np.array([0, 1] + [np.nan] * 4),
                       y=np.array([0, 1] + [np.nan] * 4), ids=np.arange(n).astype(str),
                       schema=CovariateSchema((Column("c", BINARY),)), roles=RoleMap("a", "y", "r"))
    folds = assign_folds(n, 6, 0)
    with pytest.raises(DataError, match="fewer folds"):
        fit_nuisances(ds, LearnerSpec("logistic"), folds)


def test_bad_clip_and_names():
    ds = small_data(50)
    folds = assign_folds(ds.n, 2, 0)
    with pytest.raises(ConfigError):
        fit_nuisances(ds, LearnerSpec(), folds, eps=0.5)
    with pytest.raises(ConfigError):
        fit_nuisances(ds, LearnerSpec(), folds, constant=("beta",))


def test_crossfit_predict_out_of_fold():
    ds = small_data()
    folds = assign_folds(ds.n, 4, 0)
    t = ds.x[:, 0].copy()
    pred = crossfit_predict(ds, LearnerSpec("constant"), folds, ds.x, t, np.ones(ds.n, bool))
    for k in range(4):
        inside = folds.fold_of == k
        np.testing.assert_allclose(pred[inside], t[~inside].mean())


def test_surface_validation_and_csv(tmp_path):
    with pytest.raises(DataError):
        NuisanceSurface(np.ones(3), np.ones(2), np.ones(3), np.ones(3))
    with pytest.raises(DataError):
        NuisanceSurface(np.ones(2), np.array([0.5, np.nan]), np.ones(2), np.ones(2))
    s = NuisanceSurface(np.full(2, 0.5), np.full(2, 0.25), np.zeros(2), np.ones(2))
    s.to_csv(tmp_path / "s.csv", ["a", "b"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "id,fold,omega,pi,mu0,mu1"
    assert lines[1] == "a,-1,0.5,0.25,0.0,1.0"


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_surface_rows_align_with_folds(seed):
    ds = small_data(120, seed)
    folds = assign_folds(ds.n, 3, seed)
    s = fit_nuisances(ds, LearnerSpec("logistic"), folds)
    assert s.n == ds.n and s.folds is folds
    assert np.isfinite(s.omega).all()
