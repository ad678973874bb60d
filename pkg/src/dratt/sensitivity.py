"""Relaxations of no-unmeasured-confounding: ratio bounds on the ATT, data
calibration of the ratio from covariate subsets, and additive bounds on the
overall treatment removal effect."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .crossfit import FoldAssignment, NuisanceSurface, assign_folds, crossfit_predict
from .data_model import BINARY, CausalDataset, covariate_columns
from .errors import ConfigError, NumericError
from .estimators import Z95, InfluenceRecord, _variance, influence_values
from .learners import PROBABILITY, REAL, LearnerSpec

DEFAULT_GRID = tuple(np.round(np.linspace(1.0, 2.0, 101), 2))


@dataclass(frozen=True)
class RatioBounds:
    delta: float
    lower: float
    lower_ci: tuple[float, float]
    upper: float
    upper_ci: tuple[float, float]


def _components(records: InfluenceRecord, eps: float):
    psi_ay1 = float(np.mean(records.phi_ay1))
    psi_ay0 = float(np.mean(records.phi_ay0))
    psi_a = float(np.mean(records.phi_a))
    if not eps < psi_a < 1 - eps:
        raise NumericError(f"treated fraction degenerate: estimated P(A=1) = {psi_a:.4g}")
    if psi_ay0 < 0:
        raise NumericError(f"estimated E[A Y^0] = {psi_ay0:.4g} is negative; ratio bounds need it non-negative")
    return psi_ay1, psi_ay0, psi_a


def _bound(records, c, psi_ay1, psi_ay0, psi_a):
    b = (psi_ay1 - c * psi_ay0) / psi_a
    phi = (records.phi_ay1 - c * records.phi_ay0 - records.phi_a * b) / psi_a
    half = Z95 * np.sqrt(_variance(phi) / records.n)
    return b, (b - half, b + half)


def ratio_bounds(records: InfluenceRecord, delta: float, eps: float = 0.01) -> RatioBounds:
    """Bounds on the ATT when ``E[Y^0 | X, A=1] / E[Y^0 | X, A=0]`` lies in
    ``[1/delta, delta]``: ``L = (psi_ay1 - delta psi_ay0) / psi_a`` and
    ``U = (psi_ay1 - psi_ay0 / delta) / psi_a``. The CIs treat delta as fixed."""
    if not delta >= 1:
        raise ConfigError(f"delta must be >= 1, got {delta}")
    comps = _components(records, eps)
    lo, lo_ci = _bound(records, delta, *comps)
    hi, hi_ci = _bound(records, 1.0 / delta, *comps)
    return RatioBounds(float(delta), lo, lo_ci, hi, hi_ci)


@dataclass(frozen=True, eq=False)
class SensitivityCurve:
    delta_grid: np.ndarray
    lower: np.ndarray  # columns: estimate, ci_lo, ci_hi
    upper: np.ndarray

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "lower", "lower_ci_lo", "lower_ci_hi", "upper", "upper_ci_lo", "upper_ci_hi"])
            for d, lo, hi in zip(self.delta_grid, self.lower, self.upper):
                w.writerow([repr(float(d))] + [repr(float(v)) for v in (*lo, *hi)])

    def to_dict(self) -> dict:
        return {"delta": self.delta_grid.tolist(), "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def crossing(self) -> float | None:
        """Smallest grid delta at which the lower bound is <= 0, if any."""
        hit = np.flatnonzero(self.lower[:, 0] <= 0)
        return float(self.delta_grid[hit[0]]) if hit.size else None


def sensitivity_curve(records: InfluenceRecord, grid: Sequence[float] = DEFAULT_GRID,
                      eps: float = 0.01) -> SensitivityCurve:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("delta grid must be a non-empty list")
    if np.any(np.diff(grid) < 0):
        raise ConfigError("delta grid must be sorted")
    if np.any(grid < 1):
        raise ConfigError("delta grid values must be >= 1")
    pts = [ratio_bounds(records, d, eps) for d in grid]
    lower = np.array([(p.lower, *p.lower_ci) for p in pts])
    upper = np.array([(p.upper, *p.upper_ci) for p in pts])
    tol = 1e-12 * max(1.0, float(np.max(np.abs(np.concatenate([lower[:, 0], upper[:, 0]])))))
    assert np.all(np.diff(lower[:, 0]) <= tol), "lower bound must be non-increasing in delta"
    assert np.all(np.diff(upper[:, 0]) >= -tol), "upper bound must be non-decreasing in delta"
    assert np.all(lower[:, 0] <= upper[:, 0] + tol), "lower bound must not exceed upper bound"
    return SensitivityCurve(grid, lower, upper)


@dataclass(frozen=True)
class DeltaCalibration:
    subset: tuple[str, ...]
    delta_hat: float
    subset_size: int
    se: float
    numerator: float
    denominator: float
    sup: float | None = None

    def to_dict(self) -> dict:
        out = {"subset": list(self.subset), "size": self.subset_size, "delta_hat": self.delta_hat,
               "se": self.se, "numerator": self.numerator, "denominator": self.denominator}
        if self.sup is not None:
            out["sup"] = self.sup
        return out


def _dr_control_mean(r, a, y, pi, m):
    """Per-row integrand whose mean over rows, divided by P(R=1, A=1),
    estimates ``E[m | R=1, A=1]`` where ``m`` is a regression among controls."""
    return r * a * m + r * (1 - a) * pi / (1 - pi) * (y - m)


def calibrate_delta(dataset: CausalDataset, surface: NuisanceSurface, subset: Sequence[str],
                    spec: LearnerSpec, folds: FoldAssignment | None = None, *, eps: float = 0.01,
                    with_sup: bool = False) -> DeltaCalibration:
    """Estimate how much ignoring the covariates outside ``subset`` moves the
    untreated outcome mean of the treated-observed population.

    ``delta_hat = E[mu0(X) | A=1, R=1] / E[nu(V) | A=1, R=1]`` with
    ``nu(V) = E[Y | V, A=0, R=1]``; both means are doubly robust and the V-level
    regressions are cross-fitted. ``with_sup`` also reports the largest
    per-row ratio ``E[mu0(X) | V, A=1, R=1] / nu(V)`` over treated-observed rows.
    """
    names = tuple(dict.fromkeys(subset))
    if not names:
        raise ConfigError("covariate subset is empty")
    if surface.n != dataset.n:
        raise ConfigError("nuisance surface does not match the dataset")
    cols = covariate_columns(dataset, names)
    if folds is None:
        folds = surface.folds if surface.folds is not None else assign_folds(dataset.n, 10, 0)
    xv = dataset.x[:, cols]
    obs = dataset.r == 1
    r = obs.astype(float)
    a = np.where(obs, dataset.a, 0.0)
    y = np.where(obs, dataset.y, 0.0)
    binary = dataset.outcome_kind == BINARY
    kind = PROBABILITY if binary else REAL

    pi_v = np.clip(crossfit_predict(dataset, spec, folds, xv, a, obs, tag=1), eps, 1 - eps)
    nu = crossfit_predict(dataset, spec, folds, xv, y, obs & (a == 0), target_kind=kind, tag=2)
    if binary:
        nu = np.clip(nu, 0.0, 1.0)

    f = _dr_control_mean(r, a, y, surface.pi, surface.mu0)
    g = _dr_control_mean(r, a, y, pi_v, nu)
    p_treat = float(np.mean(r * a))
    if p_treat <= 0:
        raise NumericError("no treated observed rows")
    num = float(np.mean(f)) / p_treat
    den = float(np.mean(g)) / p_treat
    if den < 1e-6:
        raise NumericError(f"ratio undefined on subset {list(names)}: untreated mean {den:.3g}")
    delta = num / den
    se = float(np.sqrt(_variance((f - delta * g) / (den * p_treat)) / dataset.n))

    sup = None
    if with_sup:
        treated = obs & (a == 1)
        h = crossfit_predict(dataset, spec, folds, xv, surface.mu0, treated, target_kind=REAL, tag=3)
        ok = treated & (nu >= 1e-6)
        if not ok.any():
            raise NumericError(f"ratio undefined on subset {list(names)}")
        sup = float(np.max(h[ok] / nu[ok]))
    return DeltaCalibration(names, delta, len(names), se, num, den, sup)


def random_subsets(names: Sequence[str], sizes: Sequence[int], per_size: int = 1,
                   seed: int = 0) -> list[tuple[str, ...]]:
    """``per_size`` random covariate subsets of each size, kept in schema order."""
    rng = np.random.default_rng(seed)
    names = list(names)
    out = []
    for s in sizes:
        if not 1 <= s <= len(names):
            raise ConfigError(f"subset size {s} outside 1..{len(names)}")
        for _ in range(per_size):
            pick = np.sort(rng.choice(len(names), size=s, replace=False))
            out.append(tuple(names[j] for j in pick))
    return out


@dataclass(frozen=True)
class OtrBounds:
    delta_add: float
    psi_otr: float
    psi_a: float
    lower: float
    lower_ci: tuple[float, float]
    upper: float
    upper_ci: tuple[float, float]

    def to_dict(self) -> dict:
        return {"delta_add": self.delta_add, "lower": self.lower, "lower_ci": list(self.lower_ci),
                "upper": self.upper, "upper_ci": list(self.upper_ci)}


def otr_additive_bounds(dataset: CausalDataset, surface: NuisanceSurface, delta_add: float) -> OtrBounds:
    """Bounds ``psi_otr -/+ delta_add * E[pi(X)]``, valid when, given X, the
    mean of ``Y^0`` among the treated is within ``delta_add`` of its mean
    among the untreated."""
    if not delta_add >= 0:
        raise ConfigError(f"additive delta must be >= 0, got {delta_add}")
    if surface.mu_y is None:
        raise ConfigError("OTR needs the E[Y|X,R=1] nuisance (fit with want_mu_y=True)")
    rec = influence_values(dataset, surface)
    phi_otr = rec.phi_y - rec.phi_y0
    psi_otr = float(np.mean(phi_otr))
    psi_a = float(np.mean(rec.phi_a))

    def side(sign):
        phi = phi_otr + sign * delta_add * rec.phi_a
        est = psi_otr + sign * delta_add * psi_a
        half = Z95 * np.sqrt(_variance(phi) / rec.n)
        return est, (est - half, est + half)

    lo, lo_ci = side(-1.0)
    hi, hi_ci = side(1.0)
    return OtrBounds(float(delta_add), psi_otr, psi_a, lo, lo_ci, hi, hi_ci)
