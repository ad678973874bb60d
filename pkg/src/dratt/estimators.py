"""One-step (influence-function) estimators for the ATT under attrition,
the overall treatment removal effect, subgroup ATTs, a homogeneity test and
a propensity overlap diagnostic."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .crossfit import NuisanceSurface
from .data_model import CausalDataset, SubgroupPartition
from .errors import ConfigError, NumericError
from .special import chi2_sf

Z95 = 1.96


@dataclass(frozen=True, eq=False)
class InfluenceRecord:
    """Uncentered influence values, one entry per observation.

    For OTR work ``phi_y`` (for E[Y]) and ``phi_y0`` (for E[Y^0]) are also
    filled when the surface carries ``mu_y``.
    """

    phi_ay1: np.ndarray
    phi_a: np.ndarray
    phi_ay0: np.ndarray
    ids: np.ndarray | None = None
    phi_y: np.ndarray | None = None
    phi_y0: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.phi_a)

    def subset(self, rows) -> "InfluenceRecord":
        pick = lambda v: None if v is None else v[rows]  # noqa: E731
        return InfluenceRecord(self.phi_ay1[rows], self.phi_a[rows], self.phi_ay0[rows],
                               pick(self.ids), pick(self.phi_y), pick(self.phi_y0))


def influence_values(dataset: CausalDataset, surface: NuisanceSurface) -> InfluenceRecord:
    """Evaluate the three (uncentered) influence functions at every row.

    Rows with ``R=0`` contribute only the plug-in terms; their missing
    treatment and outcome are never read.
    """
    if surface.n != dataset.n:
        raise ConfigError("nuisance surface does not match the dataset")
    obs = dataset.r == 1
    r = obs.astype(float)
    a = np.where(obs, dataset.a, 0.0)
    y = np.where(obs, dataset.y, 0.0)
    om, pi, mu0, mu1 = surface.omega, surface.pi, surface.mu0, surface.mu1

    w = r / om
    with np.errstate(divide="ignore", invalid="ignore"):
        odds = pi / (1.0 - pi)
        phi_ay1 = w * (a * y - mu1) + mu1
        phi_a = w * (a - pi) + pi
        phi_ay0 = w * (a - pi) * mu0 + w * (1.0 - a) * odds * (y - mu0) + pi * mu0
        phi_y = phi_y0 = None
        if surface.mu_y is not None:
            phi_y = w * (y - surface.mu_y) + surface.mu_y
            # IPW weight of an observed control is 1 / P(R=1, A=0 | X)
            phi_y0 = w * (1.0 - a) / (1.0 - pi) * (y - mu0) + mu0

    for name, v in (("phi_ay1", phi_ay1), ("phi_a", phi_a), ("phi_ay0", phi_ay0),
                    ("phi_y", phi_y), ("phi_y0", phi_y0)):
        if v is not None and not np.isfinite(v).all():
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise NumericError(f"{name} is not finite at row {bad + 1} (id {dataset.ids[bad]})")
    return InfluenceRecord(phi_ay1, phi_a, phi_ay0, dataset.ids, phi_y, phi_y0)


def _variance(v: np.ndarray) -> float:
    return float(np.var(v, ddof=1)) if v.size > 1 else 0.0


@dataclass(frozen=True)
class AttEstimate:
    psi_att: float
    psi_ay1: float
    psi_ay0: float
    psi_a: float
    sigma2: float
    ci_low: float
    ci_high: float
    n: int
    relative_reduction: float
    rr_ci_low: float
    rr_ci_high: float

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2 / self.n))

    def to_dict(self) -> dict:
        return {
            "estimate": self.psi_att,
            "components": {"psi_ay1": self.psi_ay1, "psi_ay0": self.psi_ay0, "psi_a": self.psi_a},
            "sigma2": self.sigma2,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "n": self.n,
            "relative_reduction": {"estimate": self.relative_reduction,
                                   "ci": [self.rr_ci_low, self.rr_ci_high]},
        }


def estimate_att(records: InfluenceRecord, eps: float = 0.01) -> AttEstimate:
    """Combine the component means into the ATT with a Wald 95% interval.

    The variance is the sample variance of
    ``(phi_ay1 - phi_ay0 - phi_a * psi_att) / psi_a``.
    """
    n = records.n
    if n < 2:
        raise NumericError("need at least two observations")
    psi_ay1 = float(np.mean(records.phi_ay1))
    psi_ay0 = float(np.mean(records.phi_ay0))
    psi_a = float(np.mean(records.phi_a))
    if not eps < psi_a < 1 - eps:
        raise NumericError(f"treated fraction degenerate: estimated P(A=1) = {psi_a:.4g}")
    psi = (psi_ay1 - psi_ay0) / psi_a
    phi = (records.phi_ay1 - records.phi_ay0 - records.phi_a * psi) / psi_a
    sigma2 = _variance(phi)
    half = Z95 * np.sqrt(sigma2 / n)

    if psi_ay1 != 0:
        rr = psi / (psi_ay1 / psi_a)
        phi_rr = (psi_ay0 * (records.phi_ay1 - psi_ay1) / psi_ay1 - (records.phi_ay0 - psi_ay0)) / psi_ay1
        rr_half = Z95 * np.sqrt(_variance(phi_rr) / n)
    else:
        rr, rr_half = float("nan"), float("nan")
    return AttEstimate(psi, psi_ay1, psi_ay0, psi_a, sigma2, psi - half, psi + half, n,
                       rr, rr - rr_half, rr + rr_half)


def fold_average_att(records: InfluenceRecord, fold_of: np.ndarray, eps: float = 0.01) -> float:
    """Mean of per-fold ATT estimates (the alternative aggregation to the
    pooled average used by :func:`estimate_att`)."""
    fold_of = np.asarray(fold_of)
    ests = [estimate_att(records.subset(np.flatnonzero(fold_of == k)), eps).psi_att
            for k in np.unique(fold_of)]
    return float(np.mean(ests))


@dataclass(frozen=True)
class OtrEstimate:
    psi_otr: float
    psi_y: float
    psi_y0: float
    sigma2: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2 / self.n))

    def to_dict(self) -> dict:
        return {"estimate": self.psi_otr, "components": {"psi_y": self.psi_y, "psi_y0": self.psi_y0},
                "sigma2": self.sigma2, "se": self.se, "ci": [self.ci_low, self.ci_high], "n": self.n}


def estimate_otr(dataset: CausalDataset, surface: NuisanceSurface) -> OtrEstimate:
    """Overall treatment removal effect ``E[Y] - E[Y^0]``."""
    if surface.mu_y is None:
        raise ConfigError("OTR needs the E[Y|X,R=1] nuisance (fit with want_mu_y=True)")
    rec = influence_values(dataset, surface)
    return _otr_from_records(rec)


def _otr_from_records(rec: InfluenceRecord) -> OtrEstimate:
    n = rec.n
    psi_y = float(np.mean(rec.phi_y))
    psi_y0 = float(np.mean(rec.phi_y0))
    psi = psi_y - psi_y0
    sigma2 = _variance(rec.phi_y - rec.phi_y0)
    half = Z95 * np.sqrt(sigma2 / n)
    return OtrEstimate(psi, psi_y, psi_y0, sigma2, psi - half, psi + half, n)


@dataclass(frozen=True)
class SubgroupEstimates:
    labels: tuple[str, ...]
    estimates: tuple[AttEstimate, ...]
    dropped: dict

    def to_dict(self) -> dict:
        return {
            "groups": [{"label": lab, **est.to_dict()} for lab, est in zip(self.labels, self.estimates)],
            "dropped": self.dropped,
        }


def subgroup_estimates(dataset: CausalDataset, surface: NuisanceSurface, partition: SubgroupPartition,
                       min_size: int = 30, eps: float = 0.01) -> SubgroupEstimates:
    """ATT within each group from that group's influence values only.

    Groups with fewer than ``min_size`` rows are dropped and reported.
    """
    rec = influence_values(dataset, surface)
    if len(partition.assignment) != dataset.n:
        raise ConfigError("partition does not match the dataset")
    labels, ests, dropped = [], [], {}
    for k, lab in enumerate(partition.labels):
        rows = np.flatnonzero(partition.assignment == k)
        if rows.size < min_size:
            dropped[lab] = int(rows.size)
            continue
        labels.append(lab)
        ests.append(estimate_att(rec.subset(rows), eps))
    return SubgroupEstimates(tuple(labels), tuple(ests), dropped)


@dataclass(frozen=True)
class HomogeneityTest:
    t_n: float
    df: int
    p_value: float
    group_estimates: tuple[AttEstimate, ...] = ()
    labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"t_n": self.t_n, "df": self.df, "p_value": self.p_value}


def difference_matrix(k: int) -> np.ndarray:
    """``(k-1) x k`` successive differences: row i is ``e_i - e_{i+1}``."""
    c = np.zeros((k - 1, k))
    idx = np.arange(k - 1)
    c[idx, idx] = 1.0
    c[idx, idx + 1] = -1.0
    return c


def homogeneity_statistic(psi: Sequence[float], sigma: np.ndarray, n: int) -> tuple[float, int, float]:
    """Wald statistic ``n (C psi)' (C Sigma C')^{-1} (C psi)`` and its chi-squared
    p-value on ``len(psi) - 1`` degrees of freedom. ``sigma / n`` is the
    covariance of ``psi``."""
    psi = np.asarray(psi, dtype=float)
    k = psi.size
    if k < 2:
        raise NumericError("homogeneity test needs at least two groups")
    c = difference_matrix(k)
    m = c @ np.asarray(sigma, dtype=float) @ c.T
    if np.linalg.cond(m) > 1e12:
        raise NumericError("contrast covariance is singular; merge groups")
    d = c @ psi
    t = float(n * d @ np.linalg.solve(m, d))
    t = max(t, 0.0)
    return t, k - 1, chi2_sf(t, k - 1)


def homogeneity_test(group_estimates: SubgroupEstimates | Sequence[AttEstimate]) -> HomogeneityTest:
    """Test equal ATT across groups.

    Groups are disjoint samples, so the covariance of the group estimates is
    diagonal with entries ``sigma2_g / n_g``.
    """
    if isinstance(group_estimates, SubgroupEstimates):
        labels, ests = group_estimates.labels, tuple(group_estimates.estimates)
    else:
        ests = tuple(group_estimates)
        labels = tuple(str(k) for k in range(len(ests)))
    if len(ests) < 2:
        raise NumericError("homogeneity test needs at least two retained groups")
    n = sum(e.n for e in ests)
    psi = [e.psi_att for e in ests]
    sigma = np.diag([e.sigma2 * n / e.n for e in ests])
    t, df, p = homogeneity_statistic(psi, sigma, n)
    return HomogeneityTest(t, df, p, ests, labels)


@dataclass(frozen=True, eq=False)
class OverlapReport:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float
    low_fraction: float
    low_count: int

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "low_fraction": self.low_fraction,
                "low_count": self.low_count, "bins": len(self.counts)}


def overlap_diagnostic(surface: NuisanceSurface, bins: int = 50, threshold: float = 0.02) -> OverlapReport:
    """Histogram of the treatment propensity over [0, 1] and the share of rows
    whose propensity falls below ``threshold``."""
    counts, edges = np.histogram(surface.pi, bins=bins, range=(0.0, 1.0))
    low = int(np.count_nonzero(surface.pi < threshold))
    return OverlapReport(edges, counts, threshold, low / surface.n, low)
