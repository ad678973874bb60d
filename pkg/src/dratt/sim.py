"""Synthetic data-generating processes with known ground truth and the Monte
Carlo harness used to check consistency, double robustness, coverage and
convergence rates.

Discrete processes are enumerated exactly. The smooth process has a Monte
Carlo oracle.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .crossfit import NuisanceSurface, assign_folds, fit_nuisances
from .data_model import BINARY, CONTINUOUS, Column, CovariateSchema, CausalDataset, RoleMap, partition_by_labels
from .errors import ConfigError, DrattError, NumericError
from .estimators import estimate_att, homogeneity_test, influence_values, subgroup_estimates
from .learners import LearnerSpec
from .learners.logistic import expit

logger = logging.getLogger(__name__)

MIN_PROB = 0.05
NUISANCE_FLAGS = ("omega", "pi", "mu0", "mu1")


# --------------------------------------------------------------------------
# processes

@dataclass(frozen=True, eq=False)
class DiscreteDgp:
    """Covariates take finitely many values ("cells").

    ``cells[c]`` lists the values of every covariate in ``names`` for cell
    ``c``; covariates named in ``hidden`` affect treatment and outcome but are
    left out of generated datasets. Per cell: probability ``prob``, follow-up
    probability ``omega``, treatment probability ``pi`` and potential-outcome
    means ``m0 = E[Y^0|cell]``, ``m1 = E[Y^1|cell]``. ``groups`` optionally
    labels each cell for subgroup analyses.
    """

    names: tuple[str, ...]
    cells: np.ndarray
    prob: np.ndarray
    omega: np.ndarray
    pi: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    hidden: tuple[str, ...] = ()
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        cells = np.atleast_2d(np.asarray(self.cells, dtype=float))
        m = cells.shape[0]
        object.__setattr__(self, "cells", cells)
        for name in ("prob", "omega", "pi", "m0", "m1"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (m,)).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if cells.shape[1] != len(self.names):
            raise ConfigError("cells and names disagree on the number of covariates")
        if np.any(self.prob < 0) or not np.isclose(self.prob.sum(), 1.0):
            raise ConfigError("cell probabilities must be non-negative and sum to 1")
        if np.any(self.omega < MIN_PROB) or np.any(self.omega > 1):
            raise ConfigError(f"follow-up probabilities must lie in [{MIN_PROB}, 1]")
        if np.any(self.pi < MIN_PROB) or np.any(self.pi > 1 - MIN_PROB):
            raise ConfigError(f"treatment probabilities must lie in [{MIN_PROB}, {1 - MIN_PROB}]")
        for name in ("m0", "m1"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ConfigError(f"{name} must lie in [0, 1] for a binary outcome")
        if set(self.hidden) - set(self.names):
            raise ConfigError("hidden covariates must be among the names")
        if self.groups is not None and len(self.groups) != m:
            raise ConfigError("one group label per cell is required")
        obs = self.observed_index
        keys, key_of = np.unique(cells[:, obs], axis=0, return_inverse=True)
        for k in range(len(keys)):
            if np.ptp(self.omega[key_of == k]) > 0:
                raise ConfigError("follow-up may depend on observed covariates only (missing at random)")
            if self.groups is not None and len({self.groups[c] for c in np.flatnonzero(key_of == k)}) > 1:
                raise ConfigError("group labels must be a function of observed covariates")
        object.__setattr__(self, "_keys", keys)
        object.__setattr__(self, "_key_of", key_of.ravel())

    @property
    def observed_index(self) -> list[int]:
        return [j for j, nm in enumerate(self.names) if nm not in self.hidden]

    @property
    def observed_names(self) -> tuple[str, ...]:
        return tuple(self.names[j] for j in self.observed_index)

    def observed_law(self) -> np.ndarray:
        """Joint probabilities ``P(K=k, R=r, A=a, Y=y)`` of the observed
        covariate value ``k`` and ``(r, a, y)``, shape ``(keys, 2, 2, 2)``.
        Rows with ``R=0`` have ``A`` and ``Y`` summed out into ``a=y=0``."""
        law = np.zeros((len(self._keys), 2, 2, 2))
        for c in range(len(self.prob)):
            k = self._key_of[c]
            p, om, pi = self.prob[c], self.omega[c], self.pi[c]
            law[k, 0, 0, 0] += p * (1 - om)
            for a, pa, my in ((1, pi, self.m1[c]), (0, 1 - pi, self.m0[c])):
                law[k, 1, a, 1] += p * om * pa * my
                law[k, 1, a, 0] += p * om * pa * (1 - my)
        return law

    def nuisance_table(self) -> dict[str, np.ndarray]:
        """True nuisances at each observed covariate value, read off the
        observed law by conditioning (no potential outcomes involved)."""
        law = self.observed_law()
        pk = law.sum(axis=(1, 2, 3))
        obs = law[:, 1]  # (k, a, y) with R=1
        p_obs = obs.sum(axis=(1, 2))
        with np.errstate(invalid="ignore", divide="ignore"):
            return {
                "prob": pk,
                "omega": p_obs / pk,
                "pi": obs[:, 1].sum(axis=1) / p_obs,
                "mu0": obs[:, 0, 1] / obs[:, 0].sum(axis=1),
                "mu1": obs[:, 1, 1] / p_obs,
                "mu_y": obs[:, :, 1].sum(axis=1) / p_obs,
            }

    def _draw(self, n, rng):
        idx = rng.choice(len(self.prob), size=n, p=self.prob)
        table = self.nuisance_table()
        key = self._key_of[idx]
        maps = {"omega": self.omega[idx], "pi": self.pi[idx], "m0": self.m0[idx], "m1": self.m1[idx]}
        nuis = {k: table[k][key] for k in ("omega", "pi", "mu0", "mu1", "mu_y")}
        labels = None if self.groups is None else np.array([self.groups[c] for c in idx], dtype=object)
        return self.cells[idx], maps, nuis, labels

    def oracle_att(self) -> float:
        """``E[Y^1 - Y^0 | A=1]`` by enumeration over cells."""
        w = self.prob * self.pi
        return float(np.sum(w * (self.m1 - self.m0)) / np.sum(w))

    def oracle_otr(self) -> float:
        """``E[Y] - E[Y^0]`` by enumeration over cells."""
        return float(np.sum(self.prob * self.pi * (self.m1 - self.m0)))

    def group_att(self) -> dict[str, float]:
        if self.groups is None:
            raise ConfigError("process has no group labels")
        out = {}
        for lab in dict.fromkeys(self.groups):
            sel = np.array([g == lab for g in self.groups])
            w = self.prob[sel] * self.pi[sel]
            out[lab] = float(np.sum(w * (self.m1[sel] - self.m0[sel])) / np.sum(w))
        return out

    def delta_star(self) -> float:
        """Largest ratio, over observed covariate values, between the mean
        untreated outcome of treated and of untreated units (or its inverse)."""
        worst = 1.0
        for k in range(len(self._keys)):
            sel = self._key_of == k
            p, pi, m0 = self.prob[sel], self.pi[sel], self.m0[sel]
            treated = np.sum(p * pi * m0) / np.sum(p * pi)
            control = np.sum(p * (1 - pi) * m0) / np.sum(p * (1 - pi))
            ratio = treated / control
            worst = max(worst, ratio, 1.0 / ratio)
        return float(worst)

    def calibration_ratio(self, subset: Sequence[str]) -> float:
        """``E[mu0(X) | A=1, R=1] / E[nu(V) | A=1, R=1]`` where
        ``nu(V) = E[Y | V, A=0, R=1]`` and V are the ``subset`` covariates."""
        t = self.nuisance_table()
        obs_names = self.observed_names
        cols = [obs_names.index(s) for s in subset]
        treat_w = t["prob"] * t["omega"] * t["pi"]
        ctrl_w = t["prob"] * t["omega"] * (1 - t["pi"])
        _, v_of = np.unique(self._keys[:, cols], axis=0, return_inverse=True)
        v_of = v_of.ravel()
        nu = np.zeros(v_of.max() + 1)
        for v in range(len(nu)):
            sel = v_of == v
            nu[v] = np.sum(ctrl_w[sel] * t["mu0"][sel]) / np.sum(ctrl_w[sel])
        num = np.sum(treat_w * t["mu0"])
        den = np.sum(treat_w * nu[v_of])
        return float(num / den)


@dataclass(frozen=True)
class SmoothDgp:
    """``X ~ Uniform[-1, 1]^2`` with logistic-linear maps.

    ``mu1 = E[AY | X] = expit(pi_lin + shift_lin)``; a non-positive shift keeps
    ``m1 = mu1 / pi`` inside [0, 1]. Each coefficient triple is
    ``(intercept, x1, x2)``.
    """

    omega_coef: tuple[float, float, float] = (1.2, 0.5, -0.4)
    pi_coef: tuple[float, float, float] = (0.2, 0.8, -0.5)
    m0_coef: tuple[float, float, float] = (-0.8, 0.6, 0.4)
    shift_coef: tuple[float, float, float] = (-0.4, 0.2, -0.1)
    names: tuple[str, ...] = ("x1", "x2")
    hidden: tuple[str, ...] = ()
    groups: None = None

    def __post_init__(self):
        s = np.asarray(self.shift_coef)
        if s[0] + abs(s[1]) + abs(s[2]) > 0:
            raise ConfigError("shift must be non-positive on the whole support")

    @property
    def observed_names(self) -> tuple[str, ...]:
        return self.names

    @staticmethod
    def _lin(coef, x):
        return coef[0] + x[:, 0] * coef[1] + x[:, 1] * coef[2]

    def maps(self, x) -> dict[str, np.ndarray]:
        pl = self._lin(self.pi_coef, x)
        pi = expit(pl)
        mu1 = expit(pl + self._lin(self.shift_coef, x))
        m0 = expit(self._lin(self.m0_coef, x))
        return {"omega": expit(self._lin(self.omega_coef, x)), "pi": pi, "m0": m0, "m1": mu1 / pi, "mu1": mu1}

    def _draw(self, n, rng):
        x = rng.uniform(-1.0, 1.0, size=(n, 2))
        f = self.maps(x)
        maps = {k: f[k] for k in ("omega", "pi", "m0", "m1")}
        nuis = {"omega": f["omega"], "pi": f["pi"], "mu0": f["m0"], "mu1": f["mu1"],
                "mu_y": f["mu1"] + (1 - f["pi"]) * f["m0"]}
        return x, maps, nuis, None

    def oracle_att_mc(self, draws: int = 10**6, seed: int = 12345) -> tuple[float, float]:
        """Monte Carlo ``E[pi (m1 - m0)] / E[pi]`` and its standard error."""
        x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(draws, 2))
        f = self.maps(x)
        num = f["pi"] * (f["m1"] - f["m0"])
        den = f["pi"]
        att = num.mean() / den.mean()
        infl = (num - att * den) / den.mean()
        return float(att), float(infl.std(ddof=1) / np.sqrt(draws))

    def oracle_att(self) -> float:
        return self.oracle_att_mc()[0]


def oracle_att(dgp) -> float:
    return dgp.oracle_att()


def identified_att(dgp: DiscreteDgp) -> float:
    """``(E[mu1(X)] - E[pi(X) mu0(X)]) / E[pi(X)]`` from the observed-data law.

    Equals :func:`oracle_att` when no covariate is hidden.
    """
    t = dgp.nuisance_table()
    p = t["prob"]
    return float((np.sum(p * t["mu1"]) - np.sum(p * t["pi"] * t["mu0"])) / np.sum(p * t["pi"]))


def identified_otr(dgp: DiscreteDgp) -> float:
    t = dgp.nuisance_table()
    return float(np.sum(t["prob"] * (t["mu_y"] - t["mu0"])))


def _binary_cells(k: int) -> np.ndarray:
    return np.array([[(c >> (k - 1 - j)) & 1 for j in range(k)] for c in range(2**k)], dtype=float)


def reference_dgp() -> DiscreteDgp:
    """Binary X, P(X=1)=0.5; pi=(0.3, 0.7); E[Y^0|x]=(0.2, 0.4); effect 0.1;
    follow-up 0.8. ATT = 0.1."""
    m0 = np.array([0.2, 0.4])
    return DiscreteDgp(("x",), np.array([[0.0], [1.0]]), np.array([0.5, 0.5]),
                       np.array([0.8, 0.8]), np.array([0.3, 0.7]), m0, m0 + 0.1)


def confounded_dgp() -> DiscreteDgp:
    """Two binary covariates with strong confounding of treatment, outcome
    and follow-up, so dropping the right nuisances leaves a large bias."""
    m0 = np.array([0.1, 0.2, 0.35, 0.6])
    return DiscreteDgp(("x1", "x2"), _binary_cells(2), np.full(4, 0.25),
                       np.array([0.9, 0.75, 0.45, 0.25]), np.array([0.1, 0.3, 0.5, 0.8]),
                       m0, m0 + np.array([0.05, 0.1, 0.15, 0.2]))


def smooth_dgp() -> SmoothDgp:
    return SmoothDgp()


def hidden_confounder_dgp() -> DiscreteDgp:
    """Observed binary ``x`` and a hidden binary ``u`` that raises both the
    treatment probability and the untreated outcome."""
    cells = _binary_cells(2)  # columns x, u
    return DiscreteDgp(("x", "u"), cells, np.full(4, 0.25),
                       np.array([0.8, 0.8, 0.6, 0.6]),
                       np.array([0.2, 0.6, 0.4, 0.6]),
                       np.array([0.2, 0.5, 0.3, 0.4]),
                       np.array([0.35, 0.6, 0.45, 0.5]), hidden=("u",))


def grouped_dgp(effects: Sequence[float] = (0.1, 0.1, 0.1)) -> DiscreteDgp:
    """Equal-sized groups (one-hot columns ``g1..``) crossed with a binary
    ``x``; the effect is constant within a group and given by ``effects``."""
    k = len(effects)
    if k < 2:
        raise ConfigError("need at least two groups")
    names = tuple(f"g{j}" for j in range(1, k)) + ("x",)
    cells, prob, omega, pi, m0, m1, labels = [], [], [], [], [], [], []
    for g in range(k):
        for x in (0.0, 1.0):
            onehot = [1.0 if g == j else 0.0 for j in range(1, k)]
            cells.append(onehot + [x])
            prob.append(0.5 / k)
            omega.append(0.85 - 0.1 * x - 0.05 * (g % 3))
            pi.append(0.25 + 0.3 * x + 0.05 * (g % 3))
            base = 0.2 + 0.2 * x + 0.05 * (g % 3)
            m0.append(base)
            m1.append(base + effects[g])
            labels.append(f"g{g}")
    return DiscreteDgp(names, np.array(cells), np.array(prob), np.array(omega), np.array(pi),
                       np.array(m0), np.array(m1), groups=tuple(labels))


DGPS = {
    "reference": reference_dgp,
    "confounded": confounded_dgp,
    "smooth": smooth_dgp,
    "hidden": hidden_confounder_dgp,
    "grouped": grouped_dgp,
}


def make_dgp(name: str, **kwargs):
    try:
        factory = DGPS[name]
    except KeyError:
        raise ConfigError(f"unknown process {name!r}; choose from {sorted(DGPS)}") from None
    return factory(**kwargs)


# --------------------------------------------------------------------------
# generation

@dataclass(frozen=True, eq=False)
class SimData:
    """A generated dataset plus the audit-only quantities behind it."""

    dataset: CausalDataset
    a_full: np.ndarray  # treatment for every row, including R=0
    y0: np.ndarray
    y1: np.ndarray
    hidden: np.ndarray  # hidden covariate columns
    surface: NuisanceSurface  # true nuisances at the observed covariates


def generate(dgp, n: int, seed: int) -> SimData:
    """Draw ``n`` rows: X, then A ~ Bern(pi), R ~ Bern(omega), Y^0, Y^1 from
    their means, Y = A Y^1 + (1-A) Y^0; A and Y are masked where R=0."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    xfull, maps, nuis, labels = dgp._draw(n, rng)
    u = rng.random((n, 4))
    a = (u[:, 0] < maps["pi"]).astype(float)
    r = (u[:, 1] < maps["omega"]).astype(np.int8)
    y0 = (u[:, 2] < maps["m0"]).astype(float)
    y1 = (u[:, 3] < maps["m1"]).astype(float)
    y = np.where(a == 1, y1, y0)
    obs_idx = [j for j, nm in enumerate(dgp.names) if nm not in dgp.hidden]
    hid_idx = [j for j, nm in enumerate(dgp.names) if nm in dgp.hidden]
    x = xfull[:, obs_idx]
    kinds = [BINARY if np.isin(x[:, j], (0.0, 1.0)).all() else CONTINUOUS for j in range(x.shape[1])]
    schema = CovariateSchema(tuple(Column(dgp.names[j], k) for j, k in zip(obs_idx, kinds)))
    ds = CausalDataset(
        x=x, r=r, a=np.where(r == 1, a, np.nan), y=np.where(r == 1, y, np.nan),
        ids=np.array([str(i) for i in range(1, n + 1)], dtype=object), schema=schema,
        roles=RoleMap(treatment="a", outcome="y", followup="r", group="group" if labels is not None else None),
        group=labels,
    )
    surface = NuisanceSurface(nuis["omega"], nuis["pi"], nuis["mu0"], nuis["mu1"], nuis["mu_y"])
    return SimData(ds, a, y0, y1, xfull[:, hid_idx], surface)


# --------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class MisspecFlags:
    """Nuisances to break on purpose. ``constant-fit`` replaces a broken
    nuisance by its training-fold mean; ``drop-covariates`` hides the
    ``dropped`` covariate columns from its learner."""

    break_omega: bool = False
    break_pi: bool = False
    break_mu0: bool = False
    break_mu1: bool = False
    mechanism: str = "constant-fit"
    dropped: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.mechanism not in ("constant-fit", "drop-covariates"):
            raise ConfigError(f"unknown misspecification mechanism {self.mechanism!r}")

    @classmethod
    def breaking(cls, names: Sequence[str], mechanism: str = "constant-fit", **kw) -> "MisspecFlags":
        unknown = set(names) - set(NUISANCE_FLAGS)
        if unknown:
            raise ConfigError(f"unknown nuisance names {sorted(unknown)}")
        return cls(**{f"break_{nm}": True for nm in names}, mechanism=mechanism, **kw)

    @property
    def broken(self) -> tuple[str, ...]:
        return tuple(nm for nm in NUISANCE_FLAGS if getattr(self, f"break_{nm}"))

    def consistent(self) -> bool:
        """Whether some set among {omega, pi}, {omega, mu0}, {pi, mu0, mu1}
        is left intact."""
        ok = set(NUISANCE_FLAGS) - set(self.broken)
        return any(s <= ok for s in ({"omega", "pi"}, {"omega", "mu0"}, {"pi", "mu0", "mu1"}))

    def fit_options(self, d: int) -> dict:
        if self.mechanism == "constant-fit":
            return {"constant": self.broken}
        keep = [j for j in range(d) if j not in self.dropped]
        if not keep:
            return {"constant": self.broken}
        return {"columns": {nm: keep for nm in self.broken}}


@dataclass(frozen=True)
class ExperimentReport:
    n: int
    reps: int
    truth: float
    bias: float
    rmse: float
    coverage: float
    mean_ci_width: float
    wall_time: float
    failures: int = 0
    estimates: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def mc_se(self) -> float:
        """Monte Carlo standard error of ``bias``."""
        return float(np.std(self.estimates, ddof=1) / np.sqrt(len(self.estimates))) if len(self.estimates) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"n": self.n, "reps": self.reps, "truth": self.truth, "bias": self.bias, "rmse": self.rmse,
                "coverage": self.coverage, "mean_ci_width": self.mean_ci_width, "failures": self.failures,
                "mc_se": self.mc_se, "wall_time": self.wall_time}


def rep_seeds(seed: int, reps: int) -> list[int]:
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> 1) for s in np.random.SeedSequence(seed).spawn(reps)]


def surface_for(data: SimData, spec: LearnerSpec | None, flags: MisspecFlags, seed: int,
                folds: int = 5, eps: float = 0.01, want_mu_y: bool = False) -> NuisanceSurface:
    """True nuisances when ``spec`` is None, else cross-fitted ones with the
    misspecification in ``flags`` applied."""
    if spec is None:
        if flags.broken:
            raise ConfigError("misspecification needs learned nuisances (give a learner)")
        return data.surface
    ds = data.dataset
    return fit_nuisances(ds, spec, assign_folds(ds.n, folds, seed), eps, want_mu_y,
                         **flags.fit_options(ds.x.shape[1]))


def _one_rep(args):
    dgp, n, spec, flags, seed, folds, eps = args
    try:
        data = generate(dgp, n, seed)
        est = estimate_att(influence_values(data.dataset, surface_for(data, spec, flags, seed, folds, eps)), eps)
        return est.psi_att, est.ci_low, est.ci_high
    except DrattError as exc:
        logger.warning("replication with seed %d failed: %s", seed, exc)
        return None


def _map(fn, jobs, n_jobs):
    if n_jobs == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=None if n_jobs < 1 else n_jobs) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // 64)))


def run_experiment(dgp, n: int, reps: int, spec: LearnerSpec | None = None,
                   flags: MisspecFlags | None = None, seed: int = 0, *, folds: int = 5,
                   eps: float = 0.01, n_jobs: int = 1, truth: float | None = None) -> ExperimentReport:
    """``reps`` independent generate / cross-fit / estimate runs.

    ``spec=None`` plugs in the true nuisances. Failed replications are logged
    and counted; more than 10% failures is an error.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    flags = flags or MisspecFlags()
    if spec is None and flags.broken:
        raise ConfigError("misspecification needs learned nuisances (give a learner)")
    truth = dgp.oracle_att() if truth is None else truth
    start = time.perf_counter()
    jobs = [(dgp, n, spec, flags, s, folds, eps) for s in rep_seeds(seed, reps)]
    results = _map(_one_rep, jobs, n_jobs)
    ok = [r for r in results if r is not None]
    failures = reps - len(ok)
    if failures > 0.1 * reps:
        raise NumericError(f"{failures} of {reps} replications failed")
    est = np.array([r[0] for r in ok])
    lo = np.array([r[1] for r in ok])
    hi = np.array([r[2] for r in ok])
    err = est - truth
    return ExperimentReport(
        n=n, reps=reps, truth=float(truth), bias=float(err.mean()), rmse=float(np.sqrt(np.mean(err**2))),
        coverage=float(np.mean((lo <= truth) & (truth <= hi))), mean_ci_width=float(np.mean(hi - lo)),
        wall_time=time.perf_counter() - start, failures=failures, estimates=est,
    )


@dataclass(frozen=True)
class ConvergenceTable:
    n_grid: tuple[int, ...]
    rmse: tuple[float, ...]
    slope: float
    reports: tuple[ExperimentReport, ...] = field(default=(), repr=False)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "rmse"])
            for n, e in zip(self.n_grid, self.rmse):
                w.writerow([n, repr(e)])
            w.writerow(["slope", repr(self.slope)])

    def to_dict(self) -> dict:
        return {"n": list(self.n_grid), "rmse": list(self.rmse), "slope": self.slope}


def loglog_slope(n_grid: Sequence[int], rmse: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(n_grid, float)), np.log(np.asarray(rmse, float)), 1)[0])


def convergence_study(dgp, n_grid: Sequence[int], reps: int, spec: LearnerSpec | None = None,
                      seed: int = 0, flags: MisspecFlags | None = None, **kw) -> ConvergenceTable:
    """RMSE at each sample size and the least-squares slope of log RMSE on log n."""
    n_grid = [int(v) for v in n_grid]
    if len(n_grid) < 2 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigError("n_grid must be increasing with at least two sizes")
    truth = kw.pop("truth", None)
    truth = dgp.oracle_att() if truth is None else truth
    reports = [run_experiment(dgp, n, reps, spec, flags, seed + 7919 * k, truth=truth, **kw)
               for k, n in enumerate(n_grid)]
    rmse = [r.rmse for r in reports]
    return ConvergenceTable(tuple(n_grid), tuple(rmse), loglog_slope(n_grid, rmse), tuple(reports))


def _one_homogeneity_rep(args):
    dgp, n, spec, seed, folds, eps, min_size = args
    try:
        data = generate(dgp, n, seed)
        ds = data.dataset
        surface = surface_for(data, spec, MisspecFlags(), seed, folds, eps)
        part = partition_by_labels(ds.group, order=tuple(dict.fromkeys(dgp.groups)))
        test = homogeneity_test(subgroup_estimates(ds, surface, part, min_size, eps))
        return test.t_n, test.p_value
    except DrattError as exc:
        logger.warning("replication with seed %d failed: %s", seed, exc)
        return None


@dataclass(frozen=True)
class RejectionReport:
    n: int
    reps: int
    level: float
    rejection_rate: float
    failures: int
    p_values: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"n": self.n, "reps": self.reps, "level": self.level,
                "rejection_rate": self.rejection_rate, "failures": self.failures}


def homogeneity_experiment(dgp: DiscreteDgp, n: int, reps: int, spec: LearnerSpec | None = None,
                           seed: int = 0, *, level: float = 0.05, folds: int = 5, eps: float = 0.01,
                           min_size: int = 30, n_jobs: int = 1) -> RejectionReport:
    """Share of replications in which the homogeneity test rejects at ``level``."""
    if dgp.groups is None:
        raise ConfigError("process has no group labels")
    jobs = [(dgp, n, spec, s, folds, eps, min_size) for s in rep_seeds(seed, reps)]
    results = _map(_one_homogeneity_rep, jobs, n_jobs)
    ok = [r for r in results if r is not None]
    failures = reps - len(ok)
    if failures > 0.1 * reps:
        raise NumericError(f"{failures} of {reps} replications failed")
    p = np.array([r[1] for r in ok])
    return RejectionReport(n, reps, level, float(np.mean(p < level)), failures, p)
