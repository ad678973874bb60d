"""K-fold cross-fitting of the nuisance regressions.

Every prediction for a row in fold ``k`` comes from a model trained only on
rows outside fold ``k``.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_model import BINARY, CausalDataset
from .errors import ConfigError, DataError
from .learners import PROBABILITY, REAL, ConstantModel, LearnerSpec, fit_learner

logger = logging.getLogger(__name__)

NUISANCES = ("omega", "pi", "mu0", "mu1", "mu_y")
_NUISANCE_ID = {name: k for k, name in enumerate(NUISANCES)}


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    n_folds: int
    fold_of: np.ndarray
    seed: int

    @property
    def sizes(self) -> list[int]:
        return np.bincount(self.fold_of, minlength=self.n_folds).tolist()


def assign_folds(n: int, n_folds: int = 10, seed: int = 0) -> FoldAssignment:
    """Seeded permutation of ``range(n)`` cut into ``n_folds`` contiguous blocks."""
    if n_folds < 2:
        raise ConfigError("need at least 2 folds")
    if n_folds > n:
        raise ConfigError(f"cannot make {n_folds} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    for k, block in enumerate(np.array_split(perm, n_folds)):
        fold_of[block] = k
    fold_of.setflags(write=False)
    return FoldAssignment(n_folds, fold_of, seed)


@dataclass(frozen=True, eq=False)
class NuisanceSurface:
    """Out-of-fold nuisance estimates, one entry per observation.

    ``omega`` = P(R=1|X), ``pi`` = E[A|X,R=1], ``mu0`` = E[Y|X,R=1,A=0],
    ``mu1`` = E[AY|X,R=1] and optionally ``mu_y`` = E[Y|X,R=1].
    """

    omega: np.ndarray
    pi: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    mu_y: np.ndarray | None = None
    folds: FoldAssignment | None = None
    eps: float = 0.01
    clip_counts: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.omega)
        for name in NUISANCES:
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=float)
            if v.shape != (n,):
                raise DataError(f"nuisance {name} has shape {v.shape}, expected ({n},)")
            if not np.isfinite(v).all():
                raise DataError(f"nuisance {name} has non-finite entries")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return len(self.omega)

    def subset(self, rows) -> "NuisanceSurface":
        rows = np.asarray(rows)
        return NuisanceSurface(
            self.omega[rows], self.pi[rows], self.mu0[rows], self.mu1[rows],
            None if self.mu_y is None else self.mu_y[rows], None, self.eps, dict(self.clip_counts),
        )

    def to_csv(self, path, ids: Sequence | None = None) -> None:
        cols = ["omega", "pi", "mu0", "mu1"] + (["mu_y"] if self.mu_y is not None else [])
        ids = list(range(1, self.n + 1)) if ids is None else list(ids)
        fold = self.folds.fold_of if self.folds is not None else np.full(self.n, -1)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "fold"] + cols)
            for i in range(self.n):
                w.writerow([ids[i], int(fold[i])] + [repr(float(getattr(self, c)[i])) for c in cols])


def _model_seed(seed: int, fold: int, name: str) -> int:
    ss = np.random.SeedSequence([seed, fold, _NUISANCE_ID[name]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _training_rows(dataset: CausalDataset, name: str, outside: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    obs = dataset.r == 1
    a = np.where(obs, dataset.a, 0.0)
    y = np.where(obs, dataset.y, 0.0)
    if name == "omega":
        rows = outside
        target = dataset.r.astype(float)
    elif name == "pi":
        rows, target = outside & obs, a
    elif name == "mu0":
        rows, target = outside & obs & (a == 0), y
    elif name == "mu1":
        rows, target = outside & obs, a * y
    else:
        rows, target = outside & obs, y
    return rows, target


_SUBSET_LABEL = {
    "omega": "all rows", "pi": "rows with R=1", "mu0": "rows with R=1, A=0",
    "mu1": "rows with R=1", "mu_y": "rows with R=1",
}


def crossfit_predict(
    dataset: CausalDataset,
    spec: LearnerSpec,
    folds: FoldAssignment,
    x: np.ndarray,
    target: np.ndarray,
    train: np.ndarray,
    *,
    target_kind: str = PROBABILITY,
    tag: int = 0,
) -> np.ndarray:
    """Out-of-fold predictions of ``target`` from ``x`` for every row, each
    model trained on the ``train`` rows outside the predicted fold."""
    out = np.full(dataset.n, np.nan)
    for k in range(folds.n_folds):
        inside = folds.fold_of == k
        rows = train & ~inside
        if not rows.any():
            raise DataError(f"fold {k}: no training rows; use fewer folds")
        seed = int(np.random.SeedSequence([folds.seed, k, 100 + tag]).generate_state(1, dtype=np.uint64)[0] >> 1)
        model = fit_learner(x[rows], target[rows], spec, seed=seed, target_kind=target_kind)
        out[inside] = model.predict(x[inside])
    return out


def fit_nuisances(
    dataset: CausalDataset,
    spec: LearnerSpec,
    folds: FoldAssignment,
    eps: float = 0.01,
    want_mu_y: bool = False,
    *,
    columns: Mapping[str, Sequence[int]] | None = None,
    constant: Sequence[str] = (),
    n_jobs: int = 1,
) -> NuisanceSurface:
    """Cross-fit omega, pi, mu0, mu1 (and mu_y when ``want_mu_y``).

    ``columns`` restricts the covariates a given nuisance may see and
    ``constant`` replaces the named nuisances by their training-fold mean; the
    simulation harness uses both to misspecify models on purpose.
    """
    if not 0 < eps < 0.5:
        raise ConfigError(f"clip bound must lie in (0, 0.5), got {eps}")
    if len(folds.fold_of) != dataset.n:
        raise ConfigError("fold assignment does not match the dataset")
    if np.isnan(dataset.x).any():
        raise DataError("covariates contain missing values; impute before cross-fitting")
    names = ["omega", "pi", "mu0", "mu1"] + (["mu_y"] if want_mu_y else [])
    columns = dict(columns or {})
    unknown = (set(columns) | set(constant)) - set(NUISANCES)
    if unknown:
        raise ConfigError(f"unknown nuisance names {sorted(unknown)}")
    binary_y = dataset.outcome_kind == BINARY
    kind_of = {
        "omega": PROBABILITY, "pi": PROBABILITY,
        "mu0": PROBABILITY if binary_y else REAL,
        "mu1": PROBABILITY if binary_y else REAL,
        "mu_y": PROBABILITY if binary_y else REAL,
    }

    jobs = []
    for k in range(folds.n_folds):
        inside = folds.fold_of == k
        for name in names:
            rows, target = _training_rows(dataset, name, ~inside)
            if not rows.any():
                raise DataError(
                    f"fold {k}: no training {_SUBSET_LABEL[name]} for nuisance {name}; use fewer folds")
            jobs.append((k, name, inside, rows, target))

    def run(job):
        k, name, inside, rows, target = job
        cols = columns.get(name)
        x = dataset.x if cols is None else dataset.x[:, list(cols)]
        if name in constant:
            model = ConstantModel(float(target[rows].mean()), kind_of[name])
        else:
            model = fit_learner(x[rows], target[rows], spec, seed=_model_seed(folds.seed, k, name),
                                target_kind=kind_of[name])
        return k, name, inside, model.predict(x[inside])

    if n_jobs == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs if n_jobs > 0 else None) as pool:
            results = list(pool.map(run, jobs))

    out = {name: np.full(dataset.n, np.nan) for name in names}
    for k, name, inside, pred in results:
        out[name][inside] = pred

    clip_counts = {}
    for name in ("omega", "pi"):
        clipped = np.clip(out[name], eps, 1 - eps)
        clip_counts[name] = int(np.count_nonzero(clipped != out[name]))
        out[name] = clipped
    if binary_y:
        for name in ("mu0", "mu1", "mu_y"):
            if name in out:
                out[name] = np.clip(out[name], 0.0, 1.0)
    if any(clip_counts.values()):
        logger.info("clipped propensities at eps=%g: %s", eps, clip_counts)
    return NuisanceSurface(out["omega"], out["pi"], out["mu0"], out["mu1"], out.get("mu_y"),
                           folds, eps, clip_counts)
