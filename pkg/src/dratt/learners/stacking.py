"""Super learner: convex combination of base learners chosen by V-fold
cross-validated squared error."""
from __future__ import annotations

import logging
import warnings

import numpy as np

from ..errors import DataError
from .base import FittedModel


logger = logging.getLogger(__name__)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    w = np.maximum(v - css[rho] / (rho + 1), 0.0)
    return w / w.sum()


def simplex_least_squares(z: np.ndarray, t: np.ndarray, *, max_iter: int = 20000, tol: float = 1e-14) -> np.ndarray:
    """Minimize ``mean((t - z @ w)^2)`` over the probability simplex.

    Accelerated projected gradient with a fixed 1/L step. The result is never
    worse than the best single column (vertex), so the stacked error cannot
    exceed the best base learner's.
    """
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    n, m = z.shape
    if m == 1:
        return np.ones(1)
    gram = z.T @ z / n
    zt = z.T @ t / n

    def loss(w):
        r = t - z @ w
        return float(r @ r) / n

    lip = 2.0 * np.linalg.eigvalsh(gram)[-1]
    if lip <= 0:
        return np.full(m, 1.0 / m)
    w = np.full(m, 1.0 / m)
    v, step_k = w.copy(), 1.0
    for _ in range(max_iter):
        grad = 2.0 * (gram @ v - zt)
        w_new = project_simplex(v - grad / lip)
        step_next = 0.5 * (1 + np.sqrt(1 + 4 * step_k * step_k))
        v = w_new + ((step_k - 1) / step_next) * (w_new - w)
        done = np.max(np.abs(w_new - w)) < tol
        w, step_k = w_new, step_next
        if done:
            break
    vertex_losses = [loss(np.eye(m)[j]) for j in range(m)]
    j = int(np.argmin(vertex_losses))
    if vertex_losses[j] < loss(w):
        w = np.eye(m)[j]
    return w


class StackedModel(FittedModel):
    def __init__(self, models: list[FittedModel], weights: np.ndarray, names: list[str],
                 cv_risk: np.ndarray, stacked_cv_risk: float, target_kind: str):
        self.models = models
        self.weights = np.asarray(weights, dtype=float)
        self.names = names
        self.cv_risk = cv_risk  # per-base cross-validated mean squared error
        self.stacked_cv_risk = stacked_cv_risk
        self.target_kind = target_kind

    def predict(self, x):
        out = np.zeros(np.asarray(x).shape[0])
        for w, m in zip(self.weights, self.models):
            if w > 0:
                out += w * m.predict(x)
        return out


def fit_super_learner(x, t, spec, *, seed: int = 0, target_kind: str = "probability", fit_base=None) -> StackedModel:
    """Cross-validated stacking of ``spec.bases``.

    ``fit_base(x, t, base_spec, seed)`` fits one base learner. A base that
    raises is dropped with a warning; if all fail the error propagates.
    """
    if fit_base is None:
        from . import fit_learner as fit_base
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    v = spec.folds
    if n < 2 * v:
        raise DataError(f"super learner needs at least {2 * v} rows, got {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    for k, block in enumerate(np.array_split(rng.permutation(n), v)):
        fold_of[block] = k

    bases = list(spec.bases)
    names = [f"{b.kind}#{j}" for j, b in enumerate(bases)]
    base_seeds = rng.integers(2**63, size=(len(bases), v + 1))
    cv = np.full((n, len(bases)), np.nan)
    alive = []
    for j, base in enumerate(bases):
        try:
            for k in range(v):
                tr, te = fold_of != k, fold_of == k
                model = fit_base(x[tr], t[tr], base, seed=int(base_seeds[j, k]), target_kind=target_kind)
                cv[te, j] = model.predict(x[te])
        except Exception as exc:  # noqa: BLE001 - any base failure drops that base
            warnings.warn(f"super learner: base {names[j]} failed ({exc}); dropped", RuntimeWarning, stacklevel=2)
            continue
        alive.append(j)
    if not alive:
        raise DataError("super learner: every base learner failed")

    z = cv[:, alive]
    risk = np.mean((t[:, None] - z) ** 2, axis=0)
    w_alive = simplex_least_squares(z, t)
    weights = np.zeros(len(bases))
    weights[alive] = w_alive
    models = [None] * len(bases)
    for j in alive:
        if weights[j] > 0:
            models[j] = fit_base(x, t, bases[j], seed=int(base_seeds[j, v]), target_kind=target_kind)
    all_risk = np.full(len(bases), np.nan)
    all_risk[alive] = risk
    stacked_risk = float(np.mean((t - z @ w_alive) ** 2))
    out = StackedModel(models, weights, names, all_risk, stacked_risk, target_kind)
    logger.debug("super learner weights %s (cv risk %s)", dict(zip(names, weights)), all_risk)
    return out
