"""Ridge-penalized logistic regression fitted by iteratively reweighted least
squares, plus the ridge linear fit used for real-valued targets."""
from __future__ import annotations

import logging
import warnings

import numpy as np

from ..errors import DataError
from .base import PROBABILITY, REAL, ConstantModel, FittedModel, design

logger = logging.getLogger(__name__)

MAX_ITER = 100
TOL = 1e-8
MAX_HALVINGS = 30


def expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


class LogisticModel(FittedModel):
    target_kind = PROBABILITY

    def __init__(self, coef: np.ndarray, interactions: int = 1, n_iter: int = 0, converged: bool = True,
                 trace: tuple[float, ...] = ()):
        self.coef = np.asarray(coef, dtype=float)
        self.interactions = interactions
        self.n_iter = n_iter
        self.converged = converged
        self.trace = trace  # penalized log-likelihood after each iteration

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    def decision_function(self, x):
        return self.coef[0] + design(x, self.interactions) @ self.coef[1:]

    def predict(self, x):
        return expit(self.decision_function(x))


class LinearModel(FittedModel):
    target_kind = REAL

    def __init__(self, coef: np.ndarray, interactions: int = 1):
        self.coef = np.asarray(coef, dtype=float)
        self.interactions = interactions

    def predict(self, x):
        return self.coef[0] + design(x, self.interactions) @ self.coef[1:]


def penalized_loglik(coef, x1, t, lam):
    """Mean Bernoulli log-likelihood minus ``lam/2 * ||coef[1:]||^2``."""
    eta = x1 @ coef
    ll = np.mean(t * eta - np.logaddexp(0.0, eta))
    return ll - 0.5 * lam * float(coef[1:] @ coef[1:])


def _solve_damped(h, g, what):
    """Solve ``h @ s = g`` by Cholesky, adding diagonal damping from 1e-6
    upwards (x10 per failure) when ``h`` is not numerically positive definite."""
    extra = 0.0
    eye = np.eye(h.shape[0])
    while True:
        try:
            c = np.linalg.cholesky(h + extra * eye)
        except np.linalg.LinAlgError:
            extra = 1e-6 if extra == 0 else extra * 10
            if extra > 1e6:
                raise DataError(f"{what}: normal equations are singular") from None
            continue
        if extra:
            warnings.warn(f"{what}: singular normal equations, damped by {extra:g}", RuntimeWarning, stacklevel=3)
        return np.linalg.solve(c.T, np.linalg.solve(c, g))


def fit_logistic(x, t, lam: float = 1e-4, *, interactions: int = 1, fractional: bool = False,
                 max_iter: int = MAX_ITER, tol: float = TOL) -> FittedModel:
    """Fit ``P(t=1|x) = expit(b0 + x @ b)`` maximizing the mean log-likelihood
    minus ``lam/2 * ||b||^2`` (intercept unpenalized).

    Newton/IRLS steps are halved (at most 30 times) whenever the penalized
    likelihood would decrease; iteration stops once the largest coefficient
    change is below ``tol`` or after ``max_iter`` steps. ``fractional=True``
    accepts targets anywhere in [0, 1] (quasi-binomial fit).
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.ndim != 2 or x.shape[0] != t.shape[0] or t.shape[0] < 1:
        raise DataError("fit_logistic: x must be n x d with n = len(t) >= 1")
    if not np.isfinite(x).all():
        raise DataError("fit_logistic: covariates must be finite")
    if fractional:
        if np.any((t < 0) | (t > 1)) or not np.isfinite(t).all():
            raise DataError("fit_logistic: fractional targets must lie in [0, 1]")
    elif not np.isin(t, (0.0, 1.0)).all():
        raise DataError("fit_logistic: targets must be binary 0/1")
    if np.all(t == t[0]):
        return ConstantModel(t[0])

    x1 = np.hstack([np.ones((x.shape[0], 1)), design(x, interactions)])
    n, p = x1.shape
    pen = np.full(p, lam)
    pen[0] = 0.0
    coef = np.zeros(p)
    tbar = float(t.mean())
    coef[0] = np.log(tbar / (1 - tbar))
    obj = penalized_loglik(coef, x1, t, lam)
    converged = False
    trace = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(x1 @ coef)
        w = mu * (1 - mu)
        grad = x1.T @ (t - mu) / n - pen * coef
        hess = (x1.T * w) @ x1 / n + np.diag(pen)
        step = _solve_damped(hess, grad, "fit_logistic")
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = coef + scale * step
            cand_obj = penalized_loglik(cand, x1, t, lam)
            if cand_obj >= obj - 1e-15 * abs(obj):
                break
            scale *= 0.5
        else:
            converged = True  # no ascent direction left at working precision
            break
        change = np.max(np.abs(cand - coef))
        coef, obj = cand, cand_obj
        trace.append(obj)
        if change < tol:
            converged = True
            break
    if not converged:
        logger.debug("fit_logistic: stopped after %d iterations without reaching tol", it)
    return LogisticModel(coef, interactions, it, converged, tuple(trace))


def fit_ridge(x, t, lam: float = 1e-4, *, interactions: int = 1) -> FittedModel:
    """Least squares with ridge penalty ``lam`` on the mean squared error scale."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.shape[0] != t.shape[0] or t.shape[0] < 1:
        raise DataError("fit_ridge: x and t are misaligned")
    x1 = np.hstack([np.ones((x.shape[0], 1)), design(x, interactions)])
    n, p = x1.shape
    pen = np.full(p, lam)
    pen[0] = 0.0
    coef = _solve_damped(x1.T @ x1 / n + np.diag(pen), x1.T @ t / n, "fit_ridge")
    return LinearModel(coef, interactions)
