from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import ConfigError

PROBABILITY = "probability"
REAL = "real"

KINDS = ("logistic", "random_forest", "super_learner", "constant")
_ALIASES = {"forest": "random_forest", "rf": "random_forest", "sl": "super_learner",
            "stack": "super_learner", "mean": "constant"}


@dataclass(frozen=True)
class LearnerSpec:
    """Learner choice plus hyperparameters.

    ``lam`` is the ridge penalty for logistic/linear fits and ``interactions``
    the highest degree of column products added to their design. Forest
    settings follow the usual names; ``max_features=None`` means
    ``round(sqrt(d))``. ``folds`` is the stacking fold count.
    """

    kind: str = "logistic"
    lam: float = 1e-4
    interactions: int = 1
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 5
    max_features: int | None = None
    bootstrap: bool = True
    folds: int = 5
    bases: tuple["LearnerSpec", ...] = field(default=())

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "bases", tuple(self.bases))
        if kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("ridge penalty must be >= 0")
        if self.interactions < 1:
            raise ConfigError("interactions must be >= 1")
        if self.n_trees < 1:
            raise ConfigError("forest needs at least one tree")
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ConfigError("max_depth must be >= 0 and min_leaf >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ConfigError("max_features must be >= 1")
        if kind == "super_learner":
            if self.folds < 2:
                raise ConfigError("stacking needs at least 2 folds")
            if not self.bases:
                raise ConfigError("super learner needs at least one base learner")

    def with_params(self, **params) -> "LearnerSpec":
        return replace(self, **params)

    def to_dict(self) -> dict:
        if self.kind == "super_learner":
            return {"kind": self.kind, "folds": self.folds, "bases": [b.to_dict() for b in self.bases]}
        keys = {
            "logistic": ("lam", "interactions"),
            "random_forest": ("n_trees", "max_depth", "min_leaf", "max_features", "bootstrap"),
            "constant": (),
        }[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keys}}


SPEC_FIELDS = {f.name for f in fields(LearnerSpec)} - {"kind", "bases"}


class FittedModel:
    """Fitted nuisance regression. ``predict`` is deterministic."""

    target_kind: str = PROBABILITY

    def predict(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class ConstantModel(FittedModel):
    def __init__(self, value: float, target_kind: str = PROBABILITY):
        self.value = float(value)
        self.target_kind = target_kind

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)

    def __repr__(self):
        return f"ConstantModel({self.value:.6g})"


def predict_clipped(model: FittedModel, x: np.ndarray, eps: float = 0.01) -> tuple[np.ndarray, int]:
    """Predictions clamped into ``[eps, 1 - eps]`` and the number of rows moved."""
    if not 0 < eps < 0.5:
        raise ConfigError(f"clip bound must lie in (0, 0.5), got {eps}")
    if model.target_kind != PROBABILITY:
        raise ConfigError("predict_clipped needs a probability-target model")
    raw = model.predict(x)
    out = np.clip(raw, eps, 1 - eps)
    return out, int(np.count_nonzero(out != raw))


def design(x: np.ndarray, degree: int) -> np.ndarray:
    """Columns of ``x`` plus products of distinct columns up to ``degree``."""
    x = np.asarray(x, dtype=float)
    if degree <= 1 or x.shape[1] < 2:
        return x
    from itertools import combinations

    cols = [x]
    d = x.shape[1]
    for k in range(2, min(degree, d) + 1):
        for combo in combinations(range(d), k):
            cols.append(np.prod(x[:, combo], axis=1, keepdims=True))
    return np.hstack(cols)
