"""Nuisance learners written against numpy only."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .base import (PROBABILITY, REAL, SPEC_FIELDS, ConstantModel, FittedModel, LearnerSpec,
                   design, predict_clipped)
from .forest import ForestModel, Tree, fit_random_forest, fit_tree
from .logistic import LinearModel, LogisticModel, fit_logistic, fit_ridge
from .stacking import StackedModel, fit_super_learner, project_simplex, simplex_least_squares

__all__ = [
    "PROBABILITY", "REAL", "ConstantModel", "FittedModel", "LearnerSpec", "design", "predict_clipped",
    "ForestModel", "Tree", "fit_random_forest", "fit_tree", "LinearModel", "LogisticModel",
    "fit_logistic", "fit_ridge", "StackedModel", "fit_super_learner", "project_simplex",
    "simplex_least_squares", "fit_learner", "parse_learners",
]


def fit_learner(x, t, spec: LearnerSpec, *, seed: int = 0, target_kind: str = PROBABILITY) -> FittedModel:
    """Fit ``spec`` on ``(x, t)``.

    Probability targets must be 0/1. For real targets the logistic kind
    becomes a ridge linear regression.
    """
    t = np.asarray(t, dtype=float)
    if spec.kind == "constant":
        return ConstantModel(float(t.mean()) if t.size else np.nan, target_kind)
    if spec.kind == "logistic":
        if target_kind == PROBABILITY:
            return fit_logistic(x, t, spec.lam, interactions=spec.interactions)
        return fit_ridge(x, t, spec.lam, interactions=spec.interactions)
    if spec.kind == "random_forest":
        model = fit_random_forest(x, t, n_trees=spec.n_trees, max_depth=spec.max_depth,
                                  min_leaf=spec.min_leaf, max_features=spec.max_features,
                                  bootstrap=spec.bootstrap, seed=seed)
        model.target_kind = target_kind
        return model
    return fit_super_learner(x, t, spec, seed=seed, target_kind=target_kind)


def _coerce(key, value):
    if key == "bootstrap":
        return str(value).lower() in ("1", "true", "yes")
    if key == "lam":
        return float(value)
    if key == "max_features" and str(value).lower() in ("none", "sqrt"):
        return None
    return int(value)


def parse_learners(names: str, params: list[str] | tuple[str, ...] = ()) -> LearnerSpec:
    """Build a spec from ``"logistic,forest"`` and ``["forest.n_trees=100", ...]``.

    A single name gives that learner; several give a super learner over them.
    Parameters prefixed ``stack.`` configure the super learner itself.
    """
    kinds = [k.strip() for k in names.split(",") if k.strip()]
    if not kinds:
        raise ConfigError("no learners given")
    per_kind: dict[str, dict] = {}
    for item in params:
        key, eq, value = item.partition("=")
        target, dot, name = key.strip().rpartition(".")
        if not eq or not dot or name not in SPEC_FIELDS:
            raise ConfigError(f"bad learner parameter {item!r} (expected kind.key=value)")
        try:
            per_kind.setdefault(target, {})[name] = _coerce(name, value.strip())
        except ValueError:
            raise ConfigError(f"bad value in learner parameter {item!r}") from None
    bases = []
    for k in kinds:
        spec = LearnerSpec(kind=k)
        opts = {**per_kind.get(k, {}), **per_kind.get(spec.kind, {})}
        bases.append(spec.with_params(**opts) if opts else spec)
    if len(bases) == 1:
        return bases[0]
    return LearnerSpec(kind="super_learner", bases=tuple(bases), **per_kind.get("stack", {}))
