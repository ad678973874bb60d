"""Doubly robust, cross-fitted estimation of the average treatment effect on
the treated when treatment and outcome are lost to attrition."""

__version__ = "0.1.0"

from .crossfit import NuisanceSurface, assign_folds, fit_nuisances  # noqa: E402
from .data_model import (CausalDataset, CovariateSchema, RoleMap, encode, impute_covariates,  # noqa: E402
                         load_csv, partition_by_age, partition_by_labels)
from .errors import ConfigError, DataError, DrattError, NumericError, ParseError  # noqa: E402
from .estimators import (estimate_att, estimate_otr, homogeneity_test, influence_values,  # noqa: E402
                         overlap_diagnostic, subgroup_estimates)
from .learners import LearnerSpec, parse_learners  # noqa: E402
from .sensitivity import calibrate_delta, otr_additive_bounds, ratio_bounds, sensitivity_curve  # noqa: E402
from .special import chi2_sf  # noqa: E402
