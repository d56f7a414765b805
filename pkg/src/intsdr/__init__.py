"""Dimension reduction for treatment-by-covariate interactions.

Linear and semiparametric estimators of the covariate directions that
modify a treatment effect, plus treatment-rule evaluation and simulation
tools.
"""

from .data import (
    ColumnSchema,
    Dataset,
    PreprocessReport,
    inverse_preprocess,
    load_csv,
    make_dataset,
    preprocess,
)
from .exceptions import (
    ClampWarning,
    ConvergenceWarning,
    DataValidationError,
    NoInteractionSignalError,
    NumericalError,
    ParseError,
    SchemaError,
)
from .itr import TreatmentRule, ValueReport, ipwe_value, rule_from_fit, split_evaluate
from .linear import LinearGEM, fit_linear_gem
from .simml import SIMML, FitConfig, fit_simml
from .simsl import SIMSL, fit_simsl
from .simulate import GeneratorSpec, generate, run_experiment, subspace_distance
from .stiefel import MultiIndex, model_aic, select_dimension, stiefel_optimize

__version__ = "0.1.0"

__all__ = [
    "ClampWarning", "ColumnSchema", "ConvergenceWarning", "DataValidationError", "Dataset",
    "FitConfig", "GeneratorSpec", "LinearGEM", "MultiIndex", "NoInteractionSignalError",
    "NumericalError", "ParseError", "PreprocessReport", "SIMML", "SIMSL", "SchemaError",
    "TreatmentRule", "ValueReport", "fit_linear_gem", "fit_simml", "fit_simsl", "generate",
    "inverse_preprocess", "ipwe_value", "load_csv", "make_dataset", "model_aic", "preprocess",
    "rule_from_fit", "run_experiment", "select_dimension", "split_evaluate", "stiefel_optimize",
    "subspace_distance",
]
