"""Linear mixed models for demographic group recommendation."""

from lmmrec.design import DesignMatrices, ObservationTable, build_design, detect_aliasing
from lmmrec.errors import (
    ConvergenceError,
    DataError,
    DesignError,
    FormulaError,
    LmmError,
    NumericalError,
    StatsError,
)
from lmmrec.formula import ModelFormula, format_formula, parse_formula
from lmmrec.reml import (
    FitOptions,
    FitResult,
    VarianceComponents,
    assemble_mme,
    estimate_covariance,
    fit_reml,
    predict,
    reml_loglik,
    solve_mme,
)

__all__ = [
    "ConvergenceError",
    "DataError",
    "DesignError",
    "DesignMatrices",
    "FitOptions",
    "FitResult",
    "FormulaError",
    "LmmError",
    "ModelFormula",
    "NumericalError",
    "ObservationTable",
    "StatsError",
    "VarianceComponents",
    "assemble_mme",
    "build_design",
    "detect_aliasing",
    "estimate_covariance",
    "fit_reml",
    "format_formula",
    "parse_formula",
    "predict",
    "reml_loglik",
    "solve_mme",
]

__version__ = "0.1.0"
