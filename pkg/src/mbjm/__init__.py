"""Multi-layer backward joint models for dynamic risk prediction."""

from .data import (BiomarkerSpec, DataError, IntegrationSettings, LongitudinalDataset,
                   ModelConfig, ParseError, Transform, load_csv_long, validate_dataset)
from .engine import (FittedMbjm, PredictionError, RiskQuery, dynamic_risk, fit_mbjm,
                     query_for_subject, risk_trajectory)
from .survival import ConvergenceError, FitError, WeibullModel, fit_weibull

__version__ = "0.1.0"

__all__ = [
    "BiomarkerSpec", "ConvergenceError", "DataError", "FitError", "FittedMbjm",
    "IntegrationSettings", "LongitudinalDataset", "ModelConfig", "ParseError",
    "PredictionError", "RiskQuery", "Transform", "WeibullModel", "dynamic_risk",
    "fit_mbjm", "fit_weibull", "load_csv_long", "query_for_subject", "risk_trajectory",
    "validate_dataset",
]
