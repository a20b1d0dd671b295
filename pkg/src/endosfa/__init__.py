"""Stochastic frontier estimation with endogenous inputs and environmental variables."""
from .data import Dataset, Observation
from .errors import (ConfigError, ContractError, DataError, DegenerateCurvatureError,
                     DimensionError, EmptyDataError, EstimationError, InfeasibleParameterError,
                     SFAError, SingularDesignError, UnreliableInferenceError)
from .params import ParamVector

__version__ = "0.1.0"
