"""Exception hierarchy shared by all modules."""


class SFAError(Exception):
    """Base class; ``code`` is the machine-readable tag the CLI prints."""

    code = "error"


class DimensionError(SFAError, ValueError):
    code = "dimension"


class InfeasibleParameterError(SFAError, ValueError):
    code = "infeasible-parameter"


class ContractError(SFAError, ValueError):
    code = "contract"


class SingularDesignError(SFAError, ValueError):
    code = "singular-design"


class DataError(SFAError, ValueError):
    code = "data"


class EmptyDataError(DataError):
    code = "empty-data"


class ConfigError(SFAError, ValueError):
    code = "config"


class EstimationError(SFAError, RuntimeError):
    code = "estimation"


class DegenerateCurvatureError(SFAError, RuntimeError):
    """Hessian is singular or not negative definite.

    ``eigenvalues`` holds the spectrum of the negative Hessian.
    """

    code = "degenerate-curvature"

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class UnreliableInferenceError(SFAError, RuntimeError):
    """Too many resampling refits failed; ``partial`` carries what was computed."""

    code = "unreliable-inference"

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
