"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Inconsistent grid, basis or experiment settings."""


class SolverError(RuntimeError):
    """A linear solve failed to reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularMatrixError(SolverError):
    pass


class CompatibilityError(ValueError):
    """Right-hand side of a pure Neumann problem does not sum to zero."""

    def __init__(self, message, defect):
        super().__init__(message)
        self.defect = defect


class RankDeficiencyError(SolverError):
    def __init__(self, message, columns):
        super().__init__(message)
        self.columns = list(columns)


class ConservationDefectError(RuntimeError):
    def __init__(self, message, defect):
        super().__init__(message)
        self.defect = defect


class CFLError(RuntimeError):
    def __init__(self, message, dt_max):
        super().__init__(message)
        self.dt_max = dt_max


class PermeabilityParseError(ValueError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location
