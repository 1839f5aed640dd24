"""Multiscale pressure solver with online enrichment, conservative flux recovery and two-phase transport."""
from .errors import (
    CFLError,
    CompatibilityError,
    ConfigurationError,
    ConservationDefectError,
    PermeabilityParseError,
    RankDeficiencyError,
    SingularMatrixError,
    SolverError,
)
from .mesh import build_grid_hierarchy

__version__ = "0.1.0"
