"""Representative audit-sample selection by deviance minimization."""

__version__ = "0.1.0"

from .chisq import chi_square_cutoff
from .estimators import AuditedData, EmptyStratumError, EstimateReport, PopulationMargins, estimate
from .sampler import SampleSelection, StratumMismatchError, UnitRecord, Units, realize
from .solver import AuditPlan, FeasibilityError, Objective, SolverConfig, SolverError, optimize
from .table import AdjustedTable, ContingencyTable3, deviance

__all__ = [
    "AdjustedTable", "AuditPlan", "AuditedData", "ContingencyTable3", "EmptyStratumError",
    "EstimateReport", "FeasibilityError", "Objective", "PopulationMargins", "SampleSelection",
    "SolverConfig", "SolverError", "StratumMismatchError", "UnitRecord", "Units",
    "chi_square_cutoff", "deviance", "estimate", "optimize", "realize",
]
