"""Surrogate-based robust and reliability design for chained subsystems."""

from .cdsp import (
    CdspProblem,
    CdspSolution,
    DesignEvaluation,
    DesignVariable,
    Formulation,
    alpha_from_emi_target,
    deviation,
    emi,
    emi_target_from_alpha,
    solve,
    sweep,
)
from .gp import Dataset, FitConfig, Hyperparameters, TrainedGP, fit
from .network import (
    AnalyticModel,
    OutputDistribution,
    SubsystemNetwork,
    SubsystemNode,
    UncertaintySpec,
    propagate,
)

__version__ = "0.1.0"
