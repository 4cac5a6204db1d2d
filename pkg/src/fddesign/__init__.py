"""Staged measurement designs for estimating linear front-door effects."""
from .design import (
    BudgetSlackWarning,
    ClosedFormPolicy,
    DesignSolution,
    InfeasibleBudgetError,
    LeverageContext,
    backdoor_solve,
    constant_context,
    context_from_dataset,
    context_from_model,
    optimal_policy,
    relative_efficiency_report,
    solve_budget,
    variance_at,
)
from .estimators import EffectEstimate, RankDeficiencyError, estimate_effect, fit_all
from .kernels import BACKEND
from .sem import (
    BlockMatrix,
    CoarsenedDataset,
    ConstantPolicy,
    CostFunction,
    CostSpec,
    ErrorModel,
    FrontDoorModel,
    NoiseBlock,
    Stage,
    coarsen,
    quadratic_model,
    reference_model,
    sample_full,
)

__version__ = "0.1.0"

__all__ = [
    "backdoor_solve",
    "BACKEND",
    "BlockMatrix",
    "BudgetSlackWarning",
    "ClosedFormPolicy",
    "coarsen",
    "CoarsenedDataset",
    "constant_context",
    "ConstantPolicy",
    "context_from_dataset",
    "context_from_model",
    "CostFunction",
    "CostSpec",
    "DesignSolution",
    "EffectEstimate",
    "ErrorModel",
    "estimate_effect",
    "fit_all",
    "FrontDoorModel",
    "InfeasibleBudgetError",
    "LeverageContext",
    "NoiseBlock",
    "optimal_policy",
    "quadratic_model",
    "RankDeficiencyError",
    "reference_model",
    "relative_efficiency_report",
    "sample_full",
    "solve_budget",
    "Stage",
    "variance_at",
]
