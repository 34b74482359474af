"""Distributionally robust instrumental-variable estimation."""

from .core import Diagnostics, Estimate, IVDataset, ProjectedDesign, project_onto_instruments
from .drive import (
    DriveSpec,
    LinearMomentSystem,
    PopulationLimit,
    WassersteinDRIVE,
    drive_objective,
    drive_shrinkage_path,
    fit_drive,
    fit_sqrt_ridge_gmm,
    solve_population_limit,
)
from .estimators import (
    OLS,
    TSLS,
    AnchorRegression,
    KClass,
    KClassSpec,
    RidgeSpec,
    RidgeTSLS,
    SqrtRidgeOLS,
    fit_kclass,
    fit_ols,
    fit_sqrt_ridge_ols,
    fit_tsls,
    fit_tsls_ridge,
)
from .exceptions import (
    DegenerateGamma,
    DriveIVError,
    DualBracketFailure,
    SolverDidNotConverge,
    ValidationError,
)
from .rho_selection import (
    BootstrapScoreQuantile,
    BootstrapSettings,
    EigenvalueFraction,
    Fixed,
    rho_bootstrap_iterative,
    rho_eigenvalue_rule,
    score_quantile_bootstrap,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorRegression", "BootstrapScoreQuantile", "BootstrapSettings", "DegenerateGamma",
    "Diagnostics", "DriveIVError", "DriveSpec", "DualBracketFailure", "EigenvalueFraction",
    "Estimate", "Fixed", "IVDataset", "KClass", "KClassSpec", "LinearMomentSystem", "OLS",
    "PopulationLimit", "ProjectedDesign", "RidgeSpec", "RidgeTSLS", "SolverDidNotConverge",
    "SqrtRidgeOLS", "TSLS", "ValidationError", "WassersteinDRIVE", "drive_objective",
    "drive_shrinkage_path", "fit_drive", "fit_kclass", "fit_ols", "fit_sqrt_ridge_gmm",
    "fit_sqrt_ridge_ols", "fit_tsls", "fit_tsls_ridge", "project_onto_instruments",
    "rho_bootstrap_iterative", "rho_eigenvalue_rule", "score_quantile_bootstrap",
    "solve_population_limit",
]
