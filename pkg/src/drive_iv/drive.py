"""The Wasserstein DRIVE estimator and its relatives.

DRIVE minimizes the square-root ridge objective on instrument-projected data,

    sqrt(||P y - P X b||^2 / n) + (rho * (sum_j |b_j|^k + 1))^(1/k),

with ``k = q / (q - 1)`` for a transport cost of order ``q`` (``k = 2`` in
the default quadratic case). The same machinery solves the population
limit of the objective and a square-root ridge GMM criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._base import IVRegressor
from ._solver import NormPlusPenalty, RootPowerPenalty, SolverSettings, minimize
from .core import (
    Diagnostics,
    Estimate,
    IVDataset,
    ProjectedDesign,
    project_onto_instruments,
    validate_dataset,
)
from .exceptions import (
    DimensionMismatch,
    NonPositiveWeight,
    SolverDidNotConverge,
    ValidationError,
)


@dataclass(frozen=True)
class DriveSpec:
    """Penalty level, transport order and solver settings of a DRIVE fit.

    Parameters
    ----------
    rho : float
        Robustness radius, equal to the penalty level. Must be nonnegative.
    q_order : float, default 2
        Order of the transport cost, restricted to ``(1, 2]``.
    solver : SolverSettings
    """

    rho: float
    q_order: float = 2.0
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValidationError(f"rho must be a nonnegative real, got {self.rho}")
        if not 1.0 < self.q_order <= 2.0:
            raise ValidationError(
                f"q_order must lie in (1, 2], got {self.q_order}")

    @property
    def penalty_power(self) -> float:
        """Conjugate exponent ``q / (q - 1)`` used in the penalty."""
        return self.q_order / (self.q_order - 1.0)

    def penalty(self) -> RootPowerPenalty:
        return RootPowerPenalty(self.rho, self.penalty_power)


@dataclass(frozen=True)
class PopulationLimit:
    """Inputs of the large-sample DRIVE objective.

    ``gram`` is the first-stage Gram matrix ``gamma^T Sigma_Z gamma``.
    """

    beta0: np.ndarray
    gram: np.ndarray
    rho: float

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        g = np.atleast_2d(np.asarray(self.gram, dtype=float))
        if g.shape != (b.size, b.size):
            raise DimensionMismatch(f"gram must be {b.size}x{b.size}, got {g.shape}")
        if not np.allclose(g, g.T, atol=1e-12 * max(1.0, np.abs(g).max())):
            raise ValidationError("gram must be symmetric")
        if np.linalg.eigvalsh(g)[0] < -1e-12 * max(1.0, np.abs(g).max()):
            raise ValidationError("gram must be positive semidefinite")
        if self.rho < 0:
            raise ValidationError("rho must be nonnegative")
        object.__setattr__(self, "beta0", b)
        object.__setattr__(self, "gram", 0.5 * (g + g.T))


def _check_beta(beta, p: int) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (p,):
        raise DimensionMismatch(f"beta must have length {p}, got shape {beta.shape}")
    return beta


def drive_objective(beta, design: ProjectedDesign, spec: DriveSpec) -> float:
    """Evaluate the DRIVE objective at ``beta``.

    Parameters
    ----------
    beta : array-like of shape (p,)
    design : ProjectedDesign
    spec : DriveSpec

    Returns
    -------
    float
    """
    beta = _check_beta(beta, design.p)
    e = design.y_proj - design.x_proj @ beta
    return float(np.sqrt(e @ e / design.n) + spec.penalty().value(beta))


def _objective_in_coords(design: ProjectedDesign, spec: DriveSpec) -> NormPlusPenalty:
    return NormPlusPenalty(design.x_coord, design.y_coord, spec.penalty(),
                           w=1.0 / np.sqrt(design.n))


def drive_smoothed_gradient(beta, design: ProjectedDesign, spec: DriveSpec,
                            eps: float) -> tuple[float, np.ndarray]:
    """Value and gradient of the DRIVE objective with residual norm smoothed by ``eps``."""
    beta = _check_beta(beta, design.p)
    f, g, _ = _objective_in_coords(design, spec).smoothed(beta, eps, order=1)
    return float(f), g


def fit_drive(design: ProjectedDesign, spec: DriveSpec, beta_init=None) -> Estimate:
    """Fit the Wasserstein DRIVE estimator.

    Parameters
    ----------
    design : ProjectedDesign
    spec : DriveSpec
    beta_init : array-like, optional
        Warm start. Defaults to the TSLS solution.

    Returns
    -------
    Estimate
        ``diagnostics.at_kink`` is true when the solution interpolates the
        projected data, in which case it is certified by a subgradient
        check rather than found by smoothing.

    Raises
    ------
    SolverDidNotConverge
    """
    obj = _objective_in_coords(design, spec)
    if spec.rho == 0.0:
        beta = obj.least_squares_point()
        diag = Diagnostics(0, 0.0, drive_objective(beta, design, spec), True, False)
        return Estimate(beta, "drive", rho=0.0, diagnostics=diag)
    x0 = None if beta_init is None else _check_beta(beta_init, design.p)
    try:
        res = minimize(obj, x0, spec.solver)
    except SolverDidNotConverge as exc:
        raise SolverDidNotConverge(str(exc), rho=spec.rho,
                                   gradient_norm=exc.gradient_norm) from exc
    diag = Diagnostics(res.iterations, res.gradient_norm,
                       drive_objective(res.x, design, spec), res.converged, res.at_kink,
                       extra={"q_order": spec.q_order})
    return Estimate(res.x, "drive", rho=spec.rho, diagnostics=diag)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w < 0, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def solve_population_limit(limit: PopulationLimit,
                           settings: SolverSettings | None = None) -> np.ndarray:
    """Minimize ``sqrt((b - b0)^T G (b - b0)) + sqrt(rho (||b||^2 + 1))``.

    Returns
    -------
    ndarray of shape (p,)

    Raises
    ------
    SolverDidNotConverge
    """
    root = _psd_sqrt(limit.gram)
    obj = NormPlusPenalty(root, root @ limit.beta0, RootPowerPenalty(limit.rho))
    if limit.rho == 0.0:
        return limit.beta0.copy()
    return minimize(obj, limit.beta0, settings).x


@dataclass(frozen=True)
class LinearMomentSystem:
    """Linear moment conditions ``E[S (y - X^T theta)] = 0`` and a weight matrix.

    The sample moment is ``g(theta) = m - M theta`` with
    ``m = S^T y / n`` and ``M = S^T X / n``.
    """

    m: np.ndarray
    M: np.ndarray
    weight: np.ndarray
    name: str = "linear"

    @classmethod
    def iv(cls, data: IVDataset) -> "LinearMomentSystem":
        """Instrument moments with weight ``(Z^T Z / n)^{-1}``."""
        validate_dataset(data)
        n = data.n
        return cls(data.z.T @ data.y / n, data.z.T @ data.x / n,
                   np.linalg.inv(data.z.T @ data.z / n), "iv")

    @classmethod
    def ols(cls, data: IVDataset) -> "LinearMomentSystem":
        """Regressor moments ``X (y - X^T theta)`` with weight ``(X^T X / n)^{-1}``."""
        validate_dataset(data)
        n = data.n
        return cls(data.x.T @ data.y / n, data.x.T @ data.x / n,
                   np.linalg.inv(data.x.T @ data.x / n), "ols")

    def objective(self, theta, spec: DriveSpec) -> float:
        g = self.m - self.M @ theta
        return float(np.sqrt(max(g @ self.weight @ g, 0.0)) + spec.penalty().value(theta))


def fit_sqrt_ridge_gmm(moments: LinearMomentSystem, spec: DriveSpec) -> Estimate:
    """Square-root ridge GMM: ``sqrt(g^T W g) + sqrt(rho (1 + ||theta||^2))``.

    Raises
    ------
    NonPositiveWeight
        If the weight matrix is not symmetric positive definite.
    SolverDidNotConverge
    """
    W = np.asarray(moments.weight, dtype=float)
    if not np.allclose(W, W.T, rtol=1e-10, atol=1e-12 * np.abs(W).max()):
        raise NonPositiveWeight("weight matrix is not symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (W + W.T))
    except np.linalg.LinAlgError as exc:
        raise NonPositiveWeight("weight matrix is not positive definite") from exc
    obj = NormPlusPenalty(L.T @ moments.M, L.T @ moments.m, spec.penalty())
    if spec.rho == 0.0:
        theta = obj.least_squares_point()
        return Estimate(theta, "sqrt_ridge_gmm", rho=0.0,
                        diagnostics=Diagnostics(objective=moments.objective(theta, spec)))
    res = minimize(obj, None, spec.solver)
    diag = Diagnostics(res.iterations, res.gradient_norm, res.objective,
                       res.converged, res.at_kink, extra={"moments": moments.name})
    return Estimate(res.x, "sqrt_ridge_gmm", rho=spec.rho, diagnostics=diag)


def drive_shrinkage_path(design: ProjectedDesign, rho_grid: Sequence[float],
                         q_order: float = 2.0,
                         settings: SolverSettings | None = None) -> list[tuple[float, np.ndarray]]:
    """Fit DRIVE along an increasing penalty grid with warm starts.

    Returns
    -------
    list of (rho, beta)

    Raises
    ------
    SolverDidNotConverge
        Carries the offending ``rho`` in its ``rho`` attribute.
    """
    grid = [float(r) for r in rho_grid]
    if not grid:
        raise ValidationError("rho grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("rho grid must be sorted increasingly")
    settings = settings or SolverSettings()
    path = []
    beta = None
    for rho in grid:
        est = fit_drive(design, DriveSpec(rho, q_order, settings), beta_init=beta)
        beta = est.beta
        path.append((rho, np.array(beta)))
    return path


class WassersteinDRIVE(IVRegressor):
    """Wasserstein distributionally robust IV estimator.

    Parameters
    ----------
    rho : float or str or rule, default "bootstrap"
        Penalty level, or how to choose it. Accepts a nonnegative float, a
        rule object from :mod:`drive_iv.rho_selection`, or one of the strings
        ``"bootstrap"`` and ``"eigenvalue:<c>"``.
    q_order : float, default 2
        Order of the transport cost, in ``(1, 2]``.
    random_state : int, default 0
        Seed for the bootstrap rule.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    rho_ : float
        Penalty level actually used.
    rho_trace_ : list or None
        Iteration trace of the bootstrap rule, when it was used.
    """

    def __init__(self, rho="bootstrap", q_order: float = 2.0, random_state=0):
        self.rho = rho
        self.q_order = q_order
        self.random_state = random_state

    def _fit_dataset(self, data):
        from .rho_selection import parse_rho_rule, resolve_rho

        design = project_onto_instruments(data)
        rule = parse_rho_rule(self.rho, seed=self.random_state)
        self.rho_, self.rho_trace_ = resolve_rho(rule, design, data)
        return fit_drive(design, DriveSpec(self.rho_, self.q_order))
