"""Classical baselines: OLS, TSLS, k-class (anchor), ridge-TSLS and
square-root ridge OLS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._base import IVRegressor
from ._solver import NormPlusPenalty, RootPowerPenalty, SolverSettings, minimize
from .core import (
    Diagnostics,
    Estimate,
    IVDataset,
    ProjectedDesign,
    RANK_RTOL,
    project_onto_instruments,
    validate_dataset,
)
from .exceptions import SingularDesign, SingularProjectedDesign, ValidationError

WEAK_INSTRUMENT_F = 10.0


@dataclass(frozen=True)
class KClassSpec:
    """k-class parameter ``kappa`` in [0, 1]; 0 is OLS and 1 is TSLS."""

    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValidationError(f"kappa must lie in [0, 1], got {self.kappa}")

    @classmethod
    def from_anchor(cls, anchor_gamma: float) -> "KClassSpec":
        """Map an anchor-regression strength ``gamma >= 1`` to ``1 - 1/gamma``."""
        if anchor_gamma < 1:
            raise ValidationError("anchor gamma must be at least 1")
        return cls(1.0 - 1.0 / anchor_gamma)


DEFAULT_ANCHOR_KAPPA = 1.0 - 1.0 / 7.0


@dataclass(frozen=True)
class RidgeSpec:
    """Nonnegative penalty level ``rho``."""

    rho: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValidationError(f"rho must be nonnegative, got {self.rho}")


def _lstsq_full_rank(A: np.ndarray, b: np.ndarray, error, what: str,
                     scale: float | None = None) -> np.ndarray:
    """Least squares via SVD, refusing numerically rank-deficient ``A``.

    ``scale`` sets the reference magnitude for the rank test (default: the
    largest singular value of ``A``).
    """
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    top = max(s.max(initial=0.0), scale or 0.0)
    if top == 0.0 or np.count_nonzero(s > RANK_RTOL * top) < A.shape[1]:
        raise error(f"{what} is rank deficient")
    return vt.T @ ((u.T @ b) / s)


def fit_ols(data: IVDataset) -> Estimate:
    """Ordinary least squares of y on X.

    Raises
    ------
    SingularDesign
        If X is numerically rank deficient.
    """
    validate_dataset(data)
    beta = _lstsq_full_rank(data.x, data.y, SingularDesign, "X")
    e = data.y - data.x @ beta
    return Estimate(beta, "ols", diagnostics=Diagnostics(objective=float(e @ e / data.n)))


def _first_stage_strength(design: ProjectedDesign, data: IVDataset) -> float:
    """Smallest eigenvalue of the first-stage Wald matrix divided by d.

    This is the Cragg-Donald statistic; for one regressor it is the usual
    first-stage F.
    """
    resid = data.x - design.x_proj
    dof = max(data.n - data.d, 1)
    omega = resid.T @ resid / dof
    try:
        c = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return float("inf")
    ci = np.linalg.inv(c)
    m = ci @ (design.x_coord.T @ design.x_coord) @ ci.T
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0] / data.d)


def fit_tsls(design: ProjectedDesign, data: IVDataset) -> Estimate:
    """Two-stage least squares ``(X^T P X)^{-1} X^T P y``.

    The diagnostics carry the first-stage strength statistic and a
    ``weak_instruments`` flag when it falls below 10.

    Raises
    ------
    SingularProjectedDesign
        If the projected regressors are numerically rank deficient.
    """
    # rank is judged against the unprojected X so that a projection lost
    # in rounding (irrelevant instruments) is not mistaken for signal
    beta = _lstsq_full_rank(design.x_coord, design.y_coord,
                            SingularProjectedDesign, "projected X",
                            scale=float(np.linalg.norm(data.x, 2)))
    e = design.y_coord - design.x_coord @ beta
    strength = _first_stage_strength(design, data)
    diag = Diagnostics(objective=float(e @ e / design.n),
                       extra={"first_stage_strength": strength,
                              "weak_instruments": bool(strength < WEAK_INSTRUMENT_F)})
    return Estimate(beta, "tsls", diagnostics=diag)


def fit_kclass(data: IVDataset, spec: KClassSpec) -> Estimate:
    """k-class estimator.

    Minimizes ``kappa * ||P(y - X b)||^2 + (1 - kappa) * ||y - X b||^2``,
    whose normal equations are the classical
    ``(X^T (I - kappa M) X)^{-1} X^T (I - kappa M) y``. The minimization is
    carried out as one stacked least-squares problem for stability.

    Raises
    ------
    SingularDesign
        If the k-class Gram matrix is singular.
    """
    design = project_onto_instruments(data)
    k = spec.kappa
    if k == 0.0:
        est = fit_ols(data)
    elif k == 1.0:
        try:
            est = fit_tsls(design, data)
        except SingularProjectedDesign as exc:
            raise SingularDesign(str(exc)) from exc
    else:
        A = np.vstack([np.sqrt(1 - k) * data.x, np.sqrt(k) * design.x_coord])
        b = np.concatenate([np.sqrt(1 - k) * data.y, np.sqrt(k) * design.y_coord])
        beta = _lstsq_full_rank(A, b, SingularDesign, "k-class design")
        r = b - A @ beta
        est = Estimate(beta, "kclass", diagnostics=Diagnostics(objective=float(r @ r / data.n)))
    return Estimate(est.beta, "kclass", kappa=k, diagnostics=est.diagnostics)


def fit_tsls_ridge(design: ProjectedDesign, data: IVDataset, spec: RidgeSpec) -> Estimate:
    """Ridge-regularized TSLS.

    Solves ``min_b ||y - P X b||^2 / n + rho ||b||^2``. Since ``P X`` lies in
    span(Z), ``(P X)^T y = (P X)^T P y`` and only the projected coordinates
    are needed.
    """
    n, p = design.n, design.p
    G = design.x_coord.T @ design.x_coord / n
    h = design.x_coord.T @ design.y_coord / n
    if spec.rho == 0.0:
        return Estimate(fit_tsls(design, data).beta, "tsls_ridge", rho=0.0)
    beta = np.linalg.solve(G + spec.rho * np.eye(p), h)
    return Estimate(beta, "tsls_ridge", rho=spec.rho)


def _cv_folds(n: int, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return np.array_split(perm, n_folds)


def cv_tsls_ridge_rho(data: IVDataset, rho_grid: Sequence[float], n_folds: int = 5,
                      seed=0) -> float:
    """Pick the ridge-TSLS penalty by K-fold cross-validation.

    Each candidate is scored by the held-out squared error of predicting
    ``y`` from the first-stage prediction ``Z gamma_train`` times the
    fitted coefficient, the reduced-form analogue of out-of-sample error
    for IV. Ties go to the smallest penalty.
    """
    validate_dataset(data)
    grid = np.sort(np.asarray(rho_grid, dtype=float))
    if grid.size == 0 or grid[0] < 0:
        raise ValidationError("rho grid must be nonempty and nonnegative")
    folds = _cv_folds(data.n, n_folds, np.random.default_rng(seed))
    errors = np.zeros(grid.size)
    for test in folds:
        train = np.setdiff1d(np.arange(data.n), test)
        tr = IVDataset(data.y[train], data.x[train], data.z[train])
        design = project_onto_instruments(tr)
        x_hat_test = data.z[test] @ design.gamma_hat
        for j, rho in enumerate(grid):
            beta = fit_tsls_ridge(design, tr, RidgeSpec(rho)).beta
            e = data.y[test] - x_hat_test @ beta
            errors[j] += e @ e
    return float(grid[int(np.argmin(errors))])


DEFAULT_RIDGE_GRID = tuple(np.concatenate([[0.0], np.logspace(-4, 1, 16)]))


def fit_sqrt_ridge_ols(data: IVDataset, spec: RidgeSpec,
                       settings: SolverSettings | None = None) -> Estimate:
    """Square-root ridge regression on the raw (unprojected) data.

    Minimizes ``sqrt(||y - X b||^2 / n) + sqrt(rho (1 + ||b||^2))`` with the
    same solver as the DRIVE estimator. The problem is first reduced by a
    QR factorization of X; the part of y orthogonal to X enters as a
    constant inside the square root.

    Raises
    ------
    SolverDidNotConverge
    """
    validate_dataset(data)
    if spec.rho == 0.0:
        ols = fit_ols(data)
        return Estimate(ols.beta, "sqrt_ridge_ols", rho=0.0, diagnostics=ols.diagnostics)
    q, r = np.linalg.qr(data.x, mode="reduced")
    a = q.T @ data.y
    t0 = np.linalg.norm(data.y - q @ a)
    if t0 <= 1e-12 * max(np.linalg.norm(data.y), 1.0):
        # y lies in span(X) up to rounding: keep the kink exact
        t0 = 0.0
    obj = NormPlusPenalty(r, a, RootPowerPenalty(spec.rho), w=1 / np.sqrt(data.n), t0=t0)
    res = minimize(obj, settings=settings)
    diag = Diagnostics(res.iterations, res.gradient_norm, res.objective,
                       res.converged, res.at_kink)
    return Estimate(res.x, "sqrt_ridge_ols", rho=spec.rho, diagnostics=diag)


# --------------------------------------------------------------------------
# scikit-learn style classes


class OLS(IVRegressor):
    """Ordinary least squares without intercept. ``Z`` is ignored."""

    def _fit_dataset(self, data):
        return fit_ols(data)


class TSLS(IVRegressor):
    """Two-stage least squares without intercept."""

    def _fit_dataset(self, data):
        return fit_tsls(project_onto_instruments(data), data)


class KClass(IVRegressor):
    """k-class estimator.

    Parameters
    ----------
    kappa : float, default 1 - 1/7
        Weight on the projected objective. ``0`` gives OLS, ``1`` gives TSLS.
    """

    def __init__(self, kappa: float = DEFAULT_ANCHOR_KAPPA):
        self.kappa = kappa

    def _fit_dataset(self, data):
        return fit_kclass(data, KClassSpec(self.kappa))


class AnchorRegression(IVRegressor):
    """Anchor regression parameterized by its strength ``gamma >= 1``.

    Equivalent to :class:`KClass` with ``kappa = 1 - 1/gamma``.
    """

    def __init__(self, gamma: float = 7.0):
        self.gamma = gamma

    def _fit_dataset(self, data):
        return fit_kclass(data, KClassSpec.from_anchor(self.gamma))


class RidgeTSLS(IVRegressor):
    """Ridge-regularized TSLS.

    Parameters
    ----------
    rho : float or "cv", default "cv"
        Penalty level. ``"cv"`` selects it from ``rho_grid`` by K-fold
        cross-validation.
    rho_grid : sequence of float, optional
    n_folds : int, default 5
    random_state : int, default 0
        Seed of the fold assignment.
    """

    def __init__(self, rho="cv", rho_grid=None, n_folds: int = 5, random_state=0):
        self.rho = rho
        self.rho_grid = rho_grid
        self.n_folds = n_folds
        self.random_state = random_state

    def _fit_dataset(self, data):
        rho = self.rho
        if isinstance(rho, str):
            if rho != "cv":
                raise ValidationError(f"unknown rho option {rho!r}")
            grid = DEFAULT_RIDGE_GRID if self.rho_grid is None else self.rho_grid
            rho = cv_tsls_ridge_rho(data, grid, self.n_folds, self.random_state)
        return fit_tsls_ridge(project_onto_instruments(data), data, RidgeSpec(float(rho)))


class SqrtRidgeOLS(IVRegressor):
    """Square-root ridge regression without intercept. ``Z`` is ignored."""

    def __init__(self, rho: float = 0.0):
        self.rho = rho

    def _fit_dataset(self, data):
        return fit_sqrt_ridge_ols(data, RidgeSpec(self.rho))
