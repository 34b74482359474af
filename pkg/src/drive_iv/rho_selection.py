"""Data-driven choice of the DRIVE penalty level.

Two rules are provided: a fraction of the smallest eigenvalue of the
estimated first-stage Gram matrix, and an iterative residual bootstrap of
the normalized score statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from scipy.stats import norm

from .core import Estimate, IVDataset, ProjectedDesign
from .drive import DriveSpec, fit_drive
from .estimators import fit_ols
from .exceptions import ValidationError, ZeroResiduals


@dataclass(frozen=True)
class BootstrapSettings:
    """Settings of the score-quantile bootstrap.

    Parameters
    ----------
    alpha : float, default 0.05
        One minus the quantile level.
    c_mult : float, default 1.1
        Multiplier applied to the quantile.
    n_boot : int, default 500
    max_outer_iters : int, default 20
    conv_tol : float, default 1e-6
        Relative tolerance on successive penalty levels.
    seed : int, default 0
    norm : {"inf", "2"}, default "inf"
        Norm of the averaged score in the numerator of the statistic.
    init : {"tsls", "ols"}, default "tsls"
        Starting estimate when none is supplied.
    """

    alpha: float = 0.05
    c_mult: float = 1.1
    n_boot: int = 500
    max_outer_iters: int = 20
    conv_tol: float = 1e-6
    seed: int = 0
    norm: str = "inf"
    init: str = "tsls"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if not self.c_mult > 0:
            raise ValidationError("c_mult must be positive")
        if self.n_boot < 1 or self.max_outer_iters < 1:
            raise ValidationError("n_boot and max_outer_iters must be positive")
        if not self.conv_tol > 0:
            raise ValidationError("conv_tol must be positive")
        if self.norm not in ("inf", "2"):
            raise ValidationError("norm must be 'inf' or '2'")
        if self.init not in ("tsls", "ols"):
            raise ValidationError("init must be 'tsls' or 'ols'")


@dataclass(frozen=True)
class EigenvalueFraction:
    """``rho = c * lambda_min(gamma_hat^T Sigma_hat gamma_hat)`` with ``c`` in [0, 1]."""

    c: float = 0.5

    def __post_init__(self):
        if not 0 <= self.c <= 1:
            raise ValidationError(f"eigenvalue fraction must lie in [0, 1], got {self.c}")


@dataclass(frozen=True)
class BootstrapScoreQuantile:
    """Iterative score-quantile bootstrap."""

    settings: BootstrapSettings = field(default_factory=BootstrapSettings)


@dataclass(frozen=True)
class Fixed:
    """A fixed penalty level."""

    rho: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValidationError(f"rho must be nonnegative, got {self.rho}")


RhoRule = Union[EigenvalueFraction, BootstrapScoreQuantile, Fixed]


def rho_eigenvalue_rule(design: ProjectedDesign, c: float) -> float:
    """Return ``c`` times the smallest eigenvalue of ``gamma_hat^T Sigma_hat gamma_hat``."""
    EigenvalueFraction(c)
    g = design.gamma_hat.T @ design.sigma_z_hat @ design.gamma_hat
    return float(c * np.linalg.eigvalsh(0.5 * (g + g.T))[0])


def _canonical(xt: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order rows and residuals so the statistic ignores the sample order."""
    order = np.lexsort(xt.T[::-1])
    return xt[order], np.sort(r)


def _residuals(design: ProjectedDesign, beta, direction=None) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    r = design.y_proj - design.x_proj @ beta
    scale = max(np.abs(design.y_proj).max(), np.abs(design.x_proj).max(), 1e-300)
    if np.all(np.abs(r) <= 1e-12 * scale):
        if direction is None:
            raise ZeroResiduals("all projected residuals vanish at this beta")
        # the statistic is scale free, so use the limit of r(beta - t d) / t
        r = design.x_proj @ np.atleast_1d(np.asarray(direction, dtype=float))
        if np.all(r == 0):
            raise ZeroResiduals("residual direction is degenerate")
    return r


def bootstrap_statistics(design: ProjectedDesign, beta,
                         settings: BootstrapSettings, direction=None) -> np.ndarray:
    """Bootstrap draws of ``||mean(x_i e_i)|| / sqrt(mean(e_i^2))``.

    Residuals ``e`` of the projected data at ``beta`` are resampled with
    replacement and paired with the fixed projected regressor rows.

    When ``beta`` interpolates the projected data (always the case at TSLS
    with as many instruments as regressors) every residual is zero. The
    statistic does not depend on the residual scale, so it is then
    evaluated on its limit along ``direction``: the residuals of
    ``beta - t * direction`` divided by ``t``, i.e. ``X~ direction``.

    Raises
    ------
    ZeroResiduals
        If every residual is zero and no direction is given.
    """
    r = _residuals(design, beta, direction)
    xt, r = _canonical(np.asarray(design.x_proj), r)
    n = r.size
    rng = np.random.default_rng(settings.seed)
    idx = rng.integers(0, n, size=(settings.n_boot, n))
    eps = r[idx]
    num = eps @ xt / n
    den = np.sqrt(np.mean(eps * eps, axis=1))
    if settings.norm == "inf":
        top = np.max(np.abs(num), axis=1)
    else:
        top = np.linalg.norm(num, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(den > 0, top / den, 0.0)
    return stat


def score_quantile_bootstrap(design: ProjectedDesign, beta,
                             settings: BootstrapSettings | None = None,
                             direction=None) -> float:
    """Empirical ``(1 - alpha)`` quantile of :func:`bootstrap_statistics`."""
    settings = settings or BootstrapSettings()
    stat = bootstrap_statistics(design, beta, settings, direction)
    return float(np.quantile(stat, 1.0 - settings.alpha))


def quantile_to_rho(quantile: float, p: int, c_mult: float) -> float:
    """Map a score quantile to a penalty: ``sqrt(rho) = sqrt(p) * c_mult * quantile``."""
    return float(p * (c_mult * quantile) ** 2)


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    beta: np.ndarray
    quantile: float
    rho: float


class RhoSearchResult(NamedTuple):
    rho: float
    trace: tuple
    converged: bool


def rho_bootstrap_iterative(design: ProjectedDesign,
                            settings: BootstrapSettings | None = None,
                            init: Estimate | None = None,
                            data: IVDataset | None = None) -> RhoSearchResult:
    """Alternate between the bootstrap penalty and the DRIVE fit until stable.

    Step ``k`` computes the score quantile at ``beta_k``, maps it to
    ``rho_k`` and refits DRIVE at ``rho_k`` to get ``beta_{k+1}``. The same
    bootstrap indices are reused at every step, which makes the iteration a
    deterministic map. It stops once
    ``|rho_k - rho_{k-1}| <= conv_tol * max(rho_{k-1}, 1)``.

    If an iterate interpolates the projected data, the statistic is taken
    along the direction of the previous iterate (or towards zero at the
    first step); see :func:`bootstrap_statistics`.

    Parameters
    ----------
    design : ProjectedDesign
    settings : BootstrapSettings, optional
    init : Estimate, optional
        Starting point. Defaults to TSLS (or OLS when
        ``settings.init == "ols"``, which needs ``data``).
    data : IVDataset, optional

    Returns
    -------
    RhoSearchResult
        Final penalty, per-step trace and a convergence flag. Hitting
        ``max_outer_iters`` sets the flag to false instead of raising.
    """
    settings = settings or BootstrapSettings()
    if init is None:
        if settings.init == "ols":
            if data is None:
                raise ValidationError("OLS initialization needs the raw dataset")
            init = fit_ols(data)
        else:
            init = fit_drive(design, DriveSpec(0.0))
    beta = np.array(init.beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValidationError("initial estimate is not finite")
    trace = []
    prev = None
    direction = beta if np.any(beta != 0) else np.ones_like(beta)
    for k in range(settings.max_outer_iters):
        q = score_quantile_bootstrap(design, beta, settings, direction)
        rho = quantile_to_rho(q, design.p, settings.c_mult)
        trace.append(TraceStep(k, beta.copy(), q, rho))
        if prev is not None and abs(rho - prev) <= settings.conv_tol * max(prev, 1.0):
            return RhoSearchResult(rho, tuple(trace), True)
        prev = rho
        new = np.array(fit_drive(design, DriveSpec(rho), beta_init=beta).beta)
        if np.any(new != beta):
            direction = beta - new
        beta = new
    return RhoSearchResult(trace[-1].rho, tuple(trace), False)


def lambda_star_analytic(n: int, p: int, alpha: float = 0.05, c_mult: float = 1.1) -> float:
    """Reference penalty ``c_mult * sqrt(n) * Phi^{-1}(1 - alpha / (2 p))``."""
    if n < 1 or p < 1:
        raise ValidationError("n and p must be at least 1")
    level = 1.0 - alpha / (2.0 * p)
    if not 0 < level < 1 or alpha <= 0:
        raise ValidationError("alpha must lie in (0, 2p)")
    return float(c_mult * np.sqrt(n) * norm.ppf(level))


def parse_rho_rule(value, seed=0) -> RhoRule:
    """Interpret a penalty specification.

    Accepts a rule object, a nonnegative number, or one of the strings
    ``"bootstrap"``, ``"eigenvalue"``, ``"eigenvalue:<c>"`` and
    ``"fixed:<rho>"``.
    """
    if isinstance(value, (EigenvalueFraction, BootstrapScoreQuantile, Fixed)):
        return value
    if isinstance(value, (int, float, np.floating)) and not isinstance(value, bool):
        return Fixed(float(value))
    if isinstance(value, str):
        name, _, arg = value.strip().partition(":")
        name = name.lower()
        try:
            if name == "bootstrap":
                return BootstrapScoreQuantile(BootstrapSettings(seed=seed))
            if name == "eigenvalue":
                return EigenvalueFraction(float(arg) if arg else 0.5)
            if name == "fixed":
                return Fixed(float(arg))
            return Fixed(float(value))
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"cannot parse rho rule {value!r}") from exc
    raise ValidationError(f"cannot parse rho rule {value!r}")


def resolve_rho(rule: RhoRule, design: ProjectedDesign,
                data: IVDataset | None = None) -> tuple[float, tuple | None]:
    """Evaluate a rule on a design. Returns ``(rho, trace)``; trace is None
    except for the bootstrap rule."""
    if isinstance(rule, Fixed):
        return rule.rho, None
    if isinstance(rule, EigenvalueFraction):
        return rho_eigenvalue_rule(design, rule.c), None
    res = rho_bootstrap_iterative(design, rule.settings, data=data)
    return res.rho, res.trace
