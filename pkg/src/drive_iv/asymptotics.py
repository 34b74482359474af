"""Samplers for the limiting laws of TSLS and DRIVE, and a KS comparison.

With a nonvanishing penalty, ``sqrt(n) (beta_DRIVE - beta0)`` converges to

    argmin_delta  sqrt((Z + S g delta)^T S^{-1} (Z + S g delta)) + v^T delta,

where ``Z ~ N(0, s2 S)``, ``S`` is the instrument covariance, ``g`` the
first-stage coefficient and ``v = sqrt(rho) beta0 / sqrt(1 + ||beta0||^2)``.
Substituting ``A = S^{1/2} g`` and ``b = S^{-1/2} Z`` turns the first term
into ``||A delta + b||``, which the shared solver handles directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._solver import LinearPenalty, NormPlusPenalty, SolverSettings, minimize
from .exceptions import DimensionMismatch, EmptySample, SingularGram, ValidationError


@dataclass(frozen=True)
class AsymptoticSpec:
    """Parameters of the limiting experiment.

    Parameters
    ----------
    beta0 : array-like of shape (p,)
    gamma : array-like of shape (d, p)
    sigma_z : array-like of shape (d, d)
        Symmetric positive definite instrument covariance.
    sigma2_eps : float
        Structural error variance.
    rho : float
        Penalty level. Values above the smallest eigenvalue of
        ``gamma^T sigma_z gamma`` trigger a warning and set
        ``in_consistency_range`` to false.
    n_draws : int
    seed : int
    """

    beta0: np.ndarray
    gamma: np.ndarray
    sigma_z: np.ndarray
    sigma2_eps: float = 1.0
    rho: float = 0.0
    n_draws: int = 10_000
    seed: int = 0

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        g = np.asarray(self.gamma, dtype=float).reshape(-1, b.size)
        s = np.atleast_2d(np.asarray(self.sigma_z, dtype=float))
        if s.shape != (g.shape[0], g.shape[0]):
            raise DimensionMismatch(f"sigma_z must be {g.shape[0]}x{g.shape[0]}")
        if g.shape[0] < b.size:
            raise ValidationError("need at least as many instruments as regressors")
        if not np.allclose(s, s.T) or np.linalg.eigvalsh(s)[0] <= 0:
            raise ValidationError("sigma_z must be symmetric positive definite")
        if not self.sigma2_eps > 0:
            raise ValidationError("sigma2_eps must be positive")
        if not self.rho >= 0:
            raise ValidationError("rho must be nonnegative")
        if self.n_draws < 1:
            raise ValidationError("n_draws must be positive")
        object.__setattr__(self, "beta0", b)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "sigma_z", 0.5 * (s + s.T))
        if not self.in_consistency_range:
            warnings.warn(f"rho={self.rho} exceeds the smallest first-stage eigenvalue "
                          f"{self.rho_bar:.6g}; the limit may not be centered at beta0",
                          stacklevel=2)

    @property
    def gram(self) -> np.ndarray:
        g = self.gamma.T @ self.sigma_z @ self.gamma
        return 0.5 * (g + g.T)

    @property
    def rho_bar(self) -> float:
        return float(np.linalg.eigvalsh(self.gram)[0])

    @property
    def in_consistency_range(self) -> bool:
        return self.rho <= self.rho_bar

    @property
    def penalty_slope(self) -> np.ndarray:
        b = self.beta0
        return np.sqrt(self.rho) * b / np.sqrt(1.0 + b @ b)


def _sym_power(m: np.ndarray, power: float) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * w ** power) @ v.T


def sample_tsls_asymptotic(spec: AsymptoticSpec) -> np.ndarray:
    """Draws from ``N(0, s2 (gamma^T S gamma)^{-1})``.

    Raises
    ------
    SingularGram
        If ``gamma^T S gamma`` is not invertible.
    """
    G = spec.gram
    w = np.linalg.eigvalsh(G)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise SingularGram("gamma^T sigma_z gamma is singular")
    cov = spec.sigma2_eps * np.linalg.inv(G)
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    return rng.standard_normal((spec.n_draws, spec.beta0.size)) @ L.T


@dataclass(frozen=True)
class SamplerDiagnostics:
    """Per-draw solver reports of :func:`sample_drive_asymptotic`."""

    gradient_norm: np.ndarray
    converged: np.ndarray
    at_kink: np.ndarray

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))


def _instrument_draws(spec: AsymptoticSpec) -> np.ndarray:
    L = np.linalg.cholesky(spec.sigma2_eps * spec.sigma_z)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    return rng.standard_normal((spec.n_draws, spec.sigma_z.shape[0])) @ L.T


def sample_drive_asymptotic(spec: AsymptoticSpec, settings: SolverSettings | None = None,
                            return_diagnostics: bool = False):
    """Draws from the limiting law of ``sqrt(n) (beta_DRIVE - beta0)``.

    Each draw samples ``Z`` and solves the convex argmin problem. With one
    instrument and one regressor the minimizer is ``-Z / (sigma_z gamma)`` whenever
    the kink is optimal, and that closed form is used. Draws whose solve
    fails are kept and flagged in the diagnostics.

    Parameters
    ----------
    spec : AsymptoticSpec
    settings : SolverSettings, optional
    return_diagnostics : bool, default False

    Returns
    -------
    draws : ndarray of shape (n_draws, p)
    diagnostics : SamplerDiagnostics
        Only when ``return_diagnostics`` is true.
    """
    settings = settings or SolverSettings()
    z = _instrument_draws(spec)
    A = _sym_power(spec.sigma_z, 0.5) @ spec.gamma
    b = z @ _sym_power(spec.sigma_z, -0.5)  # rows are S^{-1/2} Z
    v = spec.penalty_slope
    p = spec.beta0.size
    m = spec.n_draws
    out = np.empty((m, p))
    gn = np.zeros(m)
    ok = np.ones(m, dtype=bool)
    kink = np.zeros(m, dtype=bool)
    scalar_kink = (A.shape == (1, 1)) and abs(v[0]) <= abs(A[0, 0])
    if scalar_kink:
        # the kink sits where Z + sigma_z gamma delta = 0
        out[:, 0] = -z[:, 0] / (spec.sigma_z[0, 0] * spec.gamma[0, 0])
        kink[:] = True
    else:
        penalty = LinearPenalty(v)
        for i in range(m):
            res = minimize(NormPlusPenalty(A, -b[i], penalty), None, settings,
                           raise_on_failure=False)
            out[i], gn[i], ok[i], kink[i] = res.x, res.gradient_norm, res.converged, res.at_kink
    if return_diagnostics:
        return out, SamplerDiagnostics(gn, ok, kink)
    return out


def ks_distance(sample_a, sample_b) -> np.ndarray:
    """Two-sample Kolmogorov-Smirnov statistic for each column.

    Raises
    ------
    EmptySample
    DimensionMismatch
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySample("both samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        sa, sb = np.sort(a[:, j]), np.sort(b[:, j])
        grid = np.concatenate([sa, sb])
        fa = np.searchsorted(sa, grid, side="right") / sa.size
        fb = np.searchsorted(sb, grid, side="right") / sb.size
        out[j] = np.max(np.abs(fa - fb))
    return out


def ks_critical_value(m_a: int, m_b: int, level: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value ``c(level) sqrt((m_a + m_b)/(m_a m_b))``."""
    c = np.sqrt(-0.5 * np.log(level / 2.0))
    return float(c * np.sqrt((m_a + m_b) / (m_a * m_b)))


def drive_minus_tsls_statistic(beta_drive, beta_tsls) -> np.ndarray:
    """Raw difference ``beta_DRIVE - beta_TSLS``; no size or power calibration."""
    return np.atleast_1d(np.asarray(beta_drive, float) - np.asarray(beta_tsls, float))
