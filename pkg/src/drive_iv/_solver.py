"""Minimizer for ``w * sqrt(||a - B x||^2 + t0^2) + P(x)`` with smooth convex P.

Every square-root objective in the package (DRIVE, square-root ridge OLS,
square-root ridge GMM, the asymptotic argmin and the population limit)
reduces to this form with a handful of rows in ``B``.

The residual norm is not differentiable where ``a - B x = 0`` and
``t0 = 0``. That point is frequently the exact minimizer (it is how
delayed shrinkage happens), so it is tested first with a subgradient
certificate. Otherwise the norm is replaced by ``sqrt(r^2 + eps^2)`` and
minimized for a decreasing sequence of ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import SolverDidNotConverge, ValidationError

_ARMIJO_C = 1e-4
_MAX_HALVINGS = 60
_NEWTON_MAX_COND = 1e12
_MAX_STALLS = 5


@dataclass(frozen=True)
class SolverSettings:
    """Tuning knobs of the smoothed solver.

    Parameters
    ----------
    grad_tol : float, default 1e-10
        Stopping tolerance on the smoothed gradient norm, scaled by
        ``max(1, |objective|)``.
    max_iters : int, default 10000
        Cap on the total number of iterations over all smoothing levels.
    smoothing_eps_schedule : tuple of float
        Strictly decreasing smoothing levels.
    interp_tol : float, default 1e-12
        Relative residual below which the least-squares point is treated as
        interpolating.
    """

    grad_tol: float = 1e-10
    max_iters: int = 10000
    smoothing_eps_schedule: tuple = (1e-4, 1e-8, 1e-12)
    interp_tol: float = 1e-12

    def __post_init__(self):
        sched = tuple(float(e) for e in self.smoothing_eps_schedule)
        object.__setattr__(self, "smoothing_eps_schedule", sched)
        if not self.grad_tol > 0:
            raise ValidationError("grad_tol must be positive")
        if int(self.max_iters) < 1:
            raise ValidationError("max_iters must be at least 1")
        if not sched or any(e <= 0 for e in sched):
            raise ValidationError("smoothing schedule must hold positive reals")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValidationError("smoothing schedule must be strictly decreasing")


class RootPowerPenalty:
    """``(rho * (sum_j |x_j|^k + 1))^(1/k)`` for an exponent ``k >= 2``.

    With ``k = 2`` this is the square-root ridge penalty
    ``sqrt(rho * (||x||^2 + 1))``.
    """

    def __init__(self, rho: float, power: float = 2.0):
        if rho < 0:
            raise ValidationError("rho must be nonnegative")
        if power < 2:
            raise ValidationError("penalty exponent must be at least 2")
        self.rho = float(rho)
        self.power = float(power)

    def value(self, x: np.ndarray) -> float:
        k = self.power
        h = np.sum(np.abs(x) ** k) + 1.0
        return float((self.rho * h) ** (1.0 / k))

    def grad(self, x: np.ndarray) -> np.ndarray:
        k = self.power
        if k == 2.0:
            return np.sqrt(self.rho) * x / np.sqrt(x @ x + 1.0)
        h = np.sum(np.abs(x) ** k) + 1.0
        g0 = np.sign(x) * np.abs(x) ** (k - 1)
        return self.rho ** (1 / k) * h ** (1 / k - 1) * g0

    def hess(self, x: np.ndarray) -> np.ndarray:
        k = self.power
        if k == 2.0:
            h = x @ x + 1.0
            return np.sqrt(self.rho) * (np.eye(x.size) / np.sqrt(h)
                                        - np.outer(x, x) / h ** 1.5)
        h = np.sum(np.abs(x) ** k) + 1.0
        g0 = np.sign(x) * np.abs(x) ** (k - 1)
        diag = (k - 1) * np.abs(x) ** (k - 2)
        return self.rho ** (1 / k) * h ** (1 / k - 2) * (
            (1 - k) * np.outer(g0, g0) + h * np.diag(diag))


class LinearPenalty:
    """``v^T x``."""

    def __init__(self, v: np.ndarray):
        self.v = np.asarray(v, dtype=float)

    def value(self, x):
        return float(self.v @ x)

    def grad(self, x):
        return self.v.copy()

    def hess(self, x):
        return np.zeros((self.v.size, self.v.size))


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    iterations: int
    gradient_norm: float
    objective: float
    converged: bool
    at_kink: bool


class NormPlusPenalty:
    """The objective ``w * sqrt(||a - B x||^2 + t0^2) + P(x)``."""

    def __init__(self, B, a, penalty, w: float = 1.0, t0: float = 0.0):
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.a = np.asarray(a, dtype=float).reshape(-1)
        self.w = float(w)
        self.t0sq = float(t0) ** 2
        self.penalty = penalty

    def residual_norm(self, x) -> float:
        e = self.a - self.B @ x
        return self.w * np.sqrt(e @ e + self.t0sq)

    def value(self, x) -> float:
        return self.residual_norm(x) + self.penalty.value(x)

    def smoothed(self, x, eps: float, order: int = 2):
        """Value, gradient and (optionally) Hessian of the eps-smoothed objective."""
        w2 = self.w * self.w
        e = self.a - self.B @ x
        r = np.sqrt(w2 * (e @ e + self.t0sq) + eps * eps)
        bte = w2 * (self.B.T @ e)
        f = r + self.penalty.value(x)
        g = -bte / r + self.penalty.grad(x)
        if order < 2:
            return f, g, None
        H = (w2 * (self.B.T @ self.B) / r - np.outer(bte, bte) / r ** 3
             + self.penalty.hess(x))
        return f, g, 0.5 * (H + H.T)

    def least_squares_point(self):
        x, *_ = np.linalg.lstsq(self.B, self.a, rcond=None)
        return x

    def kink_certificate(self, x) -> float | None:
        """Distance from 0 to the subdifferential at an interpolating ``x``.

        Returns ``None`` when ``x`` does not interpolate (so the objective is
        differentiable there) or the certificate equation has no solution.
        """
        if self.t0sq > 0:
            return None
        e = self.a - self.B @ x
        scale = np.linalg.norm(self.a) + np.linalg.norm(self.B) * np.linalg.norm(x)
        if np.linalg.norm(e) > 1e-12 * max(scale, 1.0):
            return None
        if self.w == 0:
            return float(np.linalg.norm(self.penalty.grad(x)))
        target = self.penalty.grad(x) / self.w
        # subgradients of the norm term are -w B^T u with ||u|| <= 1
        u, *_ = np.linalg.lstsq(self.B.T, target, rcond=None)
        miss = np.linalg.norm(self.B.T @ u - target)
        if miss > 1e-10 * max(np.linalg.norm(target), 1.0):
            return None
        nu = np.linalg.norm(u)
        if nu <= 1.0 + 1e-12:
            return 0.0
        # shrink u onto the unit ball: the resulting gap upper-bounds the distance
        return float(self.w * np.linalg.norm(self.B.T @ (u / nu) - target))


def _descent_direction(g, H):
    if H is not None:
        try:
            ev = np.linalg.eigvalsh(H)
            if ev[0] > 0 and ev[-1] / ev[0] < _NEWTON_MAX_COND:
                d = -np.linalg.solve(H, g)
                if g @ d < 0:
                    return d
        except np.linalg.LinAlgError:
            pass
    return -g


def _armijo(obj, x, f, g, d, eps):
    slope = g @ d
    t = 1.0
    for _ in range(_MAX_HALVINGS):
        x_new = x + t * d
        f_new = obj.smoothed(x_new, eps, order=1)[0]
        if f_new <= f + _ARMIJO_C * t * slope:
            return x_new, f_new
        t *= 0.5
    return None


def _minimize_smoothed(obj: NormPlusPenalty, x0, eps, tol, budget):
    x = np.array(x0, dtype=float)
    it = 0
    stalled = 0
    f, g, H = obj.smoothed(x, eps)
    while it < budget:
        gn = np.linalg.norm(g)
        if gn <= tol * max(1.0, abs(f)):
            return x, it, gn, f, True
        it += 1
        d_newton = _descent_direction(g, H)
        # Full Newton step first. The tolerance on f only matters at
        # rounding level, where the sufficient-decrease test is noise.
        step = None
        x_try = x + d_newton
        f_try, g_try, _ = obj.smoothed(x_try, eps, order=1)
        slack = 64 * np.finfo(float).eps * max(1.0, abs(f))
        if (f_try <= f + _ARMIJO_C * (g @ d_newton) + slack
                and np.linalg.norm(g_try) < gn):
            step = x_try, f_try
        if step is None:
            step = _armijo(obj, x, f, g, d_newton, eps)
        if step is None:
            step = _armijo(obj, x, f, g, -g, eps)
        if step is None:
            return x, it, gn, f, gn <= tol * max(1.0, abs(f))
        x_new, f_new = step
        flat = f - f_new <= 4 * np.finfo(float).eps * max(1.0, abs(f))
        x = x_new
        f, g, H = obj.smoothed(x, eps)
        # objective change lost in rounding and gradient no longer shrinking
        stalled = stalled + 1 if flat and np.linalg.norm(g) > 0.5 * gn else 0
        if stalled >= _MAX_STALLS:
            break
    gn = np.linalg.norm(g)
    return x, it, gn, f, gn <= tol * max(1.0, abs(f))


def minimize(obj: NormPlusPenalty, x0=None, settings: SolverSettings | None = None,
             raise_on_failure: bool = True) -> SolveResult:
    """Minimize ``obj`` globally.

    The least-squares point of the residual term is checked first. If it
    interpolates and the subgradient certificate holds it is returned as
    is. Otherwise the smoothed problem is solved by damped Newton steps
    (steepest descent when the Hessian is badly conditioned) with Armijo
    backtracking, continuing over ``settings.smoothing_eps_schedule``.

    Raises
    ------
    SolverDidNotConverge
        If the gradient tolerance is not met within ``settings.max_iters``
        iterations and ``raise_on_failure`` is true.
    """
    settings = settings or SolverSettings()
    x_ls = obj.least_squares_point()
    cert = obj.kink_certificate(x_ls)
    if cert == 0.0:
        return SolveResult(x_ls, 0, 0.0, obj.value(x_ls), True, True)

    x = x_ls if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    total = 0
    gn, ok = np.inf, False
    sched = settings.smoothing_eps_schedule
    for k, eps in enumerate(sched):
        # intermediate levels only supply warm starts
        tol = settings.grad_tol if k == len(sched) - 1 else max(settings.grad_tol, 1e-2 * eps)
        x, it, gn, _, ok = _minimize_smoothed(obj, x, eps, tol, settings.max_iters - total)
        total += it
    f_true = obj.value(x)
    if cert is not None and obj.value(x_ls) <= f_true:
        # interpolating point wins even without a clean certificate
        return SolveResult(x_ls, total, cert, obj.value(x_ls), cert <= settings.grad_tol, True)
    if not ok and raise_on_failure:
        raise SolverDidNotConverge(
            f"gradient norm {gn:.3e} above tolerance after {total} iterations",
            gradient_norm=float(gn))
    return SolveResult(x, total, float(gn), f_true, bool(ok), False)
