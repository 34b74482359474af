"""Data containers and the instrument-space projection.

Every estimator in the package consumes an :class:`IVDataset`; the IV-type
estimators additionally consume the :class:`ProjectedDesign` produced by
:func:`project_onto_instruments`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .exceptions import (
    DimensionMismatch,
    NonFinite,
    RankDeficientInstruments,
    UnderIdentified,
)

RANK_RTOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 1-D or 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class IVDataset:
    """Raw observations of an instrumental-variables model.

    Parameters
    ----------
    y : array-like of shape (n,)
        Outcome.
    x : array-like of shape (n, p) or (n,)
        Endogenous regressors. A 1-D array is read as a single column.
    z : array-like of shape (n, d) or (n,)
        Instruments.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1:
            raise DimensionMismatch(f"y must be a vector, got shape {y.shape}")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(_as_matrix(self.x, "x")))
        object.__setattr__(self, "z", _frozen(_as_matrix(self.z, "z")))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class ProjectedDesign:
    """Projections of the data onto the column space of the instruments.

    Besides the full-length projections, the design keeps the coordinates
    ``x_coord = Q^T X`` and ``y_coord = Q^T y`` in the orthonormal basis
    ``Q`` of span(Z). Norms of projected residuals are identical in both
    representations, so solvers work in ``d`` rather than ``n`` rows.

    Attributes
    ----------
    x_proj : ndarray of shape (n, p)
    y_proj : ndarray of shape (n,)
    gamma_hat : ndarray of shape (d, p)
        First-stage least-squares coefficient of X on Z.
    sigma_z_hat : ndarray of shape (d, d)
        Uncentered instrument second moment ``Z^T Z / n``.
    qr_rank : int
    x_coord : ndarray of shape (d, p)
    y_coord : ndarray of shape (d,)
    """

    x_proj: np.ndarray
    y_proj: np.ndarray
    gamma_hat: np.ndarray
    sigma_z_hat: np.ndarray
    qr_rank: int
    x_coord: np.ndarray
    y_coord: np.ndarray

    @property
    def n(self) -> int:
        return self.x_proj.shape[0]

    @property
    def p(self) -> int:
        return self.x_proj.shape[1]

    @property
    def d(self) -> int:
        return self.x_coord.shape[0]

    def first_stage_gram(self) -> np.ndarray:
        """Return ``gamma_hat^T sigma_z_hat gamma_hat`` (equals ``X~^T X~ / n``)."""
        g = self.x_coord.T @ self.x_coord / self.n
        return 0.5 * (g + g.T)


@dataclass(frozen=True)
class Diagnostics:
    """Solver report attached to every :class:`Estimate`.

    ``final_gradient_norm`` is the norm of the (smoothed) objective gradient
    at the returned point. When the minimizer sits at the non-differentiable
    point of zero projected residual, ``at_kink`` is true and the reported
    norm is the distance from zero to the subdifferential, which is 0 for a
    certified minimizer.
    """

    iterations: int = 0
    final_gradient_norm: float = 0.0
    objective: float = float("nan")
    converged: bool = True
    at_kink: bool = False
    extra: Mapping[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "objective": self.objective,
            "converged": self.converged,
            "at_kink": self.at_kink,
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class Estimate:
    """A fitted coefficient vector with its provenance."""

    beta: np.ndarray
    kind: str
    rho: float | None = None
    kappa: float | None = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if not np.all(np.isfinite(beta)):
            raise NonFinite(f"{self.kind} produced a non-finite coefficient")
        object.__setattr__(self, "beta", _frozen(beta))


def validate_dataset(data: IVDataset) -> IVDataset:
    """Check shapes, identification order and finiteness.

    Parameters
    ----------
    data : IVDataset

    Returns
    -------
    IVDataset
        The same object, unchanged.

    Raises
    ------
    DimensionMismatch
        If ``y``, ``x`` and ``z`` do not share a row count.
    UnderIdentified
        If there are fewer instruments than regressors, or fewer rows than
        instruments.
    NonFinite
        If any entry is NaN or infinite.
    """
    n = data.y.shape[0]
    if data.x.shape[0] != n or data.z.shape[0] != n:
        raise DimensionMismatch(
            f"row counts differ: y has {n}, x has {data.x.shape[0]}, "
            f"z has {data.z.shape[0]}")
    if data.p < 1:
        raise DimensionMismatch("x has no columns")
    if data.d < data.p:
        raise UnderIdentified(
            f"{data.d} instrument(s) for {data.p} endogenous regressor(s)")
    if n < data.d:
        raise UnderIdentified(f"n={n} rows is fewer than d={data.d} instruments")
    for name in ("y", "x", "z"):
        if not np.all(np.isfinite(getattr(data, name))):
            raise NonFinite(f"{name} contains NaN or infinite entries")
    return data


def numerical_rank(singular_values: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Count singular values above ``rtol`` times the largest one."""
    s = np.asarray(singular_values)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def project_onto_instruments(data: IVDataset) -> ProjectedDesign:
    """Project regressors and outcome onto span(Z) with a thin QR factorization.

    Parameters
    ----------
    data : IVDataset

    Returns
    -------
    ProjectedDesign

    Raises
    ------
    RankDeficientInstruments
        If the numerical rank of Z is below its column count.
    """
    validate_dataset(data)
    z = data.z
    q, r = np.linalg.qr(z, mode="reduced")
    sv = np.linalg.svd(r, compute_uv=False)
    rank = numerical_rank(sv)
    if rank < data.d:
        raise RankDeficientInstruments(
            f"instrument matrix has numerical rank {rank} < d={data.d}")
    x_coord = q.T @ data.x
    y_coord = q.T @ data.y
    gamma_hat = np.linalg.solve(r, x_coord)
    sigma = z.T @ z / data.n
    return ProjectedDesign(
        x_proj=_frozen(q @ x_coord),
        y_proj=_frozen(q @ y_coord),
        gamma_hat=_frozen(gamma_hat),
        sigma_z_hat=_frozen(0.5 * (sigma + sigma.T)),
        qr_rank=rank,
        x_coord=_frozen(x_coord),
        y_coord=_frozen(y_coord),
    )


def apply_projection(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Return ``Pi_Z m`` for an arbitrary array ``m`` with ``len(z)`` rows."""
    q, _ = np.linalg.qr(np.asarray(z, dtype=float), mode="reduced")
    return q @ (q.T @ m)
