"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class DriveIVError(Exception):
    """Base class for all errors raised by ``drive_iv``."""


class ValidationError(DriveIVError, ValueError):
    """Input failed a structural or range check."""


class DimensionMismatch(ValidationError):
    """Arrays that must share a dimension do not."""


class UnderIdentified(ValidationError):
    """Fewer instruments than endogenous regressors."""


class NonFinite(ValidationError):
    """An input array contains NaN or infinite entries."""


class RankDeficientInstruments(ValidationError):
    """The instrument matrix has numerical rank below its column count."""


class SingularDesign(ValidationError):
    """The regressor matrix (or a k-class Gram matrix) is singular."""


class SingularProjectedDesign(ValidationError):
    """The projected regressors are rank deficient (weak or collinear instruments)."""


class NonPositiveWeight(ValidationError):
    """A GMM weight matrix is not positive definite."""


class UnsupportedPair(ValidationError):
    """Two models differ in a way the shift computation does not cover."""


class SingularGram(ValidationError):
    """The first-stage Gram matrix is singular."""


class EmptySample(ValidationError):
    """A sample passed to a distribution comparison is empty."""


class MissingColumn(ValidationError, KeyError):
    """A requested column is absent from a tabular dataset."""

    def __str__(self) -> str:  # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class EmptyPartition(ValidationError):
    """A train or test partition contains no rows."""


class ZeroResiduals(ValidationError):
    """All residuals vanish so the score statistic is undefined."""


class SolverDidNotConverge(DriveIVError, RuntimeError):
    """An iterative solver hit its iteration cap above the gradient tolerance.

    Parameters
    ----------
    message : str
        Human readable description.
    rho : float, optional
        Penalty level at which the failure occurred, when known.
    gradient_norm : float, optional
        Final gradient norm reached.
    """

    def __init__(self, message: str, rho: float | None = None,
                 gradient_norm: float | None = None):
        super().__init__(message)
        self.rho = rho
        self.gradient_norm = gradient_norm

    def __str__(self):
        msg = super().__str__()
        return msg if self.rho is None else f"{msg} (rho={self.rho!r})"


class DualBracketFailure(DriveIVError, RuntimeError):
    """The one-dimensional dual search could not bracket its minimizer."""


class DegenerateGamma(DriveIVError, ArithmeticError):
    """The optimal dual multiplier sits on the boundary (zero in-sample loss)."""
