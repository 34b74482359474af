"""scikit-learn style wrapper shared by the estimator classes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core import Estimate, IVDataset, validate_dataset
from .exceptions import DimensionMismatch


def check_iv_arrays(X, y, Z=None) -> IVDataset:
    """Assemble and validate an :class:`IVDataset` from array inputs.

    When ``Z`` is omitted the regressors serve as their own instruments,
    which is the right convention for OLS-type estimators.
    """
    data = IVDataset(y=y, x=X, z=X if Z is None else Z)
    return validate_dataset(data)


class IVRegressor(RegressorMixin, BaseEstimator):
    """Linear model without intercept fitted from ``(X, y, Z)``.

    Subclasses implement ``_fit_dataset(data) -> Estimate``. After ``fit``
    the instance exposes ``coef_``, ``estimate_`` and ``n_features_in_``.
    """

    def fit(self, X, y, Z=None):
        """Fit the model.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Endogenous regressors.
        y : array-like of shape (n_samples,)
        Z : array-like of shape (n_samples, n_instruments), optional
            Instruments. Required by IV estimators.

        Returns
        -------
        self
        """
        data = check_iv_arrays(X, y, Z)
        self.estimate_: Estimate = self._fit_dataset(data)
        self.coef_ = np.array(self.estimate_.beta)
        self.n_features_in_ = data.p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.coef_.size:
            raise DimensionMismatch(
                f"X has {X.shape[1]} columns, model was fitted with {self.coef_.size}")
        return X @ self.coef_

    def _fit_dataset(self, data: IVDataset) -> Estimate:  # pragma: no cover
        raise NotImplementedError
