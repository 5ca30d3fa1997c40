"""Per-feature standardisation."""

from dataclasses import dataclass

import numpy as np

from dentalxr.errors import ShapeError, ValidationError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = _matrix(X)
        if X.shape[0] < 2:
            raise ValidationError(f"standardisation needs at least 2 rows, got {X.shape[0]}")
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, X):
        X = _matrix(X)
        if X.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"scaler was fit on {self.mean.shape[0]} features, got {X.shape[1]}", axis=1)
        return (X - self.mean) / self.std


def _matrix(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got shape {X.shape}", axis="rank")
    if X.size == 0:
        raise ValidationError("feature matrix is empty")
    return X


def scaler_fit_transform(X):
    scaler = Scaler.fit(X)
    return scaler, scaler.transform(X)
