"""RBF-kernel support vector machine trained by SMO, with one-vs-one voting.

The binary solver works on the dual

    max  sum(a) - 1/2 sum_ij a_i a_j y_i y_j K(x_i, x_j)
    s.t. 0 <= a_i <= C,  sum(a_i y_i) = 0

and picks the maximal violating pair at every step. It stops when the
largest KKT violation gap drops below ``tol`` or after ``max_iter`` steps.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from dentalxr.errors import ParameterError, ShapeError, ValidationError

TAU = 1e-12


def scale_gamma(X):
    """1 / (n_features * variance of all entries); 1.0 for a constant matrix."""
    X = np.asarray(X, dtype=np.float64)
    var = X.var()
    return 1.0 / (X.shape[1] * var) if var > 0 else 1.0


def rbf_kernel(A, B, gamma):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    intercept: float
    gamma: float
    C: float
    converged: bool = True
    iterations: int = 0
    objective: list = field(default_factory=list, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)  # full multiplier vector, kept after fitting

    def decision_function(self, X):
        if len(self.dual_coef) == 0:
            return np.full(len(X), self.intercept)
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.dual_coef + self.intercept

    def predict(self, X):
        """+1 where the decision value is positive, else -1."""
        return np.where(self.decision_function(X) > 0, 1, -1)


def kkt_residuals(alpha, y, f, C):
    """Per-sample violation of the KKT conditions given decision values ``f``."""
    margin = y * f
    res = np.abs(margin - 1.0)
    at_zero = alpha <= 0
    at_c = alpha >= C
    res[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    res[at_c] = np.maximum(0.0, margin[at_c] - 1.0)
    return res


def smo(K, y, C=1.0, tol=1e-3, max_iter=None):
    """Solve the dual for a precomputed kernel matrix.

    Returns (alpha, b, converged, iterations, objective history). The
    objective is the dual value after every step.
    """
    n = len(y)
    y = y.astype(np.float64)
    max_iter = 100 * n if max_iter is None else max_iter
    alpha = np.zeros(n)
    # gradient of 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij
    grad = -np.ones(n)
    objective = [0.0]
    converged = False
    it = 0
    diag = np.diag(K)
    while True:
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        gap = score[i] - score[j]
        if gap < tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], TAU)
        # move a_i by y_i*t and a_j by -y_j*t, keeping sum(a y) fixed
        t = gap / eta
        t = min(t, C - alpha[i] if y[i] > 0 else alpha[i])
        t = min(t, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        grad += y * t * (K[:, i] - K[:, j])
        objective.append(float(alpha.sum() - 0.5 * alpha @ (grad + 1.0)))

    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(score[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        hi = score[up].max() if up.any() else score[low].min()
        lo = score[low].min() if low.any() else hi
        b = float((hi + lo) / 2)
    return alpha, b, converged, it, objective


def fit_binary(X, y, C=1.0, gamma="scale", tol=1e-3, max_iter=None):
    """Fit one binary SVM; ``y`` holds -1/+1 labels."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"expected (N, D) features and N labels, got {X.shape} and {y.shape}", axis=0)
    if not set(np.unique(y)) <= {-1, 1}:
        raise ValidationError("binary SVM labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise ValidationError("binary SVM needs both classes present")
    if not C > 0:
        raise ParameterError(f"C must be positive, got {C}")
    g = scale_gamma(X) if gamma == "scale" else float(gamma)
    K = rbf_kernel(X, X, g)
    alpha, b, converged, iterations, objective = smo(K, y, C, tol, max_iter)
    sv = alpha > 0
    return BinarySvm(X[sv].copy(), (alpha * y)[sv], b, g, C, converged, iterations, objective, alpha)


@dataclass
class OneVsOneSvm:
    """Binary models keyed by class pair (a, b), a < b; a positive decision votes a."""

    pairs: dict
    n_classes: int
    gamma: float
    C: float

    @property
    def converged(self):
        return all(m.converged for m in self.pairs.values())

    def votes(self, X):
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((len(X), self.n_classes), dtype=np.int64)
        for a, b in combinations(range(self.n_classes), 2):
            if (a, b) not in self.pairs:
                raise ValidationError(f"one-vs-one model has no classifier for classes ({a}, {b})")
            positive = self.pairs[(a, b)].decision_function(X) > 0
            votes[:, a] += positive
            votes[:, b] += ~positive
        return votes

    def predict(self, X):
        """Most votes wins; ties go to the lowest class index."""
        return np.argmax(self.votes(X), axis=1)


def fit_ovo(X, y, C=1.0, gamma="scale", tol=1e-3, max_iter=None, n_classes=None):
    """One binary SVM per class pair. ``gamma="scale"`` is computed once from
    the full training matrix and shared by every pair."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    missing = [c for c in range(n_classes) if not np.any(y == c)]
    if missing:
        raise ValidationError(f"one-vs-one SVM needs every class present; missing {missing}")
    g = scale_gamma(X) if gamma == "scale" else float(gamma)
    pairs = {}
    for a, b in combinations(range(n_classes), 2):
        rows = (y == a) | (y == b)
        pairs[(a, b)] = fit_binary(X[rows], np.where(y[rows] == a, 1, -1), C, g, tol, max_iter)
    return OneVsOneSvm(pairs, n_classes, g, C)
