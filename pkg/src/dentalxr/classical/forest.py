"""Random forest of CART trees with majority voting."""

import math
from dataclasses import dataclass

import numpy as np

from dentalxr.classical.tree import check_xy, fit_tree
from dentalxr.errors import ParameterError
from dentalxr.tensor.rng import RngState

N_TREES = 100


def resolve_max_features(rule, d):
    if rule is None:
        return d
    if rule in ("sqrt", "auto"):
        return max(1, math.isqrt(d))
    if isinstance(rule, int) and 1 <= rule <= d:
        return rule
    raise ParameterError(f"max_features must be 'sqrt', None or an int in [1, {d}], got {rule!r}")


@dataclass
class Forest:
    trees: list
    seed: int
    max_features: int
    n_classes: int

    def votes(self, X):
        """(N, n_classes) vote counts."""
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((len(X), self.n_classes), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            np.add.at(votes, (rows, tree.predict(X)), 1)
        return votes

    def predict(self, X):
        """Most-voted class; ties go to the lowest class index."""
        return np.argmax(self.votes(X), axis=1)


def fit_forest(X, y, n_trees=N_TREES, max_features="sqrt", seed=0, min_samples_split=2, max_depth=None,
               bootstrap=True, n_classes=None):
    """Tree ``t`` draws its bootstrap rows and per-node features from the stream
    seeded with ``seed + t``. ``bootstrap=False`` trains every tree on the
    full data (used to check the degenerate one-tree case)."""
    X, y = check_xy(X, y)
    if n_trees < 1:
        raise ParameterError(f"n_trees must be >= 1, got {n_trees}")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    k = resolve_max_features(max_features, X.shape[1])
    n = len(y)
    trees = []
    for t in range(n_trees):
        rng = RngState(seed + t)
        rows = rng.integers(0, n, size=n) if bootstrap else None
        trees.append(fit_tree(X, y, min_samples_split, max_depth, k, rng, n_classes, sample_idx=rows))
    return Forest(trees, seed, k, n_classes)
