"""CART classification tree with Gini impurity.

Nodes live in flat arrays (``feature``, ``threshold``, ``left``, ``right``,
``counts``). A leaf has ``feature == -1``. Samples with
``x[feature] <= threshold`` go left.
"""

from dataclasses import dataclass

import numpy as np

from dentalxr.errors import ParameterError, ShapeError, ValidationError

# two weighted impurities closer than this count as equal for tie-breaking
TIE_TOLERANCE = 1e-12
# bound on (samples x features x classes) cells evaluated in one numpy pass
_CHUNK_CELLS = 1 << 22


def gini(counts):
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    return 0.0 if n == 0 else 1.0 - float(np.sum((counts / n) ** 2))


def check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got shape {X.shape}", axis="rank")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} rows but {len(y)} labels", axis=0)
    if len(y) == 0:
        raise ValidationError("cannot fit on an empty dataset")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
        raise ValidationError("labels must be non-negative integers")
    return X, y.astype(np.int64)


def best_split(X, y, idx, features, n_classes):
    """Lowest weighted child Gini over ``features`` for rows ``idx``.

    Returns (impurity, feature, threshold) or None when no two distinct
    values exist. Ties go to the lower feature index, then the lower
    threshold.
    """
    n = len(idx)
    yn = y[idx]
    best = None
    step = max(1, _CHUNK_CELLS // max(1, n * n_classes))
    for start in range(0, len(features), step):
        feats = features[start:start + step]
        vals = X[np.ix_(idx, feats)]
        order = np.argsort(vals, axis=0, kind="stable")
        sv = np.take_along_axis(vals, order, axis=0)
        onehot = np.zeros((n, len(feats), n_classes))
        np.put_along_axis(onehot, yn[order][..., None], 1.0, axis=2)
        left = np.cumsum(onehot, axis=0)[:-1]
        right = left[-1:] + onehot[-1:] - left
        n_left = np.arange(1, n, dtype=np.float64)[:, None]
        score = (left ** 2).sum(axis=2) / n_left + (right ** 2).sum(axis=2) / (n - n_left)
        impurity = np.where(sv[:-1] < sv[1:], 1.0 - score / n, np.inf)
        low = impurity.min()
        # chunks arrive in feature order, so a later chunk must be strictly better
        if low == np.inf or (best is not None and low >= best[0] - TIE_TOLERANCE):
            continue
        rows, cols = np.nonzero(impurity <= low + TIE_TOLERANCE)
        col = cols.min()
        row = rows[cols == col].min()
        lo, hi = sv[row, col], sv[row + 1, col]
        threshold = (lo + hi) / 2
        if not lo <= threshold < hi:
            threshold = lo
        best = (float(impurity[row, col]), int(feats[col]), float(threshold))
    return best


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def n_classes(self):
        return self.counts.shape[1]

    @property
    def leaf_labels(self):
        return np.argmax(self.counts, axis=1)

    def apply(self, X):
        """Leaf index reached by every row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active[rows] = self.feature[node[rows]] >= 0
        return node

    def predict(self, X):
        return self.leaf_labels[self.apply(X)]

    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


def fit_tree(X, y, min_samples_split=2, max_depth=None, max_features=None, rng=None, n_classes=None,
             sample_idx=None):
    """Grow a CART tree greedily until leaves are pure, too small, or have no two
    distinct values on the searched features.

    ``max_features`` limits each node's search to that many features drawn
    with ``rng`` (an RngState); None searches all of them. ``sample_idx``
    (row indices, repeats allowed) selects the training rows, which is how
    bootstrap samples are passed without copying ``X``.
    """
    X, y = check_xy(X, y)
    if min_samples_split < 2:
        raise ParameterError(f"min_samples_split must be >= 2, got {min_samples_split}")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    d = X.shape[1]
    if max_features is not None and not 1 <= max_features <= d:
        raise ParameterError(f"max_features must be in [1, {d}], got {max_features}")
    if max_features is not None and rng is None:
        raise ParameterError("feature subsampling needs an RngState")
    all_features = np.arange(d)

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root_idx = np.arange(len(y)) if sample_idx is None else np.asarray(sample_idx, dtype=np.int64)
    stack = [(new_node(root_idx), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if len(idx) < min_samples_split or np.count_nonzero(c) <= 1:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        if max_features is None:
            feats = all_features
        else:
            feats = np.sort(rng.choice(d, max_features, replace=False))
        split = best_split(X, y, idx, feats, n_classes)
        # a split whose children are no purer is still taken: XOR-like nodes need
        # one to make progress, and weighted Gini can never exceed the parent's
        if split is None:
            continue
        _, f, t = split
        mask = X[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, t
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # left subtree is expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(counts, dtype=np.int64).reshape(-1, n_classes))
