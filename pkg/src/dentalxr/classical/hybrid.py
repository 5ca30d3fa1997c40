"""Standardise-then-classify models used on extracted CNN features, and
their archive format."""

from dataclasses import dataclass

import numpy as np

from dentalxr.archive import load_archive, save_archive
from dentalxr.classical.forest import Forest, fit_forest
from dentalxr.classical.scaler import Scaler
from dentalxr.classical.svm import BinarySvm, OneVsOneSvm, fit_ovo
from dentalxr.classical.tree import DecisionTree, fit_tree
from dentalxr.errors import ArchiveError, ParameterError
from dentalxr.labels import NUM_CLASSES

CLASSIFIERS = ("dt", "rf", "svm")
FORMAT_VERSION = "1"
_TREE_FIELDS = ("feature", "threshold", "left", "right", "counts")


@dataclass
class HybridClassifier:
    kind: str
    scaler: Scaler
    model: object

    def predict(self, features):
        return self.model.predict(self.scaler.transform(features))


def fit_classifier(kind, features, labels, seed=0, n_classes=NUM_CLASSES, **options):
    """Standardise ``features`` and fit a decision tree, forest or SVM."""
    if kind not in CLASSIFIERS:
        raise ParameterError(f"classifier must be one of {CLASSIFIERS}, got {kind!r}")
    scaler = Scaler.fit(features)
    X = scaler.transform(features)
    y = np.asarray(labels, dtype=np.int64)
    if kind == "dt":
        model = fit_tree(X, y, n_classes=n_classes, **options)
    elif kind == "rf":
        model = fit_forest(X, y, seed=seed, n_classes=n_classes, **options)
    else:
        model = fit_ovo(X, y, n_classes=n_classes, **options)
    return HybridClassifier(kind, scaler, model)


def _tree_arrays(prefix, tree):
    return {f"{prefix}{f}": getattr(tree, f) for f in _TREE_FIELDS}


def _tree_from(arrays, prefix):
    return DecisionTree(*(arrays[f"{prefix}{f}"] for f in _TREE_FIELDS))


def save_classifier(path, clf):
    arrays = {"scaler/mean": clf.scaler.mean, "scaler/std": clf.scaler.std}
    meta = {"format": "hybrid-classifier", "version": FORMAT_VERSION, "kind": clf.kind}
    m = clf.model
    if clf.kind == "dt":
        arrays.update(_tree_arrays("tree/", m))
    elif clf.kind == "rf":
        meta.update(trees=str(len(m.trees)), seed=str(m.seed), max_features=str(m.max_features),
                    n_classes=str(m.n_classes))
        for t, tree in enumerate(m.trees):
            arrays.update(_tree_arrays(f"tree{t:03d}/", tree))
    else:
        meta.update(gamma=repr(float(m.gamma)), C=repr(float(m.C)), n_classes=str(m.n_classes))
        for (a, b), pair in m.pairs.items():
            p = f"pair{a}{b}/"
            arrays[p + "support_vectors"] = pair.support_vectors
            arrays[p + "dual_coef"] = pair.dual_coef
            arrays[p + "intercept"] = np.array(pair.intercept)
            arrays[p + "converged"] = np.array(int(pair.converged))
    return save_archive(path, arrays, meta)


def load_classifier(path):
    arrays, meta = load_archive(path)
    if meta.get("format") != "hybrid-classifier":
        raise ArchiveError(f"{path}: not a hybrid classifier archive")
    if meta.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported classifier format version {meta.get('version')}")
    try:
        scaler = Scaler(arrays["scaler/mean"], arrays["scaler/std"])
        kind = meta["kind"]
        if kind == "dt":
            model = _tree_from(arrays, "tree/")
        elif kind == "rf":
            trees = [_tree_from(arrays, f"tree{t:03d}/") for t in range(int(meta["trees"]))]
            model = Forest(trees, int(meta["seed"]), int(meta["max_features"]), int(meta["n_classes"]))
        elif kind == "svm":
            gamma, C, k = float(meta["gamma"]), float(meta["C"]), int(meta["n_classes"])
            pairs = {}
            for a in range(k):
                for b in range(a + 1, k):
                    p = f"pair{a}{b}/"
                    pairs[(a, b)] = BinarySvm(arrays[p + "support_vectors"], arrays[p + "dual_coef"],
                                              float(arrays[p + "intercept"]), gamma, C,
                                              bool(arrays[p + "converged"]))
            model = OneVsOneSvm(pairs, k, gamma, C)
        else:
            raise ArchiveError(f"{path}: unknown classifier kind {kind!r}")
    except KeyError as exc:
        raise ArchiveError(f"{path}: classifier archive is missing {exc.args[0]}") from None
    return HybridClassifier(kind, scaler, model)
