"""Classical classifiers for the hybrid path."""

from dentalxr.classical.forest import Forest, fit_forest
from dentalxr.classical.hybrid import (
    CLASSIFIERS,
    HybridClassifier,
    fit_classifier,
    load_classifier,
    save_classifier,
)
from dentalxr.classical.scaler import Scaler, scaler_fit_transform
from dentalxr.classical.svm import BinarySvm, OneVsOneSvm, fit_binary, fit_ovo, kkt_residuals, rbf_kernel
from dentalxr.classical.tree import DecisionTree, fit_tree, gini

__all__ = [
    "BinarySvm",
    "CLASSIFIERS",
    "DecisionTree",
    "Forest",
    "HybridClassifier",
    "OneVsOneSvm",
    "Scaler",
    "fit_binary",
    "fit_classifier",
    "fit_forest",
    "fit_ovo",
    "fit_tree",
    "gini",
    "kkt_residuals",
    "load_classifier",
    "rbf_kernel",
    "save_classifier",
    "scaler_fit_transform",
]
