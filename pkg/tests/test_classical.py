import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dentalxr.classical import (
    BinarySvm,
    OneVsOneSvm,
    Scaler,
    fit_binary,
    fit_classifier,
    fit_forest,
    fit_ovo,
    fit_tree,
    gini,
    kkt_residuals,
    load_classifier,
    rbf_kernel,
    save_classifier,
    scaler_fit_transform,
)
from dentalxr.classical.forest import resolve_max_features
from dentalxr.classical.svm import scale_gamma
from dentalxr.errors import ShapeError, ValidationError
from dentalxr.synthetic import blobs, xor_corners
from dentalxr.tensor import RngState

from oracles import svm_dual_projected_gradient


# --- scaler --------------------------------------------------------------

def test_scaler_examples():
    _, Z = scaler_fit_transform([[0.0, 5.0], [2.0, 5.0]])
    assert Z[:, 0].tolist() == [-1.0, 1.0]
    assert Z[:, 1].tolist() == [0.0, 0.0]


def test_scaler_recomputed_moments():
    X = np.random.default_rng(0).normal(3.0, 7.0, size=(200, 12))
    scaler, Z = scaler_fit_transform(X)
    assert np.abs(Z.mean(axis=0)).max() < 1e-6
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(scaler.transform(X[:5]), Z[:5])


def test_scaler_rejects_empty_and_width_mismatch():
    with pytest.raises(ValidationError):
        Scaler.fit(np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        Scaler.fit(np.ones((4, 3))).transform(np.ones((2, 2)))


# --- decision tree -------------------------------------------------------

def test_single_class_gives_single_leaf():
    tree = fit_tree(np.random.default_rng(1).random((10, 3)), np.full(10, 2))
    assert tree.n_nodes == 1 and tree.predict(np.zeros((1, 3))).tolist() == [2]


def test_hand_split_example():
    tree = fit_tree([[1.0], [2.0], [3.0], [4.0]], [0, 0, 1, 1])
    assert tree.feature[0] == 0 and tree.threshold[0] == 2.5
    assert tree.predict([[1.0], [2.0], [3.0], [4.0]]).tolist() == [0, 0, 1, 1]


def test_split_ties_prefer_lower_feature_then_threshold():
    # both features separate the classes perfectly; feature 0 must win
    X = np.array([[0.0, 10.0], [1.0, 11.0], [2.0, 12.0], [3.0, 13.0]])
    tree = fit_tree(X, [0, 0, 1, 1])
    assert tree.feature[0] == 0
    # y = 0 1 0 1: every cut has the same weighted Gini except none; lowest threshold wins
    tree = fit_tree([[1.0], [2.0], [3.0], [4.0]], [0, 1, 1, 0])
    assert tree.threshold[0] == 1.5


def test_xor_is_fit_exactly():
    X, y = xor_corners()
    assert (fit_tree(X, y).predict(X) == y).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(1, 5), st.integers(2, 4), st.integers(0, 2**31))
def test_consistent_data_fit_perfectly(n, d, k, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(n, d)).astype(float)
    # labels as a function of the row make the set consistent even with duplicate rows
    keys = [tuple(r) for r in X]
    table = {key: int(rng.integers(0, k)) for key in keys}
    y = np.array([table[key] for key in keys])
    tree = fit_tree(X, y)
    assert (tree.predict(X) == y).all()


def test_chosen_splits_never_increase_weighted_gini():
    X, y = blobs(40, [[0, 0], [2, 0], [0, 2], [2, 2]], std=1.0, seed=3)
    tree = fit_tree(X, y)
    for node in range(tree.n_nodes):
        if tree.feature[node] < 0:
            continue
        parent = tree.counts[node]
        lc, rc = tree.counts[tree.left[node]], tree.counts[tree.right[node]]
        weighted = (lc.sum() * gini(lc) + rc.sum() * gini(rc)) / parent.sum()
        assert weighted <= gini(parent) + 1e-12
        assert lc.sum() > 0 and rc.sum() > 0


def test_leaf_tie_goes_to_lowest_class():
    # identical rows with conflicting labels cannot be split
    tree = fit_tree([[1.0], [1.0], [1.0], [1.0]], [3, 1, 3, 1])
    assert tree.predict([[1.0]]).tolist() == [1]


def test_tree_length_mismatch_rejected():
    with pytest.raises(ShapeError):
        fit_tree(np.zeros((3, 2)), [0, 1])


# --- forest --------------------------------------------------------------

def test_one_tree_without_bootstrap_equals_tree():
    X, y = blobs(30, [[0, 0, 0], [1, 1, 0], [0, 1, 1], [1, 0, 1]], std=0.6, seed=4)
    probe = np.random.default_rng(5).normal(0.5, 1.0, size=(300, 3))
    forest = fit_forest(X, y, n_trees=1, max_features=None, bootstrap=False, seed=0)
    np.testing.assert_array_equal(forest.predict(probe), fit_tree(X, y).predict(probe))


def test_max_features_rule():
    assert resolve_max_features("sqrt", 256) == 16
    assert resolve_max_features("sqrt", 36864) == 192
    assert resolve_max_features("sqrt", 3) == 1
    assert resolve_max_features(None, 7) == 7


def test_forest_has_t_trees_and_is_deterministic():
    X, y = blobs(20, [[0, 0], [3, 3], [0, 3], [3, 0]], seed=6)
    probe = np.random.default_rng(7).normal(1.5, 2.0, size=(100, 2))
    a = fit_forest(X, y, seed=11)
    b = fit_forest(X, y, seed=11)
    assert len(a.trees) == 100
    np.testing.assert_array_equal(a.predict(probe), b.predict(probe))


def test_forest_vote_order_invariant():
    X, y = blobs(20, [[0, 0], [2, 2], [0, 2], [2, 0]], seed=8)
    forest = fit_forest(X, y, n_trees=15, seed=2)
    probe = np.random.default_rng(9).normal(1.0, 1.5, size=(200, 2))
    before = forest.predict(probe)
    forest.trees.reverse()
    np.testing.assert_array_equal(forest.predict(probe), before)


def blob_benchmark(seed, d=8, n_train=60, n_test=200):
    centers = RngState(seed).child("centers").generator.normal(scale=2.0, size=(4, d))
    Xtr, ytr = blobs(n_train, centers, 1.0, seed=seed)
    Xte, yte = blobs(n_test, centers, 1.0, seed=seed + 1000)
    return Xtr, ytr, Xte, yte


def test_forest_beats_single_tree_on_blobs():
    wins = 0
    for seed in range(10):
        Xtr, ytr, Xte, yte = blob_benchmark(seed)
        tree_acc = np.mean(fit_tree(Xtr, ytr).predict(Xte) == yte)
        forest_acc = np.mean(fit_forest(Xtr, ytr, seed=seed).predict(Xte) == yte)
        wins += forest_acc >= tree_acc
    assert wins >= 8


# --- SVM -----------------------------------------------------------------

def _separable_blobs(seed=1):
    X, y = blobs(40, [[0, 0], [4, 4]], std=0.7, seed=seed)
    return X, np.where(y == 0, 1, -1)


def test_svm_separable_blobs_kkt_and_accuracy():
    X, y = _separable_blobs()
    model = fit_binary(X, y)
    assert model.converged
    assert (model.predict(X) == y).all()
    assert kkt_residuals(model.alpha, y, model.decision_function(X), model.C).max() < 1e-3
    assert ((model.alpha >= 0) & (model.alpha <= model.C)).all()


def test_svm_dual_matches_projected_gradient_oracle():
    X, y = _separable_blobs(seed=2)
    X, y = X[:30], y[:30]
    model = fit_binary(X, y)
    K = rbf_kernel(X, X, model.gamma)
    _, oracle_value = svm_dual_projected_gradient(K, y, model.C)
    smo_value = model.objective[-1]
    assert smo_value == pytest.approx(oracle_value, rel=1e-3)


def test_svm_xor_corners():
    X, y = xor_corners()
    yb = np.where(y == 1, 1, -1)
    model = fit_binary(X, yb)
    assert (model.predict(X) == yb).all()
    assert kkt_residuals(model.alpha, yb, model.decision_function(X), model.C).max() < 1e-3


def test_svm_dual_objective_non_decreasing():
    X, y = blobs(50, [[0, 0], [1.5, 1.5]], std=1.0, seed=3)
    model = fit_binary(X, np.where(y == 0, 1, -1))
    assert np.all(np.diff(model.objective) >= -1e-12)


def test_svm_duplicated_points_keep_sign_pattern():
    """Duplicating the data leaves the solution unchanged while no multiplier sits at C
    (a bound multiplier would effectively see its box doubled)."""
    X, y = blobs(40, [[0, 0], [6, 6]], std=0.7, seed=0)
    y = np.where(y == 0, 1, -1)
    grid = np.stack(np.meshgrid(np.linspace(-2, 8, 25), np.linspace(-2, 8, 25)), axis=-1).reshape(-1, 2)
    single = fit_binary(X, y)
    assert single.alpha.max() < single.C
    double = fit_binary(np.concatenate([X, X]), np.concatenate([y, y]))
    assert single.gamma == double.gamma
    np.testing.assert_array_equal(single.predict(grid), double.predict(grid))


def test_svm_gamma_scale():
    X = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert scale_gamma(X) == pytest.approx(1 / (2 * 1.0))
    assert scale_gamma(np.ones((3, 2))) == 1.0


def test_svm_single_class_rejected():
    with pytest.raises(ValidationError):
        fit_binary(np.zeros((3, 2)), [1, 1, 1])


def test_svm_iteration_cap_flags_non_convergence():
    X, y = blobs(30, [[0, 0], [0.5, 0.5]], std=1.0, seed=5)
    model = fit_binary(X, np.where(y == 0, 1, -1), max_iter=3)
    assert not model.converged and model.iterations == 3


def _constant_pair(value):
    return BinarySvm(np.zeros((0, 2)), np.zeros(0), value, 1.0, 1.0)


def test_ovo_votes_and_ties():
    # every pair (a, b) votes for 2 whenever 2 is in the pair; otherwise for the lower class
    pairs = {(a, b): _constant_pair(-1.0 if b == 2 else 1.0) for a in range(4) for b in range(a + 1, 4)}
    pairs[(2, 3)] = _constant_pair(1.0)
    model = OneVsOneSvm(pairs, 4, 1.0, 1.0)
    assert model.predict(np.zeros((1, 2))).tolist() == [2]
    # classes 1 and 3 tie on two votes each
    tie = {(0, 1): -1.0, (0, 2): 1.0, (0, 3): -1.0, (1, 2): 1.0, (1, 3): -1.0, (2, 3): 1.0}
    model = OneVsOneSvm({k: _constant_pair(v) for k, v in tie.items()}, 4, 1.0, 1.0)
    assert model.votes(np.zeros((1, 2))).tolist() == [[1, 2, 1, 2]]
    assert model.predict(np.zeros((1, 2))).tolist() == [1]


def test_ovo_missing_pair_rejected():
    pairs = {(a, b): _constant_pair(1.0) for a in range(4) for b in range(a + 1, 4)}
    del pairs[(1, 3)]
    with pytest.raises(ValidationError):
        OneVsOneSvm(pairs, 4, 1.0, 1.0).predict(np.zeros((1, 2)))


def test_ovo_well_separated_blobs():
    centers = 10 * np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    X, y = blobs(50, centers, std=1.0, seed=6)
    Xte, yte = blobs(100, centers, std=1.0, seed=7)
    model = fit_ovo(X, y)
    assert np.mean(model.predict(Xte) == yte) >= 0.99
    assert len(model.pairs) == 6


def test_ovo_shares_gamma_across_pairs():
    X, y = blobs(10, [[0, 0], [3, 0], [0, 3], [3, 3]], seed=8)
    model = fit_ovo(X, y)
    assert {p.gamma for p in model.pairs.values()} == {scale_gamma(X)}


# --- hybrid wrapper and persistence --------------------------------------

@pytest.mark.parametrize("kind", ["dt", "rf", "svm"])
def test_classifier_archive_round_trip(kind, tmp_path):
    X, y = blobs(25, [[0, 0, 1], [2, 0, 0], [0, 2, 0], [2, 2, 2]], std=0.8, seed=9)
    options = {"n_trees": 10} if kind == "rf" else {}
    clf = fit_classifier(kind, X, y, seed=3, **options)
    save_classifier(tmp_path / "clf", clf)
    loaded = load_classifier(tmp_path / "clf")
    probe = np.random.default_rng(10).normal(1.0, 1.5, size=(200, 3))
    np.testing.assert_array_equal(loaded.predict(probe), clf.predict(probe))


def test_classifiers_are_deterministic():
    X, y = blobs(25, [[0, 0], [2, 0], [0, 2], [2, 2]], seed=11)
    probe = np.random.default_rng(12).normal(1.0, 1.5, size=(100, 2))
    for kind in ("dt", "rf", "svm"):
        a = fit_classifier(kind, X, y, seed=5).predict(probe)
        b = fit_classifier(kind, X, y, seed=5).predict(probe)
        np.testing.assert_array_equal(a, b)


def test_gini_values():
    assert gini([5, 0, 0, 0]) == 0.0
    assert gini([1, 1, 1, 1]) == pytest.approx(0.75)
    assert math.isclose(gini([2, 1]), 1 - (4 + 1) / 9)
