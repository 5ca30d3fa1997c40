"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced and repeated in the pytest
terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest

from dentalxr import dataset as ds
from dentalxr import preprocess as pp
from dentalxr.classical import fit_binary, fit_forest, fit_tree, kkt_residuals
from dentalxr.cli import main as cli_main
from dentalxr.evaluation import CVConfig, fit_hybrid, metrics, train_fold
from dentalxr.models import Network, build_custom_cnn, extract_features, fit, predict
from dentalxr.models.training import TrainConfig, validation_split
from dentalxr.preprocess import BBox
from dentalxr.synthetic import blobs, quadrant_patterns, write_radiograph_dataset, xor_corners
from dentalxr.tensor import BatchNormParams, LayerParams, RngState, Tensor, residual_block
from dentalxr.tensor import functional as F
from dentalxr.tensor.tensor import precision

from acceptance_log import LINES, record
from oracles import (
    central_difference,
    clahe_naive,
    conv2d_naive,
    dense_naive,
    depthwise_naive,
    gap_naive,
    maxpool_naive,
    median_naive,
    relative_error,
    resize_naive,
)
from test_classical import blob_benchmark


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# 1. oracle equivalence
# ---------------------------------------------------------------------------

def _kernel_errors(seed):
    rng = np.random.default_rng(1000 + seed)
    stride, padding = [(1, "valid"), (2, "same"), (1, "same"), (2, "valid")][seed % 4]
    x = rng.normal(size=(2, 7, 6, 3))
    k, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    d, p, pb = rng.normal(size=(3, 3, 3, 1)), rng.normal(size=(1, 1, 3, 5)), rng.normal(size=5)
    xd, w, bd = rng.normal(size=(4, 9)), rng.normal(size=(9, 3)), rng.normal(size=3)
    sep_oracle = conv2d_naive(depthwise_naive(x, d, stride) if padding == "valid" else
                              depthwise_naive(_pad_same(x, 3, stride), d, stride), p, pb)
    return {
        "conv2d": np.abs(F.conv2d(t64(x), t64(k), t64(b), stride, padding).data
                         - conv2d_naive(x, k, b, stride, padding)).max(),
        "dense": np.abs(F.dense(t64(xd), t64(w), t64(bd)).data - dense_naive(xd, w, bd)).max(),
        "maxpool": np.abs(F.maxpool2d(t64(x)).data - maxpool_naive(x)).max(),
        "global_average_pool": np.abs(F.global_average_pool(t64(x)).data - gap_naive(x)).max(),
        "separable_conv": np.abs(F.separable_conv2d(t64(x), t64(d), t64(p), t64(pb), stride, padding).data
                                 - sep_oracle).max(),
    }


def _pad_same(x, k, stride):
    h, w = x.shape[1:3]
    ph = max((-(-h // stride) - 1) * stride + k - h, 0)
    pw = max((-(-w // stride) - 1) * stride + k - w, 0)
    return np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))


def test_criterion_1_oracle_equivalence():
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, err in _kernel_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), float(err))
    exact = True
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        img = rng.integers(0, 256, size=(int(rng.integers(7, 40)), int(rng.integers(7, 40))), dtype=np.uint8)
        exact &= np.array_equal(pp.median_filter(img), median_naive(img))
        exact &= np.array_equal(pp.resize_nearest(img, 23, 31), resize_naive(img, 23, 31))
        exact &= np.array_equal(pp.clahe(img), clahe_naive(img))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and exact and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, ok, f"max abs error {detail}; median/resize/clahe exact={exact}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient suite
# ---------------------------------------------------------------------------

def _bn(rng, c):
    return BatchNormParams(t64(rng.uniform(0.5, 1.5, c)), t64(rng.normal(size=c)),
                           rng.normal(size=c), rng.uniform(0.5, 2.0, c), eps=1e-3)


def _residual_case(rng, seed):
    convs = [rng.normal(scale=0.4, size=s) for s in ((1, 1, 4, 3), (3, 3, 3, 3), (1, 1, 3, 4))]
    bns = [_bn(rng, 3), _bn(rng, 3), _bn(rng, 4)]
    biases = [t64(rng.normal(scale=0.1, size=k.shape[-1])) for k in convs]

    def build(x, k0, k1, k2):
        branch = [(LayerParams(kernel=k, bias=b), bn) for k, b, bn in zip((k0, k1, k2), biases, bns)]
        return residual_block(x, branch)

    return build, [rng.normal(size=(1, 4, 4, 4))] + convs


def _op_cases(seed):
    rng = np.random.default_rng(seed)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    labels = rng.integers(0, 4, size=5)
    signed = rng.uniform(0.1, 1.0, size=(2, 3, 3, 4)) * rng.choice([-1, 1], size=(2, 3, 3, 4))
    return {
        "add": (F.add, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "relu": (F.relu, [signed]),
        "reshape": (lambda x: F.reshape(x, (2, 12)), [rng.normal(size=(2, 3, 4))]),
        "flatten": (F.flatten, [rng.normal(size=(2, 3, 2, 2))]),
        "mean": (F.mean, [rng.normal(size=(3, 4))]),
        "zero_pad": (lambda x: F.zero_pad(x, 1), [rng.normal(size=(1, 3, 3, 2))]),
        "dense": (F.dense, [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)]),
        "conv2d": (lambda x, k, b: F.conv2d(x, k, b, stride=1 + seed % 2, padding="same"),
                   [rng.normal(size=(2, 5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)]),
        "depthwise_conv2d": (lambda x, d: F.depthwise_conv2d(x, d, padding="same"),
                             [rng.normal(size=(1, 5, 5, 3)), rng.normal(size=(3, 3, 3, 1))]),
        "separable_conv2d": (lambda x, d, p, b: F.separable_conv2d(x, d, p, b),
                             [rng.normal(size=(1, 6, 6, 3)), rng.normal(size=(3, 3, 3, 1)),
                              rng.normal(size=(1, 1, 3, 4)), rng.normal(size=4)]),
        "maxpool2d": (F.maxpool2d, [(rng.permutation(2 * 6 * 6 * 2) * 0.05).reshape(2, 6, 6, 2)]),
        "global_average_pool": (F.global_average_pool, [rng.normal(size=(2, 3, 4, 5))]),
        "batch_norm": (lambda x, g, b: F.batch_norm(x, g, b, mean, var, 1e-3),
                       [rng.normal(size=(2, 3, 3, 3)), rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)]),
        "dropout": (lambda x: F.dropout(x, 0.3, train=True, rng=RngState(seed)), [rng.normal(size=(4, 6))]),
        "softmax": (F.softmax, [rng.normal(size=(3, 4))]),
        "sparse_categorical_crossentropy": (lambda z: F.sparse_categorical_crossentropy(F.softmax(z), labels),
                                            [rng.normal(size=(5, 4))]),
        "residual_block": _residual_case(rng, seed),
    }


def _op_error(build, arrays, seed):
    weight_rng = np.random.default_rng(seed + 77)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weight = weight_rng.normal(size=out.shape)
    F.sum(F.mul_const(out, weight)).backward()
    numeric = central_difference(lambda: float((build(*[Tensor(a) for a in arrays]).data * weight).sum()),
                                 arrays, h=1e-5)
    return max(relative_error(t.grad, n) for t, n in zip(tensors, numeric))


def _end_to_end_error(seed):
    spec = build_custom_cnn(input_shape=(12, 12, 1), filters=(2, 3), dense_units=4)
    net = Network.initialize(spec, seed)
    rng = np.random.default_rng(seed)
    for t in net.params.values():
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
    x = rng.random((3, 12, 12))
    labels = rng.integers(0, 4, size=3)

    def loss():
        return F.sparse_categorical_crossentropy(net.forward(x, train=True, rng=RngState(seed)), labels)

    loss().backward()
    names = sorted(net.params)
    analytic = np.concatenate([net.params[n].grad.ravel() for n in names])
    numeric = central_difference(lambda: loss().item(), [net.params[n].data for n in names], h=1e-6)
    return relative_error(analytic, np.concatenate([n.ravel() for n in numeric]))


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    worst = {}
    with precision("float64"):
        for seed in range(10):
            for name, (build, arrays) in _op_cases(seed).items():
                worst[name] = max(worst.get(name, 0.0), _op_error(build, arrays, seed))
        e2e = max(_end_to_end_error(seed) for seed in range(10))
    elapsed = time.perf_counter() - start
    op_max = max(worst.values())
    ok = op_max < 1e-4 and e2e < 1e-3 and elapsed < 120
    worst_op = max(worst, key=worst.get)
    record(2, ok, f"{len(worst)} ops x 10 seeds, worst {worst_op} {op_max:.1e} (< 1e-4); "
                  f"end-to-end CNN {e2e:.1e} (< 1e-3); {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. preprocessing conformance
# ---------------------------------------------------------------------------

def test_criterion_3_preprocessing_conformance():
    checks = {}
    bright = pp.adjust_brightness(np.array([[0, 100, 200]], dtype=np.uint8))
    checks["brightness"] = bright.tolist() == [[15, 165, 255]]
    constant = np.full((40, 60), 77, np.uint8)
    checks["median constant"] = np.array_equal(pp.median_filter(constant), constant)
    out = pp.clahe(constant)
    checks["clahe constant"] = out.min() == out.max()
    checks["resize constant"] = bool((pp.resize_nearest(np.full((13, 29), 0.25, np.float32)) == 0.25).all())
    checks["normalize degenerate"] = bool((pp.normalize_minmax(np.full((5, 5), 3.0)) == 0).all())
    rng = np.random.default_rng(0)
    shapes_ok = True
    for _ in range(10):
        h, w = int(rng.integers(16, 300)), int(rng.integers(16, 600))
        img = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        x, y = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
        box = BBox(x, y, int(rng.integers(1, w - x + 1)), int(rng.integers(1, h - y + 1)))
        res = pp.run_pipeline(img, box)
        shapes_ok &= res.shape == (224, 224) and res.min() >= 0 and res.max() <= 1
    checks["pipeline 224x224 in [0,1]"] = shapes_ok
    ok = all(checks.values())
    record(3, ok, "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. data engineering
# ---------------------------------------------------------------------------

def test_criterion_4_data_engineering():
    counts = {"fillings": 6797, "cavity": 1139, "implant": 2308, "impacted": 894}
    samples = []
    for label, n in enumerate(counts.values()):
        samples += [ds.SampleRecord(f"{label}-{i:05d}", label) for i in range(n)]
    balanced = ds.balance_downsample(samples, seed=7)
    again = ds.balance_downsample(samples, seed=7)
    plan = ds.kfold_split(balanced, k=5, seed=42)
    plan2 = ds.kfold_split(balanced, k=5, seed=42)
    per_class = [[sum(1 for s in balanced if s.label == c and plan.fold_of(s.id) == f) for f in range(5)]
                 for c in range(4)]
    checks = {
        "balanced 894 each": ds.class_counts(balanced) == [894] * 4 and len(balanced) == 3576,
        "fold sizes": sorted(plan.fold_sizes(), reverse=True) == [716, 715, 715, 715, 715],
        "per-class +-1": all(max(row) - min(row) <= 1 for row in per_class),
        "reproducible": [s.id for s in again] == [s.id for s in balanced] and plan2.assignments == plan.assignments,
    }
    ok = all(checks.values())
    record(4, ok, f"fold sizes {plan.fold_sizes()}; " + "; ".join(f"{k} {'ok' if v else 'FAILED'}"
                                                                  for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 5. learning smoke tests
# ---------------------------------------------------------------------------

def test_criterion_5_learning_smoke():
    start = time.perf_counter()
    X, y = quadrant_patterns(600, 32, seed=0)
    train_idx, test_idx = validation_split(len(X), 0.2, seed=0)
    net = Network.initialize(build_custom_cnn(input_shape=(32, 32, 1), filters=(8, 16), dense_units=32), seed=0)
    history = fit(net, X[train_idx], y[train_idx], TrainConfig(epochs=30, seed=0))
    pred, _ = predict(net, X[test_idx])
    cnn_acc = float(np.mean(pred == y[test_idx]))

    rng = np.random.default_rng(3)
    Xc = rng.integers(0, 3, size=(200, 4)).astype(float)
    table = {}
    yc = np.array([table.setdefault(tuple(r), int(rng.integers(0, 4))) for r in Xc])
    tree_acc = float(np.mean(fit_tree(Xc, yc).predict(Xc) == yc))

    wins = 0
    for seed in range(10):
        Xtr, ytr, Xte, yte = blob_benchmark(seed)
        wins += np.mean(fit_forest(Xtr, ytr, seed=seed).predict(Xte) == yte) >= \
            np.mean(fit_tree(Xtr, ytr).predict(Xte) == yte)

    svm_ok = True
    Xb, yb = blobs(40, [[0, 0], [4, 4]], std=0.7, seed=1)
    xor_X, xor_y = xor_corners()
    for Xs, ys in ((Xb, np.where(yb == 0, 1, -1)), (xor_X, np.where(xor_y == 1, 1, -1))):
        model = fit_binary(Xs, ys)
        svm_ok &= bool((model.predict(Xs) == ys).all())
        svm_ok &= kkt_residuals(model.alpha, ys, model.decision_function(Xs), model.C).max() < 1e-3
    elapsed = time.perf_counter() - start
    ok = cnn_acc >= 0.95 and tree_acc == 1.0 and wins >= 8 and svm_ok and elapsed < 600
    record(5, ok, f"CNN held-out {cnn_acc:.4f} after {len(history)} epochs (>= 0.95); dtree train {tree_acc:.2f}; "
                  f"forest >= tree in {wins}/10 seeds; SVM blobs+XOR exact with KKT < 1e-3: {svm_ok}; "
                  f"{elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. hybrid pathway
# ---------------------------------------------------------------------------

def test_criterion_6_hybrid_pathway(tmp_path):
    manifest = write_radiograph_dataset(tmp_path / "syn", counts=(150,) * 4, seed=0)
    samples = ds.materialize(ds.load_manifest(manifest), None, size=32)
    plan = ds.kfold_split(samples, k=5, seed=0)
    cfg = CVConfig(train=TrainConfig(epochs=30, seed=0), filters=(16, 32), dense_units=64)
    cnn_hits = rf_hits = total = 0
    for fold in range(plan.k):
        train, test = plan.split(samples, fold)
        net, _ = train_fold("cnn_rf", train, fold, cfg)
        Xtr, ytr = ds.stack_samples(train)
        Xte, yte = ds.stack_samples(test)
        cnn_hits += int((predict(net, Xte)[0] == yte).sum())
        clf = fit_hybrid("cnn_rf", extract_features(net, Xtr), ytr, cfg, fold)
        rf_hits += int((clf.predict(extract_features(net, Xte)) == yte).sum())
        total += len(yte)
    cnn_acc, rf_acc = cnn_hits / total, rf_hits / total
    ok = rf_acc >= cnn_acc - 0.02
    record(6, ok, f"5-fold held-out CNN softmax {cnn_acc:.4f}, CNN+RF {rf_acc:.4f} (needs >= CNN - 0.02)")
    assert ok


# ---------------------------------------------------------------------------
# 7. metrics correctness
# ---------------------------------------------------------------------------

def test_criterion_7_metrics():
    r = metrics([[3, 1], [2, 4]])
    hand = (abs(r.accuracy - 0.7) <= 1e-9 and abs(r.precision[0] - 0.6) <= 1e-9
            and abs(r.recall[0] - 0.75) <= 1e-9 and abs(r.f1[0] - 2 * 0.6 * 0.75 / 1.35) <= 1e-9
            and round(r.f1[0], 4) == 0.6667)
    # reference fillings row; its F1 of 0.7861 is a fold average, so only the formula family is checked
    P, R = 0.8001, 0.7787
    f1 = 2 * P * R / (P + R)
    table = abs(f1 - 0.789) < 5e-4 and abs(f1 - 0.7861) < 0.01
    ok = hand and table
    record(7, ok, f"[[3,1],[2,4]] -> acc {r.accuracy:.4f} P0 {r.precision[0]:.4f} R0 {r.recall[0]:.4f} "
                  f"F1 {r.f1[0]:.4f}; P=0.8001,R=0.7787 -> F1 {f1:.4f} (reported 0.7861, tol 0.01)")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------

def test_criterion_8_run_all_determinism(tmp_path):
    manifest = write_radiograph_dataset(tmp_path / "syn", counts=(20, 18, 16, 14), seed=1)
    argv = ["run-all", "--manifest", str(manifest), "--pipeline", "cnn_rf", "--image-size", "32",
            "--filters", "8,16", "--dense-units", "16", "--epochs", "3", "--n-trees", "20", "--quiet"]
    codes = [cli_main(argv + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.txt", "confusion.csv")}
    ok = codes == [0, 0] and all(same.values())
    record(8, ok, f"exit codes {codes}; byte-identical " + ", ".join(f"{f}={v}" for f, v in same.items()))
    assert ok


# ---------------------------------------------------------------------------
# 9. stretch
# ---------------------------------------------------------------------------

def test_criterion_9_stretch_not_run():
    LINES.append("criterion 9: SKIP - stretch goal needs the public radiograph dataset and hours of compute")
    pytest.skip("stretch goal (non-blocking): requires the public radiograph dataset and hours of compute")
