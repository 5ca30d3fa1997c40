"""Confusion matrices, per-class metrics, cross-validation and report files.

Per-class metrics are one-vs-rest. Any 0/0 cell is defined as 0 so a
class that is never predicted cannot break reporting. Fold aggregation uses
the sample standard deviation (n - 1 denominator).
"""

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dentalxr.classical.hybrid import fit_classifier
from dentalxr.dataset import stack_samples
from dentalxr.errors import FoldError, ParameterError, ShapeError, ValidationError
from dentalxr.fileio import atomic_write_text
from dentalxr.labels import CLASS_NAMES, NUM_CLASSES
from dentalxr.models.network import Network
from dentalxr.models.spec import ARCHITECTURES, build_custom_cnn, build_pretrained
from dentalxr.models.training import FEATURE_SOURCES, TrainConfig, extract_features, fit, predict
from dentalxr.models.weights import load_backbone

PIPELINES = ("cnn", "cnn_dt", "cnn_rf", "cnn_svm", "vgg16", "xception", "resnet50")
HYBRID = {"cnn_dt": "dt", "cnn_rf": "rf", "cnn_svm": "svm"}
METRIC_NAMES = ("precision", "recall", "f1")


def confusion(true_labels, predicted_labels, n_classes=NUM_CLASSES):
    """Count matrix with rows = true label, columns = predicted label."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeError(f"label arrays must be 1-D and equal length, got {t.shape} and {p.shape}", axis=0)
    for name, arr in (("true", t), ("predicted", p)):
        if len(arr) and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= n_classes):
            raise ValidationError(f"{name} labels must be integers in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t.astype(np.int64), p.astype(np.int64)), 1)
    return cm


def _ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    matrix: np.ndarray = field(repr=False)

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())

    @property
    def macro_f1(self):
        return float(self.f1.mean())

    def values(self):
        """Flat {name: value} view used for fold aggregation."""
        out = {"accuracy": self.accuracy}
        for metric in METRIC_NAMES:
            per_class = getattr(self, metric)
            for c, v in enumerate(per_class):
                out[f"{metric}/{c}"] = float(v)
            out[f"{metric}/macro"] = float(per_class.mean())
        return out


def metrics(cm):
    """Accuracy plus one-vs-rest precision, recall and F1 for every class."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValidationError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    precision = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(float(tp.sum() / total), precision, recall, f1, cm.copy())


def mean_std(values):
    """Mean and sample standard deviation; a single value has std 0."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1))


@dataclass
class CVSummary:
    pipeline: str
    reports: list
    histories: list = field(default_factory=list, repr=False)
    test_sizes: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.reports)

    @property
    def confusion(self):
        return sum(r.matrix for r in self.reports)

    @property
    def summed_accuracy(self):
        cm = self.confusion
        return float(np.trace(cm) / cm.sum())

    def aggregate(self):
        """{metric name: (mean, std)} over folds."""
        keys = self.reports[0].values().keys()
        rows = [r.values() for r in self.reports]
        return {key: mean_std([row[key] for row in rows]) for key in keys}

    def mean(self, key):
        return self.aggregate()[key][0]

    def std(self, key):
        return self.aggregate()[key][1]


def summarize(pipeline, reports, histories=(), test_sizes=()):
    if not reports:
        raise ValidationError("no fold reports to summarise")
    return CVSummary(pipeline, list(reports), list(histories), list(test_sizes))


# ---------------------------------------------------------------------------
# per-fold pipeline steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CVConfig:
    """Everything a cross-validation run needs besides the data.

    ``filters`` and ``dense_units`` size the custom CNN (smaller values are
    for smoke runs); ``backbone_weights`` is an archive loaded into the
    pretrained backbones, which otherwise start from random weights.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    features: str = "penultimate"
    filters: tuple = (32, 64, 128, 256)
    dense_units: int = 256
    dropout: float = 0.3
    head_units: int = 256
    n_trees: int = 100
    min_samples_split: int = 2
    svm_C: float = 1.0
    svm_tol: float = 1e-3
    backbone_weights: str = None

    def __post_init__(self):
        if self.features not in FEATURE_SOURCES:
            raise ParameterError(f"features must be one of {FEATURE_SOURCES}, got {self.features!r}")
        if self.n_trees < 1:
            raise ParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if not self.svm_C > 0:
            raise ParameterError(f"svm_C must be positive, got {self.svm_C}")

    @classmethod
    def for_pipeline(cls, kind, train_overrides=None, **overrides):
        """Defaults for ``kind``: the pretrained kinds train at lr 1e-4, batch 8."""
        base = TrainConfig.for_pretrained if network_kind(kind) in ARCHITECTURES else TrainConfig.for_custom_cnn
        return cls(train=base(**(train_overrides or {})), **overrides)


def check_pipeline(kind):
    if kind not in PIPELINES:
        raise ParameterError(f"pipeline must be one of {PIPELINES}, got {kind!r}")
    return kind


def network_kind(kind):
    """Architecture trained by a pipeline: the hybrid kinds reuse the custom CNN."""
    check_pipeline(kind)
    return kind if kind in ARCHITECTURES else "cnn"


def build_spec(kind, image_size, cfg):
    arch = network_kind(kind)
    if arch == "cnn":
        return build_custom_cnn((image_size, image_size, 1), tuple(cfg.filters), cfg.dense_units, cfg.dropout)
    return build_pretrained(arch, (image_size, image_size, 3), head_units=cfg.head_units)


def fold_seed(cfg, fold):
    return cfg.train.seed + fold


def initial_network(spec, cfg, fold):
    seed = fold_seed(cfg, fold)
    if spec.origin[0] == "pretrained" and cfg.backbone_weights:
        return load_backbone(spec, cfg.backbone_weights, seed)
    return Network.initialize(spec, seed)


def train_fold(kind, train_samples, fold, cfg, log=None):
    """Fit the pipeline's network on one fold's training records."""
    X, y = stack_samples(train_samples)
    spec = build_spec(kind, X.shape[1], cfg)
    net = initial_network(spec, cfg, fold)
    history = fit(net, X, y, replace(cfg.train, seed=fold_seed(cfg, fold)), log=log)
    return net, history


def fit_hybrid(kind, features, labels, cfg, fold):
    clf = HYBRID[kind]
    if clf == "dt":
        options = {"min_samples_split": cfg.min_samples_split}
    elif clf == "rf":
        options = {"n_trees": cfg.n_trees, "min_samples_split": cfg.min_samples_split}
    else:
        options = {"C": cfg.svm_C, "tol": cfg.svm_tol}
    return fit_classifier(clf, features, labels, seed=fold_seed(cfg, fold), **options)


def run_fold(kind, samples, plan, fold, cfg, log=None):
    """Train, predict and score one fold. Returns (report, history, predictions).

    Any failure is re-raised as FoldError naming the fold and stage.
    """
    stage = "split"
    try:
        train_samples, test_samples = plan.split(samples, fold)
        if not train_samples or not test_samples:
            raise ValidationError(f"fold {fold} has {len(train_samples)} training and {len(test_samples)} test samples")
        stage = "train"
        net, history = train_fold(kind, train_samples, fold, cfg, log=log)
        X_test, y_test = stack_samples(test_samples)
        if kind in HYBRID:
            stage = "extract-features"
            X_train, y_train = stack_samples(train_samples)
            f_train = extract_features(net, X_train, cfg.features)
            f_test = extract_features(net, X_test, cfg.features)
            stage = "train-hybrid"
            clf = fit_hybrid(kind, f_train, y_train, cfg, fold)
            stage = "evaluate"
            pred = clf.predict(f_test)
        else:
            stage = "evaluate"
            pred, _ = predict(net, X_test)
        report = metrics(confusion(y_test, pred))
    except FoldError:
        raise
    except Exception as exc:
        raise FoldError(fold, stage, exc) from exc
    return report, history, pred


def run_cv(kind, samples, plan, cfg=None, log=None, on_fold=None):
    """Cross-validate ``kind`` over every fold of ``plan``.

    ``on_fold(fold, report, history, predictions)`` is called after each
    fold, for example to persist artifacts.
    """
    check_pipeline(kind)
    cfg = cfg or CVConfig()
    covered = [s for s in samples if s.id in plan.assignments]
    if len(covered) != len(samples):
        raise ValidationError(f"fold plan covers {len(covered)} of {len(samples)} samples")
    reports, histories, sizes = [], [], []
    for fold in range(plan.k):
        report, history, pred = run_fold(kind, samples, plan, fold, cfg, log=log)
        reports.append(report)
        histories.append(history)
        sizes.append(int(report.matrix.sum()))
        if on_fold is not None:
            on_fold(fold, report, history, pred)
    return summarize(kind, reports, histories, sizes)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _cell(mean, std):
    return f"{mean:.4f} ± {std:.4f}"


def format_metrics(summary):
    agg = summary.aggregate()
    acc = _cell(*agg["accuracy"])
    header = f"{'class':<10}  {'precision':<15}  {'recall':<15}  {'f1':<15}  accuracy"
    lines = [
        f"# pipeline: {summary.pipeline}",
        f"# folds: {summary.k}",
        f"# test samples: {int(summary.confusion.sum())}",
        header,
    ]
    for c, name in list(enumerate(CLASS_NAMES)) + [("macro", "macro")]:
        cells = [_cell(*agg[f"{m}/{c}"]) for m in METRIC_NAMES]
        lines.append(f"{name:<10}  " + "  ".join(f"{x:<15}" for x in cells + [acc]).rstrip())
    lines.append(f"accuracy (fold mean ± std): {acc}")
    lines.append(f"accuracy (summed confusion matrix): {summary.summed_accuracy:.4f}")
    for fold, r in enumerate(summary.reports):
        lines.append(f"fold {fold}: accuracy {r.accuracy:.4f} macro_f1 {r.macro_f1:.4f} n {int(r.matrix.sum())}")
    return "\n".join(lines) + "\n"


def parse_metrics(text):
    """Read a metrics.txt table back into {row: {column: (mean, std)}}.

    Rows are the class names and ``macro``; an ``accuracy`` row holds the
    fold-mean accuracy and ``summed_accuracy`` the pooled value.
    """
    rows = {}
    columns = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("class "):
            columns = line.split()[1:]
            continue
        if line.startswith("accuracy (fold mean"):
            mean, _, std = line.split(":", 1)[1].strip().partition(" ± ")
            rows["accuracy"] = (float(mean), float(std))
            continue
        if line.startswith("accuracy (summed"):
            rows["summed_accuracy"] = float(line.split(":", 1)[1])
            continue
        if line.startswith("fold "):
            continue
        if columns is None:
            raise ValidationError(f"metrics table row before header: {line!r}")
        name, *cells = line.split()
        # every cell is "mean ± std", three tokens
        if len(cells) != 3 * len(columns):
            raise ValidationError(f"malformed metrics row: {line!r}")
        rows[name] = {col: (float(cells[3 * i]), float(cells[3 * i + 2])) for i, col in enumerate(columns)}
    missing = [n for n in CLASS_NAMES + ("macro", "accuracy") if n not in rows]
    if missing:
        raise ValidationError(f"metrics file lacks rows {missing}")
    return rows


def read_metrics(path):
    return parse_metrics(Path(path).read_text(encoding="utf-8"))


def format_confusion(cm):
    cm = np.asarray(cm)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted", *CLASS_NAMES])
    for name, row in zip(CLASS_NAMES, cm):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def parse_confusion(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0][1:]) != CLASS_NAMES:
        raise ValidationError(f"confusion CSV header must list {','.join(CLASS_NAMES)}")
    body = rows[1:]
    if tuple(r[0] for r in body) != CLASS_NAMES:
        raise ValidationError(f"confusion CSV rows must be {','.join(CLASS_NAMES)} in order")
    return np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int64)


def read_confusion(path):
    return parse_confusion(Path(path).read_text(encoding="utf-8"))


def write_report(summary, out_dir):
    """Write metrics.txt, confusion.csv and history_fold<k>.csv into ``out_dir``.

    Every file is replaced atomically. Returns the paths written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "metrics.txt", out_dir / "confusion.csv"]
    atomic_write_text(written[0], format_metrics(summary))
    atomic_write_text(written[1], format_confusion(summary.confusion))
    for fold, history in enumerate(summary.histories):
        if history is not None:
            path = out_dir / f"history_fold{fold}.csv"
            atomic_write_text(path, history.to_csv())
            written.append(path)
    return written
