"""Command-line driver for the preprocessing, training and evaluation workflow.

Every subcommand reads and writes fixed file names inside ``--out``:

    samples.csv           preprocess      sample index (cache files under cache/)
    balanced.csv          balance         class-balanced subset of samples.csv
    folds.csv             split           stratified fold plan over balanced.csv
    models/<net>_fold<k>  train           network weights; history_fold<k>.csv
    features/fold<k>      extract-features  CNN features for every balanced sample
    models/<clf>_fold<k>  train-hybrid    standardiser + dt / rf / svm
    predictions/<pipeline>_fold<k>.csv  evaluate
    metrics.txt, confusion.csv          report

``run-all`` chains all of them. Each invocation also writes the resolved
configuration to ``run_config.<command>.txt``.

Exit codes: 0 success, 2 usage, 3 missing input, 4 invalid input or
configuration, 5 runtime failure. Failures print a single line
``dentalxr: error code=<n> kind=<kind> path=<path> message=<json string>``.
"""

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from dentalxr import dataset, preprocess
from dentalxr.archive import load_archive, save_archive
from dentalxr.classical.hybrid import load_classifier, save_classifier
from dentalxr.errors import ArchiveError, DentalXRError, FoldError, ParameterError, ValidationError
from dentalxr.evaluation import (
    HYBRID,
    PIPELINES,
    CVConfig,
    check_pipeline,
    confusion,
    fit_hybrid,
    metrics,
    network_kind,
    summarize,
    train_fold,
    write_report,
)
from dentalxr.fileio import atomic_write_text
from dentalxr.labels import CLASS_INDEX, CLASS_NAMES
from dentalxr.models.training import FEATURE_SOURCES, TrainConfig, TrainHistory, extract_features, predict
from dentalxr.models.weights import load_model, save_weights

log = logging.getLogger("dentalxr")

EXIT_USAGE, EXIT_MISSING, EXIT_INVALID, EXIT_RUNTIME = 2, 3, 4, 5
COMMANDS = ("preprocess", "balance", "split", "train", "extract-features", "train-hybrid",
            "evaluate", "report", "run-all", "make-synthetic")


class CliError(Exception):
    def __init__(self, code, kind, message, path=None):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.path = path


def missing(path, what="input"):
    return CliError(EXIT_MISSING, "missing-input", f"{what} not found", path)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    manifest: str = None
    cache_dir: str = None
    out: str = "."
    pipeline: str = "cnn"
    seed: int = 0
    k: int = 5
    fold: int = None
    balance: bool = True
    image_size: int = preprocess.TARGET_SIZE
    # training (None means the pipeline's default)
    epochs: int = None
    batch_size: int = None
    lr: float = None
    patience: int = None
    validation_fraction: float = None
    # networks
    filters: tuple = (32, 64, 128, 256)
    dense_units: int = 256
    dropout: float = 0.3
    head_units: int = 256
    backbone_weights: str = None
    features: str = "penultimate"
    # classical models
    n_trees: int = 100
    min_samples_split: int = 2
    svm_c: float = 1.0
    svm_tol: float = 1e-3
    # execution
    threads: int = None
    deterministic: bool = False

    def train_config(self):
        overrides = {"seed": self.seed}
        for name, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                          ("patience", "patience"), ("validation_fraction", "validation_fraction")):
            if getattr(self, name) is not None:
                overrides[key] = getattr(self, name)
        if network_kind(self.pipeline) == "cnn":
            return TrainConfig.for_custom_cnn(**overrides)
        return TrainConfig.for_pretrained(**overrides)

    def cv_config(self):
        return CVConfig(self.train_config(), self.features, tuple(self.filters), self.dense_units, self.dropout,
                        self.head_units, self.n_trees, self.min_samples_split, self.svm_c, self.svm_tol,
                        self.backbone_weights)

    def validate(self):
        check_pipeline(self.pipeline)
        if self.k < 2:
            raise ParameterError(f"k must be at least 2, got {self.k}")
        if self.fold is not None and not 0 <= self.fold < self.k:
            raise ParameterError(f"fold must be in [0, {self.k}), got {self.fold}")
        if self.image_size < 1:
            raise ParameterError(f"image_size must be positive, got {self.image_size}")
        if self.threads is not None and self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")
        self.cv_config()
        return self

    def resolved(self):
        """key=value lines with the pipeline defaults filled in."""
        values = asdict(self)
        train = self.train_config()
        values.update(epochs=train.epochs, batch_size=train.batch_size, lr=train.learning_rate,
                      patience=train.patience, validation_fraction=train.validation_fraction)
        values["adam_beta1"], values["adam_beta2"], values["adam_epsilon"] = train.beta1, train.beta2, train.epsilon
        return "".join(f"{key}={_format_value(values[key])}\n" for key in sorted(values))


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_FIELDS = {"balance", "deterministic"}
_FLOAT_FIELDS = {"lr", "validation_fraction", "dropout", "svm_c", "svm_tol"}
_INT_FIELDS = {"seed", "k", "fold", "image_size", "epochs", "batch_size", "patience", "dense_units",
               "head_units", "n_trees", "min_samples_split", "threads"}


def parse_value(key, text):
    text = text.strip()
    if key not in _FIELD_TYPES:
        raise ParameterError(f"unknown configuration key {key!r}")
    if text == "":
        return None
    try:
        if key in _BOOL_FIELDS:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if key in _INT_FIELDS:
            return int(text)
        if key in _FLOAT_FIELDS:
            return float(text)
        if key == "filters":
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ParameterError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    path = Path(path)
    if not path.is_file():
        raise missing(path, "config file")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(EXIT_INVALID, "invalid-config", f"line {lineno}: expected key=value", path)
        key = key.strip().replace("-", "_")
        try:
            values[key] = parse_value(key, value)
        except ParameterError as exc:
            raise CliError(EXIT_INVALID, "invalid-config", f"line {lineno}: {exc}", path) from None
    return values


def resolve_config(args):
    """Defaults, then the config file, then flags."""
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# artifact paths
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.out)

    @property
    def cache(self):
        return Path(self.cfg.cache_dir) if self.cfg.cache_dir else self.root / "cache"

    samples = property(lambda self: self.root / "samples.csv")
    balanced = property(lambda self: self.root / "balanced.csv")
    folds = property(lambda self: self.root / "folds.csv")

    def network(self, fold):
        return self.root / "models" / f"{network_kind(self.cfg.pipeline)}_fold{fold}"

    def history(self, fold):
        return self.root / f"history_fold{fold}.csv"

    def features(self, fold):
        return self.root / "features" / f"fold{fold}"

    def classifier(self, fold):
        return self.root / "models" / f"{HYBRID[self.cfg.pipeline]}_fold{fold}"

    def predictions(self, fold):
        return self.root / "predictions" / f"{self.cfg.pipeline}_fold{fold}.csv"

    def training_index(self):
        """balanced.csv when balancing is on, otherwise samples.csv."""
        return self.balanced if self.cfg.balance else self.samples


def require(path, what="input"):
    path = Path(path)
    if not path.exists():
        raise missing(path, what)
    return path


def require_archive(path, what):
    manifest = Path(f"{path}.manifest")
    if not manifest.is_file():
        raise missing(manifest, what)
    return path


def folds_to_run(ws, plan):
    if ws.cfg.fold is not None:
        if ws.cfg.fold >= plan.k:
            raise ParameterError(f"fold {ws.cfg.fold} is outside the {plan.k}-fold plan")
        return [ws.cfg.fold]
    return list(range(plan.k))


def load_index(ws):
    return dataset.read_index(require(ws.training_index(), "sample index"))


def load_plan(ws):
    return dataset.FoldPlan.load(require(ws.folds, "fold plan"))


def require_hybrid(cfg):
    if cfg.pipeline not in HYBRID:
        raise ParameterError(f"pipeline {cfg.pipeline!r} has no classical stage; use one of {sorted(HYBRID)}")


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def step_preprocess(ws):
    cfg = ws.cfg
    if not cfg.manifest:
        raise CliError(EXIT_USAGE, "usage", "--manifest is required")
    manifest = Path(cfg.manifest)
    if not manifest.is_file():
        raise missing(manifest, "manifest")
    notes = []
    annotations = dataset.load_manifest(manifest, warnings=notes)
    for note in notes:
        log.warning("%s: %s", manifest, note)
    samples = dataset.materialize(annotations, ws.cache, cfg.image_size)
    for s in samples:
        s.path = os.path.relpath(s.path, ws.root)
    dataset.write_index(ws.samples, samples)
    log.info("preprocessed %d samples, class counts %s", len(samples), dataset.class_counts(samples))
    return [ws.samples]


def step_balance(ws):
    samples = dataset.read_index(require(ws.samples, "sample index"))
    balanced = dataset.balance_downsample(samples, ws.cfg.seed)
    dataset.write_index(ws.balanced, _relative(balanced, ws.root))
    log.info("balanced to %d samples, class counts %s", len(balanced), dataset.class_counts(balanced))
    return [ws.balanced]


def _relative(samples, root):
    return [replace(s, path=os.path.relpath(s.path, root)) if s.path else s for s in samples]


def step_split(ws):
    samples = load_index(ws)
    plan = dataset.kfold_split(samples, ws.cfg.k, ws.cfg.seed)
    plan.save(ws.folds)
    log.info("fold sizes %s", plan.fold_sizes())
    return [ws.folds]


def step_train(ws):
    samples, plan = load_index(ws), load_plan(ws)
    cv = ws.cfg.cv_config()
    written = []
    for fold in folds_to_run(ws, plan):
        train_samples, _ = plan.split(samples, fold)
        net, history = _fold_stage(fold, "train", train_fold, ws.cfg.pipeline, train_samples, fold, cv,
                                   log=lambda row, f=fold: log.info("fold %d %s", f, _row_text(row)))
        path = ws.network(fold)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_weights(net, path, {"fold": fold, "pipeline": ws.cfg.pipeline})
        atomic_write_text(ws.history(fold), history.to_csv())
        written += [path, ws.history(fold)]
    return written


def _row_text(row):
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())


def _fold_stage(fold, stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (FoldError, CliError):
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FoldError(fold, stage, exc) from exc


def _load_network(ws, fold):
    return load_model(require_archive(ws.network(fold), "trained network"))


def step_extract(ws):
    require_hybrid(ws.cfg)
    samples, plan = load_index(ws), load_plan(ws)
    written = []
    for fold in folds_to_run(ws, plan):
        net = _load_network(ws, fold)
        X, y = dataset.stack_samples(samples)
        feats = _fold_stage(fold, "extract-features", extract_features, net, X, ws.cfg.features)
        path = ws.features(fold)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_archive(path, {"features": feats.astype(np.float32), "labels": y},
                     {"source": ws.cfg.features, "samples": len(samples), "fold": fold})
        written.append(path)
    return written


def _load_features(ws, fold, samples):
    arrays, meta = load_archive(require_archive(ws.features(fold), "feature archive"))
    feats, labels = arrays["features"], arrays["labels"]
    if len(feats) != len(samples) or not np.array_equal(labels, [s.label for s in samples]):
        raise ValidationError(f"{ws.features(fold)}: features do not match {ws.training_index()}")
    if meta.get("source") != ws.cfg.features:
        raise ValidationError(f"{ws.features(fold)}: extracted from {meta.get('source')!r}, "
                              f"configuration asks for {ws.cfg.features!r}")
    return feats, labels


def _test_mask(plan, samples, fold):
    return np.array([plan.fold_of(s.id) == fold for s in samples])


def step_train_hybrid(ws):
    require_hybrid(ws.cfg)
    samples, plan = load_index(ws), load_plan(ws)
    cv = ws.cfg.cv_config()
    written = []
    for fold in folds_to_run(ws, plan):
        plan.split(samples, fold)  # coverage check
        feats, labels = _load_features(ws, fold, samples)
        train = ~_test_mask(plan, samples, fold)
        clf = _fold_stage(fold, "train-hybrid", fit_hybrid, ws.cfg.pipeline, feats[train], labels[train], cv, fold)
        save_classifier(ws.classifier(fold), clf)
        written.append(ws.classifier(fold))
    return written


def step_evaluate(ws):
    samples, plan = load_index(ws), load_plan(ws)
    written = []
    for fold in folds_to_run(ws, plan):
        _, test = plan.split(samples, fold)
        test_mask = _test_mask(plan, samples, fold)
        if ws.cfg.pipeline in HYBRID:
            feats, _ = _load_features(ws, fold, samples)
            clf = load_classifier(require_archive(ws.classifier(fold), "classifier"))
            pred = _fold_stage(fold, "evaluate", clf.predict, feats[test_mask])
        else:
            net = _load_network(ws, fold)
            X, _ = dataset.stack_samples(test)
            pred, _ = _fold_stage(fold, "evaluate", predict, net, X)
        path = ws.predictions(fold)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, format_predictions(test, pred))
        written.append(path)
    return written


def format_predictions(samples, predicted):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "true", "predicted"])
    for s, p in zip(samples, predicted):
        writer.writerow([s.id, CLASS_NAMES[s.label], CLASS_NAMES[int(p)]])
    return buf.getvalue()


def read_predictions(path):
    true, pred = [], []
    with open(require(path, "predictions"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                true.append(CLASS_INDEX[row["true"]])
                pred.append(CLASS_INDEX[row["predicted"]])
            except KeyError as exc:
                raise ValidationError(f"{path}: unknown class {exc.args[0]!r}") from None
    return np.array(true, dtype=np.int64), np.array(pred, dtype=np.int64)


def step_report(ws):
    plan = load_plan(ws)
    reports, histories, sizes = [], [], []
    for fold in range(plan.k):
        true, pred = read_predictions(ws.predictions(fold))
        if len(true) == 0:
            raise ValidationError(f"{ws.predictions(fold)} holds no predictions")
        reports.append(metrics(confusion(true, pred)))
        sizes.append(len(true))
        hist = ws.history(fold)
        histories.append(TrainHistory.from_csv(hist.read_text(encoding="utf-8")) if hist.is_file() else None)
    summary = summarize(ws.cfg.pipeline, reports, histories, sizes)
    written = write_report(summary, ws.root)
    log.info("accuracy %.4f ± %.4f (summed %.4f)", summary.mean("accuracy"), summary.std("accuracy"),
             summary.summed_accuracy)
    return written


def step_run_all(ws):
    written = step_preprocess(ws)
    if ws.cfg.balance:
        written += step_balance(ws)
    written += step_split(ws)
    written += step_train(ws)
    if ws.cfg.pipeline in HYBRID:
        written += step_extract(ws)
        written += step_train_hybrid(ws)
    written += step_evaluate(ws)
    if ws.cfg.fold is None:
        written += step_report(ws)
    return written


def step_make_synthetic(ws):
    from dentalxr.synthetic import write_radiograph_dataset

    manifest = write_radiograph_dataset(ws.root / "synthetic", counts=(150,) * 4, seed=ws.cfg.seed)
    log.info("wrote %s", manifest)
    return [manifest]


STEPS = {
    "preprocess": step_preprocess,
    "balance": step_balance,
    "split": step_split,
    "train": step_train,
    "extract-features": step_extract,
    "train-hybrid": step_train_hybrid,
    "evaluate": step_evaluate,
    "report": step_report,
    "run-all": step_run_all,
    "make-synthetic": step_make_synthetic,
}

HELP = {
    "preprocess": "run the enhancement pipeline on every manifest box; writes samples.csv",
    "balance": "downsample every class to the smallest; writes balanced.csv",
    "split": "stratified k-fold plan; writes folds.csv",
    "train": "train the pipeline's network per fold; writes models/ and history_fold<k>.csv",
    "extract-features": "CNN features for the hybrid pipelines; writes features/",
    "train-hybrid": "fit dt / rf / svm on extracted features; writes models/",
    "evaluate": "predict each test fold; writes predictions/",
    "report": "aggregate predictions into metrics.txt and confusion.csv",
    "run-all": "preprocess, balance, split, train, evaluate and report in one go",
    "make-synthetic": "write 150 generated radiographs per class under <out>/synthetic",
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


def _add_flags(p):
    p.add_argument("--manifest", help="annotation manifest (JSON lines)")
    p.add_argument("--cache-dir", dest="cache_dir", help="preprocessed sample cache (default <out>/cache)")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--config", help="key=value configuration file; flags take precedence")
    p.add_argument("--pipeline", choices=PIPELINES)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="number of folds")
    p.add_argument("--fold", type=int, help="run a single fold instead of all")
    p.add_argument("--no-balance", dest="balance", action="store_const", const=False,
                   help="skip class balancing and use samples.csv directly")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--filters", type=lambda s: parse_value("filters", s), help="custom CNN filters, e.g. 32,64,128,256")
    p.add_argument("--dense-units", dest="dense_units", type=int)
    p.add_argument("--head-units", dest="head_units", type=int)
    p.add_argument("--backbone-weights", dest="backbone_weights", help="weight archive for the pretrained backbone")
    p.add_argument("--features", choices=FEATURE_SOURCES, help="hybrid feature source")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--svm-c", dest="svm_c", type=float)
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")
    p.add_argument("--deterministic", action="store_const", const=True, help="single-threaded numerics")
    p.add_argument("--quiet", action="store_true", help="only print errors")


def build_parser():
    parser = _Parser(prog="dentalxr", description="Radiograph classification workflow")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        _add_flags(sub.add_parser(name, help=HELP[name], description=HELP[name]))
    return parser


@contextlib.contextmanager
def thread_limit(cfg):
    limit = 1 if cfg.deterministic else cfg.threads
    if limit is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; --threads/--deterministic cannot cap BLAS threads")
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.code, exc.kind, exc.path
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing-input", exc.filename or (exc.args[0] if exc.args else None)
    if isinstance(exc, FoldError):
        cause = exc.cause
        kind = "invalid-input" if isinstance(cause, (ValidationError, ParameterError, ArchiveError)) else "runtime"
        return (EXIT_INVALID if kind == "invalid-input" else EXIT_RUNTIME), kind, None
    if isinstance(exc, (ValidationError, ParameterError, ArchiveError, DentalXRError, ValueError)):
        return EXIT_INVALID, "invalid-input", getattr(exc, "filename", None)
    return EXIT_RUNTIME, "runtime", None


def error_line(code, kind, path, message):
    path_text = json.dumps(str(path)) if path is not None else '""'
    return f"dentalxr: error code={code} kind={kind} path={path_text} message={json.dumps(message)}"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
        cfg = resolve_config(args)
        ws = Workspace(cfg)
        ws.root.mkdir(parents=True, exist_ok=True)
        atomic_write_text(ws.root / f"run_config.{args.command}.txt", cfg.resolved())
        with thread_limit(cfg):
            STEPS[args.command](ws)
    except KeyboardInterrupt:
        print(error_line(EXIT_RUNTIME, "interrupted", None, "interrupted"), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        code, kind, path = _classify(exc)
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, FileNotFoundError) and path is not None:
            message = "input not found"
        print(error_line(code, kind, path, message), file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
