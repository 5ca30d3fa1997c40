"""Training loop, optimizer, early stopping, prediction and feature extraction."""

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from dentalxr.dataset import stack_samples
from dentalxr.errors import ParameterError, ShapeError, ValidationError
from dentalxr.fileio import atomic_write_text
from dentalxr.models.network import Network
from dentalxr.tensor import RngState, Tensor
from dentalxr.tensor import functional as F


class UntrainedModelWarning(UserWarning):
    """Features or predictions were requested from a network that was never fitted."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch_size: int = 16
    epochs: int = 30
    validation_fraction: float = 0.1
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ParameterError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ParameterError(f"patience must be >= 0, got {self.patience}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def for_custom_cnn(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def for_pretrained(cls, **overrides):
        return replace(cls(learning_rate=1e-4, batch_size=8), **overrides)


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def scce_loss(probs, labels):
    """Mean of -log(p[label]) with p clamped to at least 1e-7."""
    return F.sparse_categorical_crossentropy(Tensor(np.asarray(probs, dtype=np.float64), dtype=np.float64),
                                             labels).item() + 0.0


def adam_step(params, grads, state, t, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One Adam update with bias correction, in place.

    ``params`` maps names to arrays; ``grads`` holds a gradient (or None) for
    the names to update. Names absent from ``grads`` or with a None gradient
    are frozen and left untouched. ``state`` maps names to (m, v) moment
    arrays and is created on first use. Returns (params, state).
    """
    if t < 1:
        raise ParameterError(f"Adam step counter starts at 1, got {t}")
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# early stopping and history
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop once the monitored value has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, value):
        """Record ``value`` for ``epoch``; returns (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = None
    stopped_epoch: int = None
    early_stopped: bool = False

    def __len__(self):
        return len(self.rows)

    def column(self, key):
        return [row[key] for row in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in self.rows:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def save(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text):
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            row = {k: float(rec[k]) for k in HISTORY_FIELDS[1:]}
            row["epoch"] = int(rec["epoch"])
            rows.append(row)
        return cls(rows)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def validation_split(n, fraction, seed):
    """Seeded (train_idx, val_idx) with round(fraction * n) >= 1 validation items."""
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 1:
        raise ValidationError(f"{n} sample(s) are too few to hold out a validation split")
    perm = RngState(seed).child("validation").permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_loss(network, X, y, batch_size=64):
    probs = network.predict_proba(X, batch_size)
    return scce_loss(probs, y), float(np.mean(np.argmax(probs, axis=1) == y))


def fit(network, X, y, cfg, X_val=None, y_val=None, log=None):
    """Train ``network`` in place with Adam and early stopping on val_loss.

    Without an explicit validation set, ``cfg.validation_fraction`` of the
    given data is held out by a seeded split. Batches are reshuffled every
    epoch from a seeded stream; dropout draws from another. At the end the
    trainable weights of the best epoch are restored.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValidationError("training set is empty")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} images but {len(y)} labels", axis=0)
    if X_val is None:
        tr, va = validation_split(len(X), cfg.validation_fraction, cfg.seed)
        X, y, X_val, y_val = X[tr], y[tr], X[va], y[va]
    X = network.prepare_input(X)
    X_val = network.prepare_input(X_val)
    y_val = np.asarray(y_val, dtype=np.int64)

    root = RngState(cfg.seed)
    shuffle_rng = root.child("shuffle")
    dropout_rng = root.child("dropout")
    trainable = network.trainable()
    arrays = {n: t.data for n, t in trainable.items()}
    state = {}
    step = 0
    stopper = EarlyStopping(cfg.patience)
    best = {n: a.copy() for n, a in arrays.items()}
    history = TrainHistory()

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(X))
        loss_sum = correct = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs = network.forward(X[idx], train=True, rng=dropout_rng)
            loss = F.sparse_categorical_crossentropy(probs, y[idx])
            for t in trainable.values():
                t.grad = None
            loss.backward()
            step += 1
            adam_step(arrays, {n: t.grad for n, t in trainable.items()}, state, step,
                      cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(probs.data, axis=1) == y[idx]))
        val_loss, val_acc = evaluate_loss(network, X_val, y_val)
        history.rows.append({"epoch": epoch, "train_loss": loss_sum / len(X), "train_acc": correct / len(X),
                             "val_loss": val_loss, "val_acc": val_acc})
        if log is not None:
            log(history.rows[-1])
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best = {n: a.copy() for n, a in arrays.items()}
        if stop:
            history.early_stopped = True
            break

    history.stopped_epoch = len(history.rows)
    history.best_epoch = stopper.best_epoch if stopper.best_epoch is not None else history.stopped_epoch
    if stopper.best_epoch is not None:
        network.load_state(best)
    network.fitted = True
    return history


def train(spec, samples, fold_plan, fold, cfg, network=None, log=None):
    """Fit on every fold except ``fold``; returns (network, history).

    ``network`` supplies starting weights (for example a loaded pretrained
    backbone); otherwise the spec is freshly initialised from ``cfg.seed``.
    """
    train_samples, _ = fold_plan.split(samples, fold)
    if not train_samples:
        raise ValidationError(f"fold {fold} leaves no training samples")
    X, y = stack_samples(train_samples)
    if network is None:
        network = Network.initialize(spec, cfg.seed)
    history = fit(network, X, y, cfg, log=log)
    return network, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

FEATURE_SOURCES = ("penultimate", "flatten")


def _images(samples_or_array):
    if isinstance(samples_or_array, np.ndarray):
        return samples_or_array
    return stack_samples(list(samples_or_array))[0]


def feature_layer(spec, source="penultimate"):
    """Layer whose output ``extract_features`` returns for ``source``."""
    if source == "penultimate":
        return spec.layers[-2].name
    if source == "flatten":
        return spec.layers[spec.index("flatten")].name
    raise ParameterError(f"feature source must be one of {FEATURE_SOURCES}, got {source!r}")


def extract_features(network, samples, source="penultimate", batch_size=64):
    """Eval-mode activations of the layer before the classifier (or the
    flatten layer with ``source="flatten"``), one row per sample."""
    if not network.fitted:
        warnings.warn("extracting features from an untrained network", UntrainedModelWarning, stacklevel=2)
    X = _images(samples)
    out = network.predict_proba(X, batch_size, until=feature_layer(network.spec, source))
    return out.reshape(len(X), -1)


def predict(network, samples, batch_size=64):
    """(labels, probabilities); ties go to the lowest class index."""
    if not network.fitted:
        warnings.warn("predicting with an untrained network", UntrainedModelWarning, stacklevel=2)
    probs = network.predict_proba(_images(samples), batch_size)
    return np.argmax(probs, axis=1), probs
