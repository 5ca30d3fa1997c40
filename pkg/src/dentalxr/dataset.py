"""Annotation manifests, sample materialisation, class balancing and fold plans.

Manifest format: UTF-8, one JSON object per line with keys ``image``, ``x``,
``y``, ``w``, ``h`` and ``label``. Relative image paths resolve against the
manifest's directory. Blank lines and lines starting with ``#`` are skipped.
"""

import csv
import json
import os
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dentalxr import preprocess
from dentalxr.errors import ManifestError, ParameterError, ValidationError
from dentalxr.fileio import atomic_write_bytes
from dentalxr.labels import CLASS_INDEX, CLASS_NAMES, NUM_CLASSES
from dentalxr.preprocess import BBox
from dentalxr.tensor.rng import RngState

SAMPLE_MAGIC = b"RDXS"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4sIII")


@dataclass
class Annotation:
    image_path: str
    box: BBox
    label: int
    line: int = 0
    clamped: bool = False

    @property
    def label_name(self):
        return CLASS_NAMES[self.label]


@dataclass
class SampleRecord:
    id: str
    label: int
    path: str = None
    image: np.ndarray = field(default=None, repr=False)
    fold: int = None

    def load(self):
        if self.image is None:
            if self.path is None:
                raise ValidationError(f"sample {self.id} has neither an image nor a cache path")
            self.image = read_sample(self.path)
        return self.image


def load_manifest(path, warnings=None, check_images=True):
    """Parse a manifest into annotations, clamping boxes to their image.

    Clamped records are flagged (``Annotation.clamped``) and described in
    ``warnings`` when a list is supplied.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    base = path.parent
    sizes = {}
    annotations = []
    unknown = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ManifestError("record is not an object", line=lineno)
            missing = [k for k in ("image", "x", "y", "w", "h", "label") if k not in rec]
            if missing:
                raise ManifestError(f"missing field(s) {', '.join(missing)}", line=lineno)
            try:
                x, y, w, h = (int(rec[k]) for k in ("x", "y", "w", "h"))
            except (TypeError, ValueError):
                raise ManifestError("box coordinates must be integers", line=lineno) from None
            if w <= 0 or h <= 0:
                raise ManifestError(f"box has non-positive size {w}x{h}", line=lineno)
            label = rec["label"]
            if label not in CLASS_INDEX:
                unknown[str(label)].append(lineno)
                continue
            image = Path(rec["image"])
            if not image.is_absolute():
                image = base / image
            box = BBox(x, y, w, h)
            clamped = False
            if check_images:
                key = str(image)
                if key not in sizes:
                    if not image.is_file():
                        raise ManifestError(f"image not found: {image}", line=lineno)
                    sizes[key] = preprocess.image_size(image)
                width, height = sizes[key]
                if not box.within(width, height):
                    fixed = box.clamp(width, height)
                    if fixed.w <= 0 or fixed.h <= 0:
                        raise ManifestError(f"box {box} lies outside the {width}x{height} image", line=lineno)
                    if warnings is not None:
                        warnings.append(f"line {lineno}: box {box} clamped to {fixed} for {width}x{height} image")
                    box, clamped = fixed, True
            annotations.append(Annotation(str(image), box, CLASS_INDEX[label], lineno, clamped))
    if unknown:
        listing = ", ".join(f"{name!r} (line {', '.join(map(str, lines[:5]))})" for name, lines in sorted(unknown.items()))
        raise ValidationError(f"unknown label(s): {listing}; expected one of {', '.join(CLASS_NAMES)}")
    return annotations


def sample_id(annotation):
    stem = re.sub(r"[^A-Za-z0-9_.-]", "_", Path(annotation.image_path).stem)
    return f"{stem}-L{annotation.line:06d}"


def class_counts(samples):
    counts = Counter(s.label for s in samples)
    return [counts.get(c, 0) for c in range(NUM_CLASSES)]


# ---------------------------------------------------------------------------
# sample cache
# ---------------------------------------------------------------------------

def write_sample(path, image):
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValidationError(f"sample image must be 2-D, got {image.shape}")
    h, w = image.shape
    atomic_write_bytes(path, _SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, h, w) + image.tobytes())


def read_sample(path):
    with open(path, "rb") as fh:
        header = fh.read(_SAMPLE_HEADER.size)
        if len(header) != _SAMPLE_HEADER.size:
            raise ValidationError(f"{path}: truncated sample header")
        magic, version, h, w = _SAMPLE_HEADER.unpack(header)
        if magic != SAMPLE_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != SAMPLE_VERSION:
            raise ValidationError(f"{path}: unsupported sample version {version}")
        payload = fh.read()
    if len(payload) != 4 * h * w:
        raise ValidationError(f"{path}: expected {4 * h * w} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def materialize(annotations, cache_dir=None, size=preprocess.TARGET_SIZE):
    """Run preprocessing for every annotation and return sample records.

    The mask-independent stages run once per source image. With
    ``cache_dir`` each sample is written to ``<cache_dir>/<id>.rdxs`` and the
    record keeps only the path; otherwise images stay in memory.
    """
    by_image = defaultdict(list)
    for ann in annotations:
        by_image[ann.image_path].append(ann)
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
    records = {}
    for image_path, anns in by_image.items():
        enhanced = preprocess.enhance(preprocess.read_image(image_path))
        for ann in anns:
            sid = sample_id(ann)
            img = preprocess.finish(enhanced, ann.box, size)
            if cache_dir is not None:
                target = cache_dir / f"{sid}.rdxs"
                write_sample(target, img)
                records[id(ann)] = SampleRecord(sid, ann.label, path=str(target))
            else:
                records[id(ann)] = SampleRecord(sid, ann.label, image=img)
    ordered = [records[id(a)] for a in annotations]
    ids = [r.id for r in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate sample ids; two manifests lines share an image stem and line number")
    return ordered


def write_index(path, samples):
    """Sample index CSV: id,label,path (label as class name)."""
    lines = ["id,label,path"]
    for s in samples:
        lines.append(f"{s.id},{CLASS_NAMES[s.label]},{s.path or ''}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_index(path):
    path = Path(path)
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            label = row["label"]
            if label not in CLASS_INDEX:
                raise ValidationError(f"{path}: unknown label {label!r} for sample {row['id']}")
            sample_path = row.get("path") or None
            if sample_path and not os.path.isabs(sample_path):
                sample_path = str(path.parent / sample_path)
            samples.append(SampleRecord(row["id"], CLASS_INDEX[label], path=sample_path))
    return samples


def stack_samples(samples):
    """(N, H, W) float32 images and (N,) int64 labels in record order."""
    if not samples:
        raise ValidationError("no samples to stack")
    images = np.stack([s.load() for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# balancing and folds
# ---------------------------------------------------------------------------

def balance_downsample(samples, seed):
    """Randomly reduce every class to the size of the smallest one.

    Survivors keep their original relative order.
    """
    counts = class_counts(samples)
    empty = [CLASS_NAMES[c] for c, n in enumerate(counts) if n == 0]
    if empty:
        raise ValidationError(f"cannot balance: no samples for class(es) {', '.join(empty)}")
    target = min(counts)
    rng = RngState(seed).child("balance")
    keep = set()
    for c in range(NUM_CLASSES):
        members = [i for i, s in enumerate(samples) if s.label == c]
        chosen = rng.choice(len(members), target, replace=False)
        keep.update(members[j] for j in chosen)
    return [s for i, s in enumerate(samples) if i in keep]


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignments: dict

    def fold_of(self, sample_id):
        return self.assignments[sample_id]

    def test_ids(self, fold):
        return [sid for sid, f in self.assignments.items() if f == fold]

    def fold_sizes(self):
        counts = Counter(self.assignments.values())
        return [counts.get(f, 0) for f in range(self.k)]

    def split(self, samples, fold):
        """(train, test) record lists for ``fold``, preserving input order."""
        if not 0 <= fold < self.k:
            raise ParameterError(f"fold must be in [0, {self.k}), got {fold}")
        missing = [s.id for s in samples if s.id not in self.assignments]
        if missing:
            raise ValidationError(f"{len(missing)} sample(s) not covered by the fold plan, e.g. {missing[0]}")
        train = [s for s in samples if self.assignments[s.id] != fold]
        test = [s for s in samples if self.assignments[s.id] == fold]
        return train, test

    def save(self, path):
        lines = [f"# k={self.k} seed={self.seed}", "id,fold"]
        lines += [f"{sid},{f}" for sid, f in self.assignments.items()]
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path):
        k = seed = None
        assignments = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for part in line[1:].split():
                        key, _, value = part.partition("=")
                        if key == "k":
                            k = int(value)
                        elif key == "seed":
                            seed = int(value)
                    continue
                if line == "id,fold":
                    continue
                sid, _, fold = line.rpartition(",")
                try:
                    assignments[sid] = int(fold)
                except ValueError:
                    raise ManifestError(f"{path}: bad fold entry {line!r}", line=lineno) from None
        if k is None:
            k = max(assignments.values(), default=-1) + 1
        return cls(k, seed if seed is not None else 0, assignments)


def kfold_split(samples, k=5, seed=0):
    """Stratified fold assignment.

    Each class is shuffled with the seeded stream, then dealt to folds
    round-robin. The dealing position carries over from one class to the
    next, so fold totals differ by at most one as well as per-class counts.
    """
    n = len(samples)
    if k < 2:
        raise ParameterError(f"k must be at least 2 to leave a training portion, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of samples ({n})")
    ids = [s.id for s in samples]
    if len(set(ids)) != n:
        raise ValidationError("sample ids must be unique for fold assignment")
    rng = RngState(seed).child("kfold")
    assignments = {}
    position = 0
    for c in range(NUM_CLASSES):
        members = [s.id for s in samples if s.label == c]
        for j in rng.permutation(len(members)):
            assignments[members[j]] = position % k
            position += 1
    ordered = {sid: assignments[sid] for sid in ids}
    return FoldPlan(k, int(seed), ordered)
