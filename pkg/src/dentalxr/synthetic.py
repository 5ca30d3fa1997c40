"""Generated datasets for tests, smoke runs and demos.

None of these stand in for real radiographs; they are built so that the
expected outcome (separability, a known decision rule) holds by
construction.
"""

import json
from pathlib import Path

import numpy as np

from dentalxr.labels import CLASS_NAMES, NUM_CLASSES
from dentalxr.preprocess import write_pgm
from dentalxr.tensor.rng import RngState


def quadrant_patterns(n_per_class, size=32, seed=0, noise=0.15, low=0.2, high=0.8):
    """Images whose class is the index of the bright quadrant.

    Quadrants are numbered row-major (top-left 0, top-right 1, bottom-left 2,
    bottom-right 3). Pixels get uniform noise of +-``noise``; as long as
    ``noise < (high - low) / 2`` every image is separable by quadrant means.
    Returns (X float32 (N, size, size), y int64) in a seeded random order.
    """
    rng = RngState(seed).child("quadrants")
    half = size // 2
    n = n_per_class * NUM_CLASSES
    y = np.repeat(np.arange(NUM_CLASSES), n_per_class)
    X = np.full((n, size, size), low, dtype=np.float64)
    for i, c in enumerate(y):
        r, q = divmod(int(c), 2)
        X[i, r * half:(r + 1) * half, q * half:(q + 1) * half] = high
    X += rng.uniform(-noise, noise, X.shape)
    order = rng.permutation(n)
    return np.clip(X[order], 0, 1).astype(np.float32), y[order].astype(np.int64)


def blobs(n_per_class, centers, std=1.0, seed=0):
    """Isotropic Gaussian clusters; returns (X (N, D) float64, y int64)."""
    rng = RngState(seed).child("blobs")
    centers = np.asarray(centers, dtype=np.float64)
    X = np.concatenate([c + std * rng.generator.standard_normal((n_per_class, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per_class)
    order = rng.permutation(len(y))
    return X[order], y[order].astype(np.int64)


def xor_corners():
    """The corners (+-1, +-1), labelled 1 where the coordinate signs differ."""
    X = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0], dtype=np.int64)
    return X, y


def _draw_lesion(patch, label, rng):
    h, w = patch.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if label == 0:  # fillings: bright compact disc
        r = 0.3 * min(h, w)
        patch[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 235
    elif label == 1:  # cavity: dark hole inside mid-grey tissue
        r = 0.25 * min(h, w)
        patch[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 10
    elif label == 2:  # implant: bright vertical post
        patch[:, int(w * 0.4):int(np.ceil(w * 0.6))] = 245
    else:  # impacted: bright diagonal band
        patch[np.abs((yy / max(h - 1, 1)) - (xx / max(w - 1, 1))) < 0.15] = 225
    patch += rng.integers(-8, 9, size=patch.shape)


def write_radiograph_dataset(out_dir, counts=(40, 40, 40, 40), width=128, height=64, seed=0):
    """Write grey PGM radiographs with one annotated lesion each, plus
    ``manifest.jsonl``. Returns the manifest path.

    Each class has a distinct pattern inside its box, so a model trained on
    the preprocessed crops can separate them.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = RngState(seed).child("radiographs")
    lines = []
    index = 0
    for label, count in enumerate(counts):
        for _ in range(count):
            img = 90 + rng.integers(-20, 21, size=(height, width))
            # boxes span a large share of the frame so the pattern survives
            # masking and downscaling to small smoke-test sizes
            bw = int(rng.integers(width // 3, width // 2))
            bh = int(rng.integers(height // 2, 4 * height // 5))
            x = int(rng.integers(0, width - bw))
            y = int(rng.integers(0, height - bh))
            patch = np.full((bh, bw), 120, dtype=np.int64)
            _draw_lesion(patch, label, rng)
            img[y:y + bh, x:x + bw] = patch
            name = f"images/r{index:05d}.pgm"
            write_pgm(out_dir / name, np.clip(img, 0, 255).astype(np.uint8))
            lines.append(json.dumps({"image": name, "x": x, "y": y, "w": bw, "h": bh, "label": CLASS_NAMES[label]}))
            index += 1
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
