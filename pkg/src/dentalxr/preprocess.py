"""Radiograph preprocessing: brightness, median denoise, CLAHE, min-max
normalisation, bounding-box mask and nearest-neighbour resize.

Images are 2-D numpy arrays indexed ``[row, col]``. 8-bit stages take and
return ``uint8``; stages after normalisation work on ``float32`` in [0, 1].
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dentalxr.errors import ParameterError, ShapeError

BRIGHTNESS_ALPHA = 1.5
BRIGHTNESS_BETA = 15.0
MEDIAN_KERNEL = 3
CLAHE_CLIP_LIMIT = 2.0
CLAHE_TILES = 3
TARGET_SIZE = 224


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def clamp(self, width, height):
        """Return the box intersected with a ``width`` x ``height`` frame."""
        x0 = min(max(self.x, 0), width)
        y0 = min(max(self.y, 0), height)
        x1 = min(max(self.x + self.w, 0), width)
        y1 = min(max(self.y + self.h, 0), height)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def within(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def _as_u8(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {img.shape}", axis="rank")
    if img.size == 0:
        raise ShapeError("empty image", axis=0)
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ParameterError("8-bit stage received values outside [0, 255]")
        img = img.astype(np.uint8)
    return img


def adjust_brightness(img, alpha=BRIGHTNESS_ALPHA, beta=BRIGHTNESS_BETA):
    """``round(alpha * p + beta)`` with halves rounded up, saturated to [0, 255]."""
    img = _as_u8(img)
    out = np.floor(alpha * img.astype(np.float64) + beta + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def median_filter(img, k=MEDIAN_KERNEL):
    """k x k median with replicate borders."""
    img = _as_u8(img)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"median kernel size must be a positive odd integer, got {k}")
    r = k // 2
    padded = np.pad(img, r, mode="edge")
    windows = sliding_window_view(padded, (k, k)).reshape(img.shape[0], img.shape[1], k * k)
    return np.partition(windows, k * k // 2, axis=2)[:, :, k * k // 2].astype(np.uint8)


def _clip_histograms(hist, limit):
    excess = np.maximum(hist - limit, 0).sum(axis=-1, keepdims=True)
    hist = np.minimum(hist, limit)
    share, rest = excess // 256, excess % 256
    bins = np.arange(256)
    return hist + share + (bins < rest)


def clahe_tile_luts(img, clip_limit=CLAHE_CLIP_LIMIT, tiles=CLAHE_TILES):
    """Per-tile intensity mappings, shape (tiles, tiles, 256).

    Tiles measure ceil(H/tiles) x ceil(W/tiles). When the image does not
    divide evenly the last row/column of tiles reads reflect-101 pixels
    past the border, so every tile has the same pixel count and a constant
    image maps to the same value in every tile.
    """
    img = _as_u8(img)
    h, w = img.shape
    if h < tiles or w < tiles:
        raise ParameterError(f"image {h}x{w} is smaller than the {tiles}x{tiles} tile grid")
    th, tw = -(-h // tiles), -(-w // tiles)
    padded = np.pad(img, ((0, th * tiles - h), (0, tw * tiles - w)), mode="reflect")
    blocks = padded.reshape(tiles, th, tiles, tw).transpose(0, 2, 1, 3).reshape(tiles, tiles, th * tw)
    count = th * tw
    hist = np.zeros((tiles, tiles, 256), dtype=np.int64)
    for ty in range(tiles):
        for tx in range(tiles):
            hist[ty, tx] = np.bincount(blocks[ty, tx], minlength=256)
    limit = max(1, int(np.floor(clip_limit * count / 256 + 0.5)))
    hist = _clip_histograms(hist, limit)
    cdf = np.cumsum(hist, axis=-1)
    return (2 * 255 * cdf + count) // (2 * count)


def _tile_coords(n, size, tiles):
    """Lower/upper neighbouring tile index and the integer blend weight along one axis.

    Position p sits at (2p + 1 - size) / (2 size) in tile-centre units; the
    weight is the remainder numerator over 2*size.
    """
    num = 2 * np.arange(n) + 1 - size
    lo, rem = np.divmod(num, 2 * size)
    return np.clip(lo, 0, tiles - 1), np.clip(lo + 1, 0, tiles - 1), rem


def clahe(img, clip_limit=CLAHE_CLIP_LIMIT, tiles=CLAHE_TILES):
    """Contrast-limited adaptive histogram equalisation on an 8-bit image.

    Pixel values blend the mappings of the four nearest tile centres with
    exact integer bilinear weights, rounded half up.
    """
    img = _as_u8(img)
    h, w = img.shape
    luts = clahe_tile_luts(img, clip_limit, tiles)
    th, tw = -(-h // tiles), -(-w // tiles)
    y0, y1, ry = _tile_coords(h, th, tiles)
    x0, x1, rx = _tile_coords(w, tw, tiles)
    v = img.astype(np.int64)
    yy0, yy1, ryy = y0[:, None], y1[:, None], ry[:, None]
    a = luts[yy0, x0[None, :], v]
    b = luts[yy0, x1[None, :], v]
    c = luts[yy1, x0[None, :], v]
    d = luts[yy1, x1[None, :], v]
    wx = 2 * tw - rx
    top = wx * a + rx * b
    bottom = wx * c + rx * d
    num = (2 * th - ryy) * top + ryy * bottom
    den = 4 * th * tw
    return np.minimum((2 * num + den) // (2 * den), 255).astype(np.uint8)


def normalize_minmax(img):
    """Scale to [0, 1]; a constant image becomes all zeros."""
    img = np.asarray(img)
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.float32)
    return ((img.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)


def apply_mask(img, box):
    """Zero every pixel outside ``box``; the full frame is kept."""
    img = np.asarray(img)
    h, w = img.shape
    box = box.clamp(w, h)
    if box.w <= 0 or box.h <= 0:
        raise ParameterError(f"mask box has zero area inside a {w}x{h} image: {box}")
    out = np.zeros(img.shape, dtype=np.float32)
    out[box.y:box.y + box.h, box.x:box.x + box.w] = img[box.y:box.y + box.h, box.x:box.x + box.w]
    return out


def resize_nearest(img, out_h=TARGET_SIZE, out_w=None):
    """Nearest-neighbour resize; source index = floor(target * src / out)."""
    img = np.asarray(img)
    if out_w is None:
        out_w = out_h
    h, w = img.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[rows[:, None], cols[None, :]]


def enhance(img):
    """The mask-independent prefix of the pipeline: brightness, median, CLAHE, normalise."""
    return normalize_minmax(clahe(median_filter(adjust_brightness(img))))


def run_pipeline(img, box, size=TARGET_SIZE):
    """Full preprocessing chain; returns a ``size`` x ``size`` float32 image in [0, 1]."""
    return finish(enhance(img), box, size)


def finish(enhanced, box, size=TARGET_SIZE):
    return resize_nearest(apply_mask(enhanced, box), size).astype(np.float32)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def to_grayscale(rgb):
    """Luminance 0.299R + 0.587G + 0.114B, rounded, as uint8."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8)


def read_image(path):
    """Read a PNG or binary PGM (P5) file as an 8-bit grayscale array."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P5":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "P", "1"):
            arr = np.asarray(im.convert("L"))
        elif im.mode in ("I;16", "I;16B", "I"):
            raise ParameterError(f"{path}: only 8-bit images are supported (mode {im.mode})")
        else:
            arr = to_grayscale(np.asarray(im.convert("RGB")))
    return np.ascontiguousarray(arr, dtype=np.uint8)


def image_size(path):
    """(width, height) without decoding pixel data when possible."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P5":
        width, height, _, _ = _pgm_header(path)
        return width, height
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def _pgm_header(path):
    with open(path, "rb") as fh:
        data = fh.read(512)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParameterError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParameterError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    return width, height, maxval, pos + 1


def read_pgm(path):
    width, height, maxval, offset = _pgm_header(path)
    if maxval > 255:
        raise ParameterError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raw = np.fromfile(path, dtype=np.uint8, offset=offset)
    if raw.size < width * height:
        raise ParameterError(f"{path}: PGM payload truncated")
    return raw[:width * height].reshape(height, width).copy()


def write_pgm(path, img):
    img = _as_u8(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())
