"""Differentiable layer operations on NHWC tensors.

Every function takes and returns :class:`Tensor` objects and records a
backward closure when any input requires a gradient. Inputs may also be
plain arrays; they are wrapped without gradient tracking.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dentalxr.errors import ParameterError, ShapeError, ValidationError
from dentalxr.tensor.tensor import Tensor, as_tensor

PROB_FLOOR = 1e-7


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeError(f"{what} expects a rank-{rank} tensor, got shape {x.shape}", axis="rank")


def _same_padding(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _padding(h, w, kh, kw, stride, padding):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        return _same_padding(h, kh, stride), _same_padding(w, kw, stride)
    raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv_output_size(size, k, stride, padding):
    """Spatial output length of a convolution or pooling window along one axis."""
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def _pad(x, pads, value=0.0):
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)


def _unpad(g, pads):
    (pt, pb), (pl, pr) = pads
    h, w = g.shape[1], g.shape[2]
    return g[:, pt:h - pb, pl:w - pr, :]


def _window_slice(a, b, ho, wo, stride):
    return (slice(None), slice(a, a + stride * (ho - 1) + 1, stride),
            slice(b, b + stride * (wo - 1) + 1, stride), slice(None))


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}", axis=_first_mismatch(a.shape, b.shape))

    def backward(g):
        return g, g

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def _first_mismatch(s1, s2):
    if len(s1) != len(s2):
        return "rank"
    for i, (p, q) in enumerate(zip(s1, s2)):
        if p != q:
            return i
    return None


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward)


def flatten(x):
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def sum(x):
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x):
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def mul_const(x, c):
    """Multiply by a constant array (no gradient flows to ``c``)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(x.data * c, (x,), backward)


def zero_pad(x, pad):
    """Pad the spatial axes with zeros; ``pad`` is an int or ((top, bottom), (left, right))."""
    x = as_tensor(x)
    _check_rank(x, 4, "zero_pad")
    if isinstance(pad, int):
        pad = ((pad, pad), (pad, pad))

    def backward(g):
        return (_unpad(g, pad),)

    return Tensor.from_op(_pad(x.data, pad), (x,), backward)


# ---------------------------------------------------------------------------
# dense / convolution
# ---------------------------------------------------------------------------

def dense(x, kernel, bias=None):
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 2, "dense")
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"dense input width {x.shape[1]} does not match kernel {kernel.shape}", axis=1)
    parents = [x, kernel]
    out = x.data @ kernel.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({kernel.shape[1]},)", axis=0)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ kernel.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, backward)


def _im2col(xp, kh, kw, stride, ho, wo):
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    # (N, Ho, Wo, C, kh, kw) -> (N*Ho*Wo, kh*kw*C) matching kernel.reshape(kh*kw*C, O)
    n, c = xp.shape[0], xp.shape[3]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(x, kernel, bias=None, stride=1, padding="valid"):
    """2-D cross-correlation. ``x`` is NHWC, ``kernel`` is (kh, kw, in_ch, out_ch)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 4, "conv2d")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.shape}", axis="rank")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but kernel expects {cin}", axis=3)
    pads = _padding(h, w, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < kh:
        raise ShapeError(f"input height {h} smaller than kernel height {kh}", axis=1)
    if wp < kw:
        raise ShapeError(f"input width {w} smaller than kernel width {kw}", axis=2)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)", axis=0)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[_window_slice(a, b, ho, wo, stride)] += dcols[:, :, :, a, b, :]
            dx = _unpad(dxp, pads)
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, backward)


def depthwise_conv2d(x, kernel, stride=1, padding="valid"):
    """Per-channel spatial filtering. ``kernel`` is (kh, kw, in_ch, 1)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 4, "depthwise_conv2d")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4 or kernel.shape[3] != 1:
        raise ShapeError(f"depthwise kernel must be (kh, kw, in_ch, 1), got {kernel.shape}", axis=3)
    kh, kw, cin, _ = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but depthwise kernel expects {cin}", axis=3)
    pads = _padding(h, w, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < kh or wp < kw:
        raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}", axis=1 if hp < kh else 2)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    wd = kernel.data[:, :, :, 0]

    out = np.zeros((n, ho, wo, c), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[_window_slice(a, b, ho, wo, stride)] * wd[a, b]

    def backward(g):
        dk = np.zeros_like(kernel.data)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for a in range(kh):
            for b in range(kw):
                sl = _window_slice(a, b, ho, wo, stride)
                dk[a, b, :, 0] = (xp[sl] * g).sum(axis=(0, 1, 2))
                if dxp is not None:
                    dxp[sl] += g * wd[a, b]
        return (None if dxp is None else _unpad(dxp, pads)), dk

    return Tensor.from_op(out, (x, kernel), backward)


def separable_conv2d(x, depthwise_kernel, pointwise_kernel, bias=None, stride=1, padding="valid"):
    """Depthwise spatial filter, then 1x1 pointwise channel mixing, then bias."""
    depthwise_kernel, pointwise_kernel = as_tensor(depthwise_kernel), as_tensor(pointwise_kernel)
    x = as_tensor(x)
    if depthwise_kernel.ndim == 4 and x.ndim == 4 and depthwise_kernel.shape[2] != x.shape[3]:
        raise ShapeError(
            f"depthwise kernel has {depthwise_kernel.shape[2]} channels, input has {x.shape[3]}", axis=3)
    if pointwise_kernel.ndim != 4 or pointwise_kernel.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise kernel must be (1, 1, in_ch, out_ch), got {pointwise_kernel.shape}", axis=0)
    y = depthwise_conv2d(x, depthwise_kernel, stride=stride, padding=padding)
    return conv2d(y, pointwise_kernel, bias)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d(x, window=2, stride=2, padding="valid"):
    """Max pooling. Gradient flows to the first maximal element of each window."""
    x = as_tensor(x)
    _check_rank(x, 4, "maxpool2d")
    n, h, w, c = x.shape
    if padding == "valid" and (h < window or w < window):
        raise ShapeError(f"pool window {window} larger than input {h}x{w}", axis=1 if h < window else 2)
    pads = _padding(h, w, window, window, stride, padding)
    xp = _pad(x.data, pads, value=-np.inf)
    ho = (xp.shape[1] - window) // stride + 1
    wo = (xp.shape[2] - window) // stride + 1
    stacked = np.stack([xp[_window_slice(a, b, ho, wo, stride)]
                        for a in range(window) for b in range(window)])
    winner = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward(g):
        dxp = np.zeros_like(xp)
        k = 0
        for a in range(window):
            for b in range(window):
                dxp[_window_slice(a, b, ho, wo, stride)] += np.where(winner == k, g, 0)
                k += 1
        return (_unpad(dxp, pads),)

    return Tensor.from_op(out, (x,), backward)


def global_average_pool(x):
    x = as_tensor(x)
    _check_rank(x, 4, "global_average_pool")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

    return Tensor.from_op(x.data.mean(axis=(1, 2)), (x,), backward)


# ---------------------------------------------------------------------------
# normalization, regularization, output
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, moving_mean, moving_var, eps=1e-3):
    """Inference-form batch normalization over the channel (last) axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    for t, what in ((gamma, "gamma"), (beta, "beta")):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm {what} shape {t.shape} != ({c},)", axis=x.ndim - 1)
    mu = np.asarray(moving_mean.data if isinstance(moving_mean, Tensor) else moving_mean, dtype=x.dtype)
    var = np.asarray(moving_var.data if isinstance(moving_var, Tensor) else moving_var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        return g * (gamma.data * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def dropout(x, rate, train, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an RngState")
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return mul_const(x, scale)


def softmax(x):
    x = as_tensor(x)
    _check_rank(x, 2, "softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(p, (x,), backward)


def sparse_categorical_crossentropy(probs, labels):
    """Mean of -log(p[label]) with probabilities floored at 1e-7."""
    probs = as_tensor(probs)
    _check_rank(probs, 2, "sparse_categorical_crossentropy")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}", axis=0)
    if n and (labels.min() < 0 or labels.max() >= k):
        bad = sorted(set(labels[(labels < 0) | (labels >= k)].tolist()))
        raise ValidationError(f"labels out of range [0, {k}): {bad}")
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clipped = np.maximum(picked, PROB_FLOOR)
    loss = np.asarray(-np.log(clipped).mean(), dtype=probs.dtype)

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[rows, labels] = np.where(picked >= PROB_FLOOR, -1.0 / (n * clipped), 0.0)
        return (grad * g,)

    return Tensor.from_op(loss, (probs,), backward)
