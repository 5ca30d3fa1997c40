"""Layer kinds that make up a :class:`~dentalxr.models.spec.ModelSpec`.

Each kind knows three things about itself: the output shape for a given
input shape (batch axis excluded), the parameters it owns, and how to run
forward. Parameters are described as ``ParamDef`` entries; the network
creates the tensors and hands them back to ``forward`` keyed by the local
parameter name.
"""

from dataclasses import dataclass

import numpy as np

from dentalxr.errors import ParameterError, ShapeError
from dentalxr.tensor import functional as F
from dentalxr.tensor.blocks import BatchNormParams, LayerParams, residual_block

GLOROT = "glorot"
ZEROS = "zeros"
ONES = "ones"


@dataclass(frozen=True)
class ParamDef:
    name: str
    shape: tuple
    init: str = GLOROT
    trainable: bool = True


def _spatial(in_shape, what):
    if len(in_shape) != 3:
        raise ShapeError(f"{what} expects (H, W, C) input, got {in_shape}", axis="rank")
    return in_shape


def _conv_out(in_shape, k, stride, padding, what):
    h, w, _ = _spatial(in_shape, what)
    if padding == "valid" and (h < k or w < k):
        raise ShapeError(f"{what}: input {h}x{w} smaller than window {k}", axis=1 if h < k else 2)
    return (F.conv_output_size(h, k, stride, padding), F.conv_output_size(w, k, stride, padding))


def _bn_defs(prefix, c):
    return [ParamDef(f"{prefix}/gamma", (c,), ONES), ParamDef(f"{prefix}/beta", (c,), ZEROS),
            ParamDef(f"{prefix}/moving_mean", (c,), ZEROS, trainable=False),
            ParamDef(f"{prefix}/moving_variance", (c,), ONES, trainable=False)]


def _bn(p, prefix, eps):
    return BatchNormParams(p[f"{prefix}/gamma"], p[f"{prefix}/beta"], p[f"{prefix}/moving_mean"].data,
                           p[f"{prefix}/moving_variance"].data, eps)


def _activate(x, activation):
    if activation is None:
        return x
    if activation == "relu":
        return F.relu(x)
    if activation == "softmax":
        return F.softmax(x)
    raise ParameterError(f"unknown activation {activation!r}")


class Conv2D:
    def out_shape(cfg, s):
        h, w = _conv_out(s, cfg["kernel"], cfg.get("stride", 1), cfg.get("padding", "valid"), "conv2d")
        return (h, w, cfg["filters"])

    def params(cfg, s):
        k = cfg["kernel"]
        defs = [ParamDef("kernel", (k, k, s[2], cfg["filters"]))]
        if cfg.get("use_bias", True):
            defs.append(ParamDef("bias", (cfg["filters"],), ZEROS))
        return defs

    def forward(cfg, x, p, ctx):
        y = F.conv2d(x, p["kernel"], p.get("bias"), stride=cfg.get("stride", 1), padding=cfg.get("padding", "valid"))
        return _activate(y, cfg.get("activation"))


class SeparableConv2D:
    def out_shape(cfg, s):
        h, w = _conv_out(s, cfg["kernel"], cfg.get("stride", 1), cfg.get("padding", "valid"), "separable_conv2d")
        return (h, w, cfg["filters"])

    def params(cfg, s):
        k = cfg["kernel"]
        defs = [ParamDef("depthwise_kernel", (k, k, s[2], 1)), ParamDef("pointwise_kernel", (1, 1, s[2], cfg["filters"]))]
        if cfg.get("use_bias", True):
            defs.append(ParamDef("bias", (cfg["filters"],), ZEROS))
        return defs

    def forward(cfg, x, p, ctx):
        y = F.separable_conv2d(x, p["depthwise_kernel"], p["pointwise_kernel"], p.get("bias"),
                               stride=cfg.get("stride", 1), padding=cfg.get("padding", "valid"))
        return _activate(y, cfg.get("activation"))


class BatchNorm:
    def out_shape(cfg, s):
        return s

    def params(cfg, s):
        return [ParamDef(d.name.split("/", 1)[1], d.shape, d.init, d.trainable) for d in _bn_defs("_", s[-1])]

    def forward(cfg, x, p, ctx):
        return F.batch_norm(x, p["gamma"], p["beta"], p["moving_mean"].data, p["moving_variance"].data,
                            cfg.get("eps", 1e-3))


class Activation:
    def out_shape(cfg, s):
        return s

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        return _activate(x, cfg["activation"])


class ZeroPad:
    def out_shape(cfg, s):
        h, w, c = _spatial(s, "zero_pad")
        return (h + 2 * cfg["pad"], w + 2 * cfg["pad"], c)

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        return F.zero_pad(x, cfg["pad"])


class MaxPool:
    def out_shape(cfg, s):
        window = cfg.get("window", 2)
        h, w = _conv_out(s, window, cfg.get("stride", window), cfg.get("padding", "valid"), "maxpool2d")
        if h < 1 or w < 1:
            raise ShapeError(f"maxpool2d output would be empty for input {s}", axis=1)
        return (h, w, s[2])

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        window = cfg.get("window", 2)
        return F.maxpool2d(x, window, cfg.get("stride", window), cfg.get("padding", "valid"))


class Dropout:
    def out_shape(cfg, s):
        if not 0 <= cfg["rate"] < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {cfg['rate']}")
        return s

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        return F.dropout(x, cfg["rate"], ctx.train, ctx.rng)


class Flatten:
    def out_shape(cfg, s):
        return (int(np.prod(s)),)

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        return F.flatten(x)


class GlobalAveragePool:
    def out_shape(cfg, s):
        _spatial(s, "global_average_pool")
        return (s[2],)

    def params(cfg, s):
        return []

    def forward(cfg, x, p, ctx):
        return F.global_average_pool(x)


class Dense:
    def out_shape(cfg, s):
        if len(s) != 1:
            raise ShapeError(f"dense expects a flat input, got {s}", axis="rank")
        return (cfg["units"],)

    def params(cfg, s):
        return [ParamDef("kernel", (s[0], cfg["units"])), ParamDef("bias", (cfg["units"],), ZEROS)]

    def forward(cfg, x, p, ctx):
        return _activate(F.dense(x, p["kernel"], p["bias"]), cfg.get("activation"))


class ResNetBlock:
    """Bottleneck unit (1x1, 3x3, 1x1 convolutions with batch norm).

    ``filters`` is the bottleneck width; the block outputs ``4 * filters``
    channels. With ``conv_shortcut`` the shortcut is a strided 1x1
    projection, otherwise the input passes through unchanged.
    """

    def out_shape(cfg, s):
        h, w = _conv_out(s, 1, cfg.get("stride", 1), "valid", "resnet_block")
        out = (h, w, 4 * cfg["filters"])
        if not cfg.get("conv_shortcut") and out != tuple(s):
            raise ShapeError(f"identity shortcut needs matching shapes, input {s} vs output {out}", axis=3)
        return out

    def params(cfg, s):
        f = cfg["filters"]
        defs = []
        if cfg.get("conv_shortcut"):
            defs += [ParamDef("0_conv/kernel", (1, 1, s[2], 4 * f)), ParamDef("0_conv/bias", (4 * f,), ZEROS)]
            defs += _bn_defs("0_bn", 4 * f)
        for i, (k, cin, cout) in enumerate([(1, s[2], f), (3, f, f), (1, f, 4 * f)], start=1):
            defs += [ParamDef(f"{i}_conv/kernel", (k, k, cin, cout)), ParamDef(f"{i}_conv/bias", (cout,), ZEROS)]
            defs += _bn_defs(f"{i}_bn", cout)
        return defs

    def forward(cfg, x, p, ctx):
        eps = cfg.get("eps", 1.001e-5)
        branch = [(LayerParams(kernel=p[f"{i}_conv/kernel"], bias=p[f"{i}_conv/bias"]), _bn(p, f"{i}_bn", eps))
                  for i in (1, 2, 3)]
        shortcut = None
        if cfg.get("conv_shortcut"):
            shortcut = (LayerParams(kernel=p["0_conv/kernel"], bias=p["0_conv/bias"]), _bn(p, "0_bn", eps))
        return residual_block(x, branch, shortcut, stride=cfg.get("stride", 1))


def _sep_defs(prefix, cin, cout):
    return [ParamDef(f"{prefix}/depthwise_kernel", (3, 3, cin, 1)), ParamDef(f"{prefix}/pointwise_kernel", (1, 1, cin, cout))]


def _sep_bn(x, p, prefix, eps):
    y = F.separable_conv2d(x, p[f"{prefix}/depthwise_kernel"], p[f"{prefix}/pointwise_kernel"], padding="same")
    return _bn(p, f"{prefix}_bn", eps)(y)


class XceptionDownBlock:
    """Entry/exit-flow unit: two separable convs, a strided 3x3 max-pool and a
    strided 1x1 projection shortcut. ``pre_relu`` adds the leading ReLU used by
    every such block except the first."""

    def out_shape(cfg, s):
        h, w, _ = _spatial(s, "xception_down")
        return (-(-h // 2), -(-w // 2), cfg["filters"][1])

    def params(cfg, s):
        f1, f2 = cfg["filters"]
        defs = [ParamDef("residual_conv/kernel", (1, 1, s[2], f2))] + _bn_defs("residual_bn", f2)
        defs += _sep_defs("sepconv1", s[2], f1) + _bn_defs("sepconv1_bn", f1)
        defs += _sep_defs("sepconv2", f1, f2) + _bn_defs("sepconv2_bn", f2)
        return defs

    def forward(cfg, x, p, ctx):
        eps = cfg.get("eps", 1e-3)
        residual = F.conv2d(x, p["residual_conv/kernel"], stride=2, padding="same")
        residual = _bn(p, "residual_bn", eps)(residual)
        y = F.relu(x) if cfg.get("pre_relu", True) else x
        y = F.relu(_sep_bn(y, p, "sepconv1", eps))
        y = _sep_bn(y, p, "sepconv2", eps)
        y = F.maxpool2d(y, 3, 2, "same")
        return F.add(y, residual)


class XceptionMiddleBlock:
    """Three ReLU + separable conv + batch norm stages with an identity shortcut."""

    def out_shape(cfg, s):
        _spatial(s, "xception_middle")
        if s[2] != cfg["filters"]:
            raise ShapeError(f"middle block expects {cfg['filters']} channels, got {s[2]}", axis=3)
        return s

    def params(cfg, s):
        f = cfg["filters"]
        defs = []
        for i in (1, 2, 3):
            defs += _sep_defs(f"sepconv{i}", f, f) + _bn_defs(f"sepconv{i}_bn", f)
        return defs

    def forward(cfg, x, p, ctx):
        eps = cfg.get("eps", 1e-3)
        y = x
        for i in (1, 2, 3):
            y = _sep_bn(F.relu(y), p, f"sepconv{i}", eps)
        return F.add(y, x)


KINDS = {
    "conv2d": Conv2D,
    "separable_conv2d": SeparableConv2D,
    "batch_norm": BatchNorm,
    "activation": Activation,
    "zero_pad": ZeroPad,
    "maxpool2d": MaxPool,
    "dropout": Dropout,
    "flatten": Flatten,
    "global_average_pool": GlobalAveragePool,
    "dense": Dense,
    "resnet_block": ResNetBlock,
    "xception_down": XceptionDownBlock,
    "xception_middle": XceptionMiddleBlock,
}


def kind(name):
    try:
        return KINDS[name]
    except KeyError:
        raise ParameterError(f"unknown layer kind {name!r}") from None
