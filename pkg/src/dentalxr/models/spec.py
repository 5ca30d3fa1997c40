"""Model descriptions and the architecture builders.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` entries plus
an input shape. Shapes are propagated when the spec is constructed, so a
stack that does not compose fails immediately with a ``ShapeError`` naming
the layer.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from dentalxr.errors import ParameterError, ShapeError
from dentalxr.labels import NUM_CLASSES
from dentalxr.models.layers import kind

CUSTOM_INPUT = (224, 224, 1)
PRETRAINED_INPUT = (224, 224, 3)
CUSTOM_FILTERS = (32, 64, 128, 256)
DENSE_UNITS = 256
DROPOUT_RATE = 0.3
ARCHITECTURES = ("vgg16", "resnet50", "xception")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    config: dict = field(default_factory=dict)
    trainable: bool = True


class ModelSpec:
    def __init__(self, layers, input_shape, num_classes=NUM_CLASSES, name="model"):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = num_classes
        self.name = name
        # (builder name, keyword arguments) when built by one of the builders below
        self.origin = None
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ParameterError(f"duplicate layer names: {', '.join(dup)}")
        self.shapes = []
        self._params = []
        shape = self.input_shape
        for layer in self.layers:
            impl = kind(layer.kind)
            try:
                defs = impl.params(layer.config, shape)
                shape = tuple(impl.out_shape(layer.config, shape))
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r} ({layer.kind}): {exc}", axis=exc.axis) from None
            if any(d < 1 for d in shape):
                raise ShapeError(f"layer {layer.name!r} ({layer.kind}) produces an empty output {shape}", axis=1)
            self.shapes.append(shape)
            for d in defs:
                self._params.append((f"{layer.name}/{d.name}", d, layer))
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != "dense" or last.config.get("activation") != "softmax" \
                or shape != (num_classes,):
            raise ShapeError(f"final layer must be a softmax over {num_classes} classes", axis=-1)

    def __repr__(self):
        return f"ModelSpec({self.name!r}, input={self.input_shape}, layers={len(self.layers)})"

    @property
    def output_shape(self):
        return self.shapes[-1]

    def index(self, layer_name):
        for i, layer in enumerate(self.layers):
            if layer.name == layer_name:
                return i
        raise ParameterError(f"{self.name} has no layer named {layer_name!r}")

    def shape_of(self, layer_name):
        return self.shapes[self.index(layer_name)]

    def parameters(self):
        """(full name, ParamDef, LayerSpec) for every tensor, in layer order."""
        return list(self._params)

    def is_trainable(self, full_name):
        for name, d, layer in self._params:
            if name == full_name:
                return layer.trainable and d.trainable
        raise KeyError(full_name)

    def parameter_count(self, trainable_only=False):
        return sum(int(np.prod(d.shape)) for _, d, layer in self._params
                   if not trainable_only or (layer.trainable and d.trainable))

    def summary(self):
        rows = [f"{'layer':<28}{'kind':<20}{'output':<20}{'params':>12}"]
        for layer, shape in zip(self.layers, self.shapes):
            count = sum(int(np.prod(d.shape)) for _, d, owner in self._params if owner is layer)
            flag = "" if layer.trainable else "  (frozen)"
            rows.append(f"{layer.name:<28}{layer.kind:<20}{str(shape):<20}{count:>12}{flag}")
        rows.append(f"total {self.parameter_count()}, trainable {self.parameter_count(True)}")
        return "\n".join(rows)

    def with_trainable(self, predicate):
        """Copy with each layer's trainable flag set to ``predicate(layer)``."""
        layers = [replace(layer, trainable=bool(predicate(layer))) for layer in self.layers]
        return ModelSpec(layers, self.input_shape, self.num_classes, self.name)


# ---------------------------------------------------------------------------
# custom CNN
# ---------------------------------------------------------------------------

def build_custom_cnn(input_shape=CUSTOM_INPUT, filters=CUSTOM_FILTERS, dense_units=DENSE_UNITS,
                     dropout=DROPOUT_RATE, num_classes=NUM_CLASSES):
    """Four conv/pool/dropout stages, flatten, a ReLU dense layer and a softmax head.

    Defaults give the 224x224x1 network; smaller inputs and widths build the
    same stack for tests and smoke runs. Convolutions use valid padding.
    """
    layers = []
    for i, f in enumerate(filters, start=1):
        layers += [
            LayerSpec("conv2d", f"conv{i}", {"filters": f, "kernel": 3, "padding": "valid", "activation": "relu"}),
            LayerSpec("maxpool2d", f"pool{i}", {"window": 2, "stride": 2}),
            LayerSpec("dropout", f"drop{i}", {"rate": dropout}),
        ]
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc", {"units": dense_units, "activation": "relu"}),
        LayerSpec("dropout", "fc_drop", {"rate": dropout}),
        LayerSpec("dense", "predictions", {"units": num_classes, "activation": "softmax"}),
    ]
    spec = ModelSpec(layers, input_shape, num_classes, name="custom_cnn")
    spec.origin = ("custom_cnn", {"input_shape": list(input_shape), "filters": list(filters),
                                  "dense_units": dense_units, "dropout": dropout, "num_classes": num_classes})
    return spec


# feature taps used by the hybrid path
FEATURE_LAYERS = {"penultimate": "fc_drop", "flatten": "flatten"}


# ---------------------------------------------------------------------------
# pretrained backbones
# ---------------------------------------------------------------------------

def _head(num_classes, units):
    return [
        LayerSpec("global_average_pool", "avg_pool"),
        LayerSpec("dense", "fc", {"units": units, "activation": "relu"}),
        LayerSpec("dense", "predictions", {"units": num_classes, "activation": "softmax"}),
    ]


def _vgg16():
    layers = []
    for block, (width, convs) in enumerate([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)], start=1):
        for j in range(1, convs + 1):
            layers.append(LayerSpec("conv2d", f"block{block}_conv{j}",
                                    {"filters": width, "kernel": 3, "padding": "same", "activation": "relu"}))
        layers.append(LayerSpec("maxpool2d", f"block{block}_pool", {"window": 2, "stride": 2}))
    return layers, "block5_"


def _resnet50():
    eps = 1.001e-5
    layers = [
        LayerSpec("zero_pad", "conv1_pad", {"pad": 3}),
        LayerSpec("conv2d", "conv1_conv", {"filters": 64, "kernel": 7, "stride": 2, "padding": "valid"}),
        LayerSpec("batch_norm", "conv1_bn", {"eps": eps}),
        LayerSpec("activation", "conv1_relu", {"activation": "relu"}),
        LayerSpec("zero_pad", "pool1_pad", {"pad": 1}),
        LayerSpec("maxpool2d", "pool1_pool", {"window": 3, "stride": 2}),
    ]
    for stage, (width, blocks, stride) in enumerate([(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)], start=2):
        for b in range(1, blocks + 1):
            cfg = {"filters": width, "eps": eps}
            if b == 1:
                cfg.update(conv_shortcut=True, stride=stride)
            layers.append(LayerSpec("resnet_block", f"conv{stage}_block{b}", cfg))
    return layers, "conv5_"


def _xception():
    eps = 1e-3
    layers = [
        LayerSpec("conv2d", "block1_conv1", {"filters": 32, "kernel": 3, "stride": 2, "use_bias": False}),
        LayerSpec("batch_norm", "block1_conv1_bn", {"eps": eps}),
        LayerSpec("activation", "block1_conv1_act", {"activation": "relu"}),
        LayerSpec("conv2d", "block1_conv2", {"filters": 64, "kernel": 3, "use_bias": False}),
        LayerSpec("batch_norm", "block1_conv2_bn", {"eps": eps}),
        LayerSpec("activation", "block1_conv2_act", {"activation": "relu"}),
        LayerSpec("xception_down", "block2", {"filters": (128, 128), "pre_relu": False, "eps": eps}),
        LayerSpec("xception_down", "block3", {"filters": (256, 256), "eps": eps}),
        LayerSpec("xception_down", "block4", {"filters": (728, 728), "eps": eps}),
    ]
    layers += [LayerSpec("xception_middle", f"block{b}", {"filters": 728, "eps": eps}) for b in range(5, 13)]
    layers.append(LayerSpec("xception_down", "block13", {"filters": (728, 1024), "eps": eps}))
    for j, width in enumerate((1536, 2048), start=1):
        layers += [
            LayerSpec("separable_conv2d", f"block14_sepconv{j}",
                      {"filters": width, "kernel": 3, "padding": "same", "use_bias": False}),
            LayerSpec("batch_norm", f"block14_sepconv{j}_bn", {"eps": eps}),
            LayerSpec("activation", f"block14_sepconv{j}_act", {"activation": "relu"}),
        ]
    return layers, "block14_"


_BACKBONES = {"vgg16": _vgg16, "resnet50": _resnet50, "xception": _xception}


def build_pretrained(arch, input_shape=PRETRAINED_INPUT, num_classes=NUM_CLASSES, head_units=DENSE_UNITS):
    """Backbone of ``arch`` with every block frozen except the last, plus the
    pooling/dense head. The head is always trainable."""
    arch = str(arch).lower()
    if arch not in _BACKBONES:
        raise ParameterError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCHITECTURES)}")
    backbone, last_block = _BACKBONES[arch]()
    layers = [replace(layer, trainable=layer.name.startswith(last_block))
              for layer in backbone]
    layers += _head(num_classes, head_units)
    spec = ModelSpec(layers, input_shape, num_classes, name=arch)
    spec.origin = ("pretrained", {"arch": arch, "input_shape": list(input_shape), "num_classes": num_classes,
                                  "head_units": head_units})
    return spec


def rebuild(origin):
    """Rebuild a spec from its ``origin`` record (as stored in weight archives)."""
    builder, kwargs = origin
    if builder == "custom_cnn":
        return build_custom_cnn(**kwargs)
    if builder == "pretrained":
        return build_pretrained(**kwargs)
    raise ParameterError(f"unknown model builder {builder!r}")


def backbone_output(spec):
    """Name of the last backbone layer (the one feeding global pooling)."""
    return spec.layers[spec.index("avg_pool") - 1].name
