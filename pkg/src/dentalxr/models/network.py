"""Runtime model: a :class:`ModelSpec` bound to parameter tensors."""

from types import SimpleNamespace

import numpy as np

from dentalxr.errors import ShapeError
from dentalxr.models.layers import GLOROT, ONES, ZEROS, kind
from dentalxr.tensor import RngState, Tensor, default_dtype


def glorot_uniform(shape, rng, dtype=None):
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in = receptive * shape[-2] if len(shape) > 1 else shape[0]
    fan_out = receptive * shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype or default_dtype())


def initial_value(pdef, rng, dtype=None):
    dtype = dtype or default_dtype()
    if pdef.init == GLOROT:
        return glorot_uniform(pdef.shape, rng, dtype)
    if pdef.init == ZEROS:
        return np.zeros(pdef.shape, dtype)
    if pdef.init == ONES:
        return np.ones(pdef.shape, dtype)
    raise ValueError(f"unknown initializer {pdef.init!r}")


class Network:
    """Parameters for every tensor named in ``spec``, plus forward evaluation.

    ``fitted`` records whether the weights came from training or an archive;
    it only drives warnings, never behaviour.
    """

    def __init__(self, spec, params, fitted=False):
        self.spec = spec
        self.params = {}
        for name, pdef, layer in spec.parameters():
            value = params[name]
            value = value.data if isinstance(value, Tensor) else np.asarray(value)
            if value.shape != tuple(pdef.shape):
                raise ShapeError(f"{name}: expected shape {tuple(pdef.shape)}, got {value.shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=layer.trainable and pdef.trainable, name=name)
        self.fitted = fitted

    @classmethod
    def initialize(cls, spec, seed=0):
        """Glorot-uniform kernels, zero biases, identity batch-norm statistics.

        Each tensor draws from its own stream keyed by its name, so adding a
        layer never changes the initial values of the others.
        """
        root = RngState(seed).child("init")
        return cls(spec, {name: initial_value(pdef, root.child(name)) for name, pdef, _ in spec.parameters()})

    def trainable(self):
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def state(self):
        """Copies of every parameter array, keyed by full name."""
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, arrays):
        for n, value in arrays.items():
            self.params[n].data[...] = value

    def prepare_input(self, x):
        """Batch of images as float (N, H, W, C); grayscale is replicated when the
        model expects three channels."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        h, w, c = self.spec.input_shape
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:3] != (h, w):
            raise ShapeError(f"{self.spec.name} expects (N, {h}, {w}, {c}) input, got {x.shape}", axis=1)
        if x.shape[3] != c:
            if x.shape[3] == 1:
                x = np.repeat(x, c, axis=3)
            else:
                raise ShapeError(f"{self.spec.name} expects {c} channels, got {x.shape[3]}", axis=3)
        return x.astype(default_dtype(), copy=False)

    def forward(self, x, train=False, rng=None, until=None):
        """Run the stack on a batch; ``until`` stops after the named layer.

        Train mode needs ``rng`` for dropout; each dropout layer draws from
        ``rng`` in layer order.
        """
        stop = self.spec.index(until) if until is not None else len(self.spec.layers) - 1
        ctx = SimpleNamespace(train=train, rng=rng)
        out = Tensor(self.prepare_input(x))
        for layer in self.spec.layers[:stop + 1]:
            prefix = layer.name + "/"
            local = {n[len(prefix):]: t for n, t in self.params.items() if n.startswith(prefix)}
            out = kind(layer.kind).forward(layer.config, out, local, ctx)
        return out

    def predict_proba(self, x, batch_size=64, until=None):
        """Eval-mode outputs as a numpy array, computed in batches."""
        x = np.asarray(x)
        outs = [self.forward(x[i:i + batch_size], until=until).data for i in range(0, len(x), batch_size)]
        if not outs:
            width = self.spec.shape_of(until) if until else self.spec.output_shape
            return np.zeros((0,) + tuple(width), default_dtype())
        return np.concatenate(outs)
