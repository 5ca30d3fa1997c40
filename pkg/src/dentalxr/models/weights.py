"""Saving and loading network weights through the archive format."""

import json

from dentalxr.archive import DTYPES, load_archive, read_manifest, save_archive
from dentalxr.errors import ArchiveError
from dentalxr.models.network import Network
from dentalxr.models.spec import rebuild


def save_weights(network, path, extra_meta=None):
    """Store every parameter as f32 together with the spec's builder record."""
    meta = {"model": network.spec.name}
    if network.spec.origin is not None:
        meta["origin"] = json.dumps(network.spec.origin, separators=(",", ":"))
    meta.update(extra_meta or {})
    arrays = {name: t.data.astype(DTYPES["f32"]) for name, t in network.params.items()}
    return save_archive(path, arrays, meta)


def load_weights(spec, path):
    """Build a fitted :class:`Network` for ``spec`` from an archive.

    Loading is all or nothing: every missing tensor, shape or dtype mismatch
    and truncated entry is collected and reported in a single ArchiveError.
    Tensors in the archive that the spec does not name are ignored.
    """
    entries, _ = read_manifest(path)
    problems, readable = [], []
    for name, pdef, _ in spec.parameters():
        if name not in entries:
            problems.append(f"{name}: missing")
            continue
        dtype, shape, _ = entries[name]
        if shape != tuple(pdef.shape):
            problems.append(f"{name}: shape {shape} in archive, model expects {tuple(pdef.shape)}")
        elif dtype != DTYPES["f32"]:
            problems.append(f"{name}: dtype {dtype} in archive, expected little-endian float32")
        else:
            readable.append(name)
    arrays = {}
    try:
        arrays, _ = load_archive(path, readable)
    except ArchiveError as exc:
        problems += exc.problems or [str(exc)]
    if problems:
        raise ArchiveError(f"weights do not fit {spec.name} ({len(problems)} problem(s))", problems)
    return Network(spec, arrays, fitted=True)


def load_model(path):
    """Rebuild the spec recorded in an archive and load its weights."""
    _, meta = read_manifest(path)
    if "origin" not in meta:
        raise ArchiveError(f"{path}: archive does not record how to rebuild its model")
    builder, kwargs = json.loads(meta["origin"])
    if "input_shape" in kwargs:
        kwargs["input_shape"] = tuple(kwargs["input_shape"])
    if "filters" in kwargs:
        kwargs["filters"] = tuple(kwargs["filters"])
    return load_weights(rebuild((builder, kwargs)), path)


HEAD_LAYERS = ("fc", "predictions")


def load_backbone(spec, path, seed=0):
    """Load every tensor except the classification head from an archive.

    The head (``fc`` and ``predictions``) is freshly initialised from
    ``seed``; the rest follows the same all-or-nothing rule as
    :func:`load_weights`.
    """
    head = tuple(f"{name}/" for name in HEAD_LAYERS)
    body = [(n, d) for n, d, _ in spec.parameters() if not n.startswith(head)]
    entries, _ = read_manifest(path)
    problems, readable = [], []
    for name, pdef in body:
        if name not in entries:
            problems.append(f"{name}: missing")
        elif entries[name][1] != tuple(pdef.shape):
            problems.append(f"{name}: shape {entries[name][1]} in archive, model expects {tuple(pdef.shape)}")
        else:
            readable.append(name)
    arrays = {}
    try:
        arrays, _ = load_archive(path, readable)
    except ArchiveError as exc:
        problems += exc.problems or [str(exc)]
    if problems:
        raise ArchiveError(f"backbone weights do not fit {spec.name} ({len(problems)} problem(s))", problems)
    params = Network.initialize(spec, seed).state()
    params.update({n: a.astype(params[n].dtype) for n, a in arrays.items()})
    return Network(spec, params)
