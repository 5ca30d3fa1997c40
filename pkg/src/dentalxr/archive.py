"""Named-array archives: a text manifest plus one raw little-endian payload.

``save_archive("out/model", arrays)`` writes ``out/model.manifest`` and
``out/model.bin``. The manifest looks like::

    # rdx-archive 1
    @ kind custom_cnn
    conv1/kernel f32 3,3,1,32 0
    conv1/bias f32 32 1152

Lines starting with ``@`` carry string metadata; every other non-comment
line is ``name dtype shape byte_offset`` where the shape is comma-separated
(``-`` for a scalar). Supported dtypes are f32, f64 and i64.
"""

from pathlib import Path

import numpy as np

from dentalxr.errors import ArchiveError
from dentalxr.fileio import atomic_write_bytes, atomic_write_text

HEADER = "# rdx-archive 1"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_CODES = {v: k for k, v in DTYPES.items()}


def archive_files(path):
    """(manifest path, payload path) for an archive base path."""
    path = Path(path)
    if path.suffix in (".manifest", ".bin"):
        path = path.with_suffix("")
    return path.parent / (path.name + ".manifest"), path.parent / (path.name + ".bin")


def _code(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f":
        return "f64" if dt.itemsize == 8 else "f32"
    if dt.kind in "iub":
        return "i64"
    raise ArchiveError(f"cannot store dtype {arr.dtype}")


def save_archive(path, arrays, meta=None):
    """Write ``arrays`` (name -> array) and optional ``meta`` (str -> str)."""
    manifest_path, payload_path = archive_files(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)) or "\n" in str(value):
            raise ArchiveError(f"metadata key {key!r} or its value is not single-token/single-line")
        lines.append(f"@ {key} {value}")
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ArchiveError(f"tensor name {name!r} must be non-empty and contain no whitespace")
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {code} {shape} {offset}")
        chunks.append(raw)
        offset += len(raw)
    atomic_write_bytes(payload_path, b"".join(chunks))
    atomic_write_text(manifest_path, "\n".join(lines) + "\n")
    return manifest_path


def read_manifest(path):
    """Parse a manifest into ({name: (dtype, shape, offset)}, meta)."""
    manifest_path, _ = archive_files(path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ArchiveError(f"archive manifest not found: {manifest_path}") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ArchiveError(f"{manifest_path}: missing '{HEADER}' header")
    entries, meta = {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            parts = line[1:].strip().split(None, 1)
            meta[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        parts = line.split()
        try:
            name, code, shape, offset = parts
            dtype = DTYPES[code]
            shape = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            offset = int(offset)
        except (ValueError, KeyError):
            raise ArchiveError(f"{manifest_path}:{lineno}: malformed entry {line!r}") from None
        entries[name] = (dtype, shape, offset)
    return entries, meta


def load_archive(path, names=None):
    """Read tensors from an archive; returns (arrays, meta).

    ``names`` limits the read to those tensors. Every requested tensor that
    is missing or extends past the end of the payload is reported together
    in one :class:`ArchiveError`.
    """
    entries, meta = read_manifest(path)
    _, payload_path = archive_files(path)
    try:
        payload = payload_path.read_bytes()
    except FileNotFoundError:
        raise ArchiveError(f"archive payload not found: {payload_path}") from None
    wanted = list(entries) if names is None else list(names)
    arrays, problems = {}, []
    for name in wanted:
        if name not in entries:
            problems.append(f"{name}: missing")
            continue
        dtype, shape, offset = entries[name]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset < 0 or offset + size > len(payload):
            problems.append(f"{name}: payload truncated (needs bytes {offset}..{offset + size}, file has {len(payload)})")
            continue
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=size // dtype.itemsize, offset=offset) \
            .reshape(shape).astype(dtype.newbyteorder("="))
    if problems:
        raise ArchiveError(f"cannot load {payload_path.name}", problems)
    return arrays, meta
