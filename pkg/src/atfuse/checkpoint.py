"""Binary checkpoint format for model weights.

Layout, all integers little-endian:

    magic   7 bytes  b"ATFUSE1"
    cfg_len u32      length of the UTF-8 model-config text
    cfg     bytes    key = value lines, one per config field
    count   u32      number of named arrays
    per array:
        name_len u16, name UTF-8
        ndim     u8,  dims ndim x u32
        raster   float32 little-endian, C order

Weights and running statistics are both stored, so save -> load roundtrips
bitwise. ``load_checkpoint`` rebuilds the model from the embedded config and
refuses blobs whose names or shapes do not match it.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import AtfuseModel, model_config_from_text, model_config_to_text

MAGIC = b"ATFUSE1"


class CheckpointError(ValueError):
    """The bytes on disk are not a usable checkpoint."""


def save_checkpoint(model: AtfuseModel, path: str | os.PathLike) -> None:
    """Write the weight blob at ``path`` and the config text at ``path + '.cfg'``."""
    cfg_text = model_config_to_text(model.config).encode("utf-8")
    arrays = model.named_arrays()
    out = [MAGIC, struct.pack("<I", len(cfg_text)), cfg_text, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(out))
    Path(str(path) + ".cfg").write_text(cfg_text.decode("utf-8"), encoding="utf-8")


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                "truncated checkpoint: wanted %d bytes at offset %d of %d"
                % (n, self.pos, len(self.raw)))
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | os.PathLike) -> AtfuseModel:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("%s: bad checkpoint magic" % path)
    (cfg_len,) = reader.unpack("<I")
    try:
        config = model_config_from_text(reader.take(cfg_len).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("%s: bad embedded config: %s" % (path, exc)) from exc

    model = AtfuseModel(config)
    expected = dict(model.named_arrays())
    (count,) = reader.unpack("<I")
    if count != len(expected):
        raise CheckpointError(
            "%s: %d arrays stored but config implies %d" % (path, count, len(expected)))
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<%dI" % ndim) if ndim else ()
        if name not in expected:
            raise CheckpointError("%s: unexpected array %r for this config" % (path, name))
        if name in seen:
            raise CheckpointError("%s: duplicate array %r" % (path, name))
        target = expected[name]
        if tuple(shape) != target.shape:
            raise CheckpointError(
                "%s: array %r has shape %s, config implies %s"
                % (path, name, tuple(shape), target.shape))
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * n_items), dtype="<f4").reshape(shape)
        target[...] = data
        seen.add(name)
    if reader.pos != len(reader.raw):
        raise CheckpointError("%s: %d trailing bytes" % (path, len(reader.raw) - reader.pos))
    return model


def stored_array_names(path: str | os.PathLike) -> list[str]:
    """Names of the arrays in a checkpoint, without materialising a model."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("%s: bad checkpoint magic" % path)
    (cfg_len,) = reader.unpack("<I")
    reader.take(cfg_len)
    (count,) = reader.unpack("<I")
    names = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        names.append(reader.take(name_len).decode("utf-8"))
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<%dI" % ndim) if ndim else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        reader.take(4 * n_items)
    return names
