"""Binary checkpoints: JSON header plus little-endian float32 parameter arrays.

Layout::

    b"VSUACKPT" | uint32 LE header length | UTF-8 JSON header | arrays

The header carries ``format_version``, ``config``, ``vocab_hash``, ``seed``
and the ordered ``params`` list of ``[name, shape]``.  Arrays follow in
exactly that order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, VsuaModel

MAGIC = b"VSUACKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(model: VsuaModel, vocab_hash: str = "", extra: dict | None = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
        "seed": model.seed,
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes()
                    for p in model.params.values())
    return MAGIC + struct.pack("<I", len(hb)) + hb + body


def save(path, model: VsuaModel, vocab_hash: str = "", extra: dict | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = to_bytes(model, vocab_hash, extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def from_bytes(data: bytes, dtype=np.float64) -> tuple[VsuaModel, dict]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a VSUA checkpoint (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    model = VsuaModel(config, seed=int(header["seed"]), dtype=dtype)
    expected = model.param_shapes()
    listed = [(name, tuple(shape)) for name, shape in header["params"]]
    if listed != list(expected.items()):
        raise CheckpointError("checkpoint parameter list does not match its config")
    for name, shape in listed:
        n = int(np.prod(shape)) * 4
        if off + n > len(data):
            raise CheckpointError(f"checkpoint truncated in parameter {name}")
        arr = np.frombuffer(data[off:off + n], dtype="<f4").reshape(shape)
        model.params[name].data = arr.astype(dtype)
        off += n
    if off != len(data):
        raise CheckpointError("trailing bytes after the last parameter")
    return model, header


def load(path, dtype=np.float64) -> tuple[VsuaModel, dict]:
    return from_bytes(Path(path).read_bytes(), dtype)
