"""MOEKNN1 checkpoint files.

Layout::

    b"MOEKNN1\\0"
    uint64 LE  header length
    header     UTF-8 JSON: {"config": {...}, "tensors": [{"name", "shape", "dtype"}, ...]}
    payload    each tensor as little-endian float32, in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, MoETransformer

MAGIC = b"MOEKNN1\0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: MoETransformer, path) -> None:
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "tensors": [{"name": n, "shape": list(model.params[n].shape), "dtype": "float32"} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> MoETransformer:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    pos += hlen

    config = ModelConfig.from_dict(header["config"])
    expected = MoETransformer.param_shapes(config)
    params = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry.get('dtype')}")
        if expected.get(name) != shape:
            raise CheckpointError(
                f"{path}: tensor {name} header shape {shape} does not match architecture {expected.get(name)}"
            )
        nbytes = 4 * int(np.prod(shape))
        if len(raw) < pos + nbytes:
            raise CheckpointError(f"{path}: truncated payload at tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after payload")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return MoETransformer(config, params)
