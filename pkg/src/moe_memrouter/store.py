"""
Per-layer exact nearest-neighbour memory over router inputs.

Retrieval always ranks by squared L2 distance; the kernel only decides how
retrieved neighbours are weighted. Ties in distance go to the lower row id.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "LayerMemory",
    "NeighborSet",
    "MemoryFileError",
    "estimate_gamma",
    "similarity",
    "similarities",
    "query",
    "query_rows",
    "save_memory",
    "load_memory",
    "to_f32_floor",
]

KERNELS = ("rbf", "cosine")
MAGIC = b"MOEMEM1\0"
VERSION = 1
GAMMA_SAMPLE = 1024
_CHUNK_ELEMS = 1 << 22


class MemoryFileError(ValueError):
    pass


def to_f32_floor(x: np.ndarray) -> np.ndarray:
    """Round nonnegative values to float32 without ever rounding up."""
    x = np.asarray(x, dtype=np.float64)
    y = x.astype(np.float32)
    up = y.astype(np.float64) > x
    y[up] = np.nextafter(y[up], np.float32(0))
    return y.astype(np.float64)


@dataclass
class LayerMemory:
    layer_id: int
    keys: np.ndarray  # (M, d)
    values: np.ndarray  # (M, N) dense gatings
    kernel: str = "rbf"
    gamma: float = 1.0

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.ndim != 2 or self.values.ndim != 2 or len(self.keys) != len(self.values):
            raise ValueError(f"keys {self.keys.shape} and values {self.values.shape} are not row-aligned")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "rbf" and not self.gamma > 0:
            raise ValueError("RBF memory needs gamma > 0")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def with_kernel(self, kernel: str) -> "LayerMemory":
        return replace(self, kernel=kernel)


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray  # squared L2
    similarities: np.ndarray

    @property
    def empty(self) -> bool:
        return self.indices.size == 0

    def __len__(self) -> int:
        return int(self.indices.size)


def _sq_dists(X: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Exact ||x - k||^2 for every (row of X, key), computed by differences."""
    out = np.empty((X.shape[0], keys.shape[0]))
    step = max(1, _CHUNK_ELEMS // max(1, keys.size))
    for i in range(0, X.shape[0], step):
        diff = X[i : i + step, None, :] - keys[None, :, :]
        out[i : i + step] = np.einsum("qmd,qmd->qm", diff, diff)
    return out


def estimate_gamma(keys: np.ndarray, seed: int = 0) -> float:
    """RBF bandwidth 1 / (2 * dbar^2), dbar the mean nearest-neighbour L2 distance."""
    keys = np.asarray(keys, dtype=np.float64)
    M = len(keys)
    if M <= 1:
        return 1.0
    rows = np.arange(M)
    if M > GAMMA_SAMPLE:
        rows = np.sort(np.random.default_rng(seed).choice(M, GAMMA_SAMPLE, replace=False))
    d2 = _sq_dists(keys[rows], keys)
    d2[np.arange(len(rows)), rows] = np.inf
    dbar = float(np.sqrt(d2.min(axis=1)).mean())
    if dbar == 0.0:
        return 1.0
    return 1.0 / (2.0 * dbar * dbar)


def similarities(X: np.ndarray, keys: np.ndarray, sq_dists: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    """Kernel values for matched (query, key) pairs; X is (q, d), keys (q, K, d)."""
    if kernel == "rbf":
        return np.exp(-gamma * sq_dists)
    if kernel == "cosine":
        nx = np.linalg.norm(X, axis=-1)[:, None]
        nk = np.linalg.norm(keys, axis=-1)
        dots = np.einsum("qd,qkd->qk", X, keys)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where((nx > 0) & (nk > 0), dots / (nx * nk), 0.0)
        return np.clip(cos, 0.0, 1.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def similarity(x, key, kernel: str = "rbf", gamma: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    key = np.asarray(key, dtype=np.float64)
    if x.shape != key.shape:
        raise ValueError(f"similarity: shapes {x.shape} and {key.shape} differ")
    diff = x - key
    d2 = np.array([[float(diff @ diff)]])
    return float(similarities(x[None], key[None, None], d2, kernel, gamma)[0, 0])


def query_rows(memory: LayerMemory, X: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched exact top-K: (indices, squared distances, similarities), each (q, min(K, M))."""
    if K < 1:
        raise ValueError("K must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M = len(memory)
    if M == 0:
        z = np.zeros((X.shape[0], 0))
        return z.astype(np.int64), z, z
    if X.shape[1] != memory.dim:
        raise ValueError(f"query dim {X.shape[1]} != memory dim {memory.dim}")
    d2 = _sq_dists(X, memory.keys)
    kk = min(K, M)
    if kk == 1:
        idx = d2.argmin(axis=1)[:, None]
    else:
        idx = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    dist = np.take_along_axis(d2, idx, axis=1)
    sims = similarities(X, memory.keys[idx], dist, memory.kernel, memory.gamma)
    return idx, dist, sims


def query(memory: LayerMemory, x, K: int) -> NeighborSet:
    idx, dist, sims = query_rows(memory, np.asarray(x, dtype=np.float64)[None], K)
    return NeighborSet(idx[0], dist[0], sims[0])


# -- memory file ------------------------------------------------------------


def save_memory(memories: dict[int, LayerMemory], path, meta: dict) -> None:
    """Write MOEMEM1: header JSON, then per layer float32 keys and sparse values.

    ``meta`` must carry ``fingerprint``, ``d``, ``N`` and ``k``; anything
    else in it (e.g. build parameters) is stored verbatim.
    """
    layers = [memories[i] for i in sorted(memories)]
    header = dict(meta)
    header["version"] = VERSION
    header["layers"] = [
        {"layer": m.layer_id, "count": len(m), "kernel": m.kernel, "gamma": float(m.gamma)} for m in layers
    ]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<Q", len(blob))
    out += blob
    for m in layers:
        out += np.ascontiguousarray(m.keys, dtype="<f4").tobytes()
        for row in m.values:
            nz = np.flatnonzero(row)
            out += struct.pack("<H", len(nz))
            rec = np.empty(len(nz), dtype=[("i", "<u2"), ("w", "<f4")])
            rec["i"] = nz
            rec["w"] = row[nz]
            out += rec.tobytes()
    Path(path).write_bytes(bytes(out))


def load_memory(path, expect: dict | None = None) -> tuple[dict[int, LayerMemory], dict]:
    """Read a memory file; ``expect`` may pin ``fingerprint``, ``d``, ``N`` and ``k``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise MemoryFileError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise MemoryFileError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise MemoryFileError(f"{path}: truncated header")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != VERSION:
        raise MemoryFileError(f"{path}: unsupported memory version {header.get('version')}")
    for name, want in (expect or {}).items():
        if header.get(name) != want:
            raise MemoryFileError(f"{path}: {name} mismatch: memory has {header.get(name)!r}, model has {want!r}")
    d, N = int(header["d"]), int(header["N"])
    rec_dtype = np.dtype([("i", "<u2"), ("w", "<f4")])

    memories: dict[int, LayerMemory] = {}
    try:
        for info in header["layers"]:
            M = int(info["count"])
            nbytes = 4 * M * d
            if len(raw) < pos + nbytes:
                raise MemoryFileError(f"{path}: truncated keys of layer {info['layer']}")
            keys = np.frombuffer(raw, dtype="<f4", count=M * d, offset=pos).reshape(M, d).astype(np.float64)
            pos += nbytes
            values = np.zeros((M, N))
            for j in range(M):
                (cnt,) = struct.unpack_from("<H", raw, pos)
                pos += 2
                rec = np.frombuffer(raw, dtype=rec_dtype, count=cnt, offset=pos)
                pos += cnt * rec_dtype.itemsize
                if cnt and rec["i"].max() >= N:
                    raise MemoryFileError(f"{path}: expert index out of range in layer {info['layer']}")
                values[j, rec["i"]] = rec["w"]
            memories[int(info["layer"])] = LayerMemory(
                int(info["layer"]), keys, values, kernel=info["kernel"], gamma=float(info["gamma"])
            )
    except struct.error as exc:
        raise MemoryFileError(f"{path}: truncated value records") from exc
    except ValueError as exc:
        if isinstance(exc, MemoryFileError):
            raise
        raise MemoryFileError(f"{path}: truncated value records ({exc})") from exc
    if pos != len(raw):
        raise MemoryFileError(f"{path}: {len(raw) - pos} trailing bytes")
    return memories, header
