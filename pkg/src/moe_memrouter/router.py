"""
Confidence-aware mixing of parametric and retrieved gatings.

    a_mem  = sum_j s_j / sum_m s_m * v_j
    lambda = mean_j s_j                  (over the neighbours actually returned)
    a_final = (1 - lambda) * a + lambda * a_mem

An empty neighbour set, or one whose similarities are all zero, gives
lambda = 0 and leaves the parametric gating untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import MoETransformer
from .store import LayerMemory, NeighborSet, query, query_rows

__all__ = [
    "MixDecision",
    "aggregate_neighbors",
    "confidence",
    "mix",
    "route",
    "mix_rows",
    "selective_gate",
    "KnnAdapter",
    "MemoryMismatch",
]


class MemoryMismatch(ValueError):
    pass


@dataclass
class MixDecision:
    lam: float
    a_parametric: np.ndarray
    a_mem: np.ndarray | None
    a_final: np.ndarray
    neighbors: NeighborSet


def aggregate_neighbors(sims: np.ndarray, values: np.ndarray) -> np.ndarray | None:
    """Similarity-normalised sum of neighbour values; None when no similarity is positive."""
    sims = np.asarray(sims, dtype=np.float64)
    total = sims.sum()
    if sims.size == 0 or not total > 0:
        return None
    return (sims / total) @ np.asarray(values, dtype=np.float64)


def confidence(sims: np.ndarray) -> float:
    sims = np.asarray(sims, dtype=np.float64)
    return float(sims.mean()) if sims.size else 0.0


def mix(a: np.ndarray, a_mem: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return (1.0 - lam) * np.asarray(a, dtype=np.float64) + lam * np.asarray(a_mem, dtype=np.float64)


def _check(model: MoETransformer, memory: LayerMemory) -> None:
    c = model.config
    if memory.dim != c.model_dim or memory.values.shape[1] != c.num_experts:
        raise MemoryMismatch(
            f"memory (d={memory.dim}, N={memory.values.shape[1]}) does not fit model "
            f"(d={c.model_dim}, N={c.num_experts})"
        )


def route(x, layer: int, model: MoETransformer, memory: LayerMemory | None, K: int = 1) -> MixDecision:
    x = np.asarray(x, dtype=np.float64)
    a = model.gate(x, layer)
    if memory is None or len(memory) == 0:
        empty = NeighborSet(np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
        return MixDecision(0.0, a, None, a.copy(), empty)
    _check(model, memory)
    nb = query(memory, x, K)
    a_mem = aggregate_neighbors(nb.similarities, memory.values[nb.indices])
    if a_mem is None:
        return MixDecision(0.0, a, None, a.copy(), nb)
    lam = confidence(nb.similarities)
    return MixDecision(lam, a, a_mem, mix(a, a_mem, lam), nb)


def mix_rows(memory: LayerMemory, X: np.ndarray, A: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised route over rows of router inputs X with parametric gatings A.

    Returns (a_final rows, lambda per row).
    """
    if len(memory) == 0:
        return A, np.zeros(len(A))
    idx, _, sims = query_rows(memory, X, K)
    total = sims.sum(axis=1)
    ok = total > 0
    lam = np.where(ok, sims.mean(axis=1), 0.0)
    w = np.divide(sims, total[:, None], out=np.zeros_like(sims), where=ok[:, None])
    a_mem = np.einsum("qk,qkn->qn", w, memory.values[idx])
    out = (1.0 - lam)[:, None] * A + lam[:, None] * a_mem
    return np.where(ok[:, None], out, A), lam


def selective_gate(example_ppl: float, threshold: float) -> bool:
    """True when retrieval should be used for an example with this baseline perplexity."""
    return example_ppl > threshold


@dataclass
class KnnAdapter:
    """RoutingPlan adapter that mixes every MoE layer's gatings with its memory."""

    memories: dict[int, LayerMemory]
    K: int = 1
    lambdas: list[np.ndarray] = field(default_factory=list)
    retrieval_ns: int = 0
    queried: bool = False

    def __call__(self, layer: int, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        memory = self.memories.get(layer)
        if memory is None or len(memory) == 0:
            self.lambdas.append(np.zeros(len(A)))
            return A
        self.queried = True
        t0 = time.perf_counter_ns()
        out, lam = mix_rows(memory, X, A, self.K)
        self.retrieval_ns += time.perf_counter_ns() - t0
        self.lambdas.append(lam)
        return out
