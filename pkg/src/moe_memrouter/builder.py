"""
Offline memory construction.

For every reference token the routing logits of all MoE layers at that
position are replaced by free leaves, initialised to the parametric logits,
and moved by S plain gradient steps on that token's NLL. The stored value is
the Top-k gating of the final logits; the key is the router input seen in the
unmodified (fully parametric) forward pass.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Corpus
from .model import MoETransformer, RoutingPlan, pi
from .store import LayerMemory, estimate_gamma, to_f32_floor

log = logging.getLogger(__name__)

MODES = ("strict", "fast")


@dataclass(frozen=True)
class BuildParams:
    eta: float = 2e-2
    steps: int = 1
    mode: str = "strict"
    accept_only_improving: bool = False
    kernel: str = "rbf"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SequenceResult:
    """Optimised logits for one sequence; row t is the position predicting token t+1."""

    initial: dict[int, np.ndarray]  # layer -> (T-1, N) parametric logits
    final: dict[int, np.ndarray]  # layer -> (T-1, N) r^(S)
    keys: dict[int, np.ndarray]  # layer -> (T-1, d)
    skipped: np.ndarray  # bool (T-1,)
    nll_before: np.ndarray
    nll_after: np.ndarray


@dataclass
class BuildReport:
    num_tokens: int = 0
    num_skipped: int = 0
    mean_nll_before: float = float("nan")
    mean_nll_after: float = float("nan")
    frac_improved: float = float("nan")
    num_rejected: int = 0
    seconds: float = 0.0
    mode: str = "strict"
    approximate_gradient: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def collect_keys(model: MoETransformer, corpus: Corpus) -> dict[int, list[np.ndarray]]:
    """Router inputs of every MoE layer and position under parametric routing."""
    keys: dict[int, list[np.ndarray]] = {layer: [] for layer in model.config.moe_layer_ids}
    for seq in corpus.sequences:
        if len(seq) == 0:
            for layer in keys:
                keys[layer].append(np.zeros((0, model.config.model_dim)))
            continue
        res = model.forward(seq)
        for layer in keys:
            keys[layer].append(res.router_inputs[layer])
    return keys


def token_nll(model: MoETransformer, seq, t: int, gatings: dict[int, np.ndarray] | None = None) -> float:
    """NLL of ``seq[t+1]`` from the prefix ``seq[:t+1]``, optionally overriding position t's gatings."""
    plan = RoutingPlan(overrides={(layer, t): g for layer, g in (gatings or {}).items()})
    logits = model.forward(np.asarray(seq[: t + 1]), plan).logits
    return float(ad.cross_entropy(logits[t : t + 1], [int(seq[t + 1])], "sum").data)


def _strict_position(model, seq, t, r0, params):
    """S steps on the logits of position t; only dL_t/dr_t is used."""
    layers = model.config.moe_layer_ids
    r = {layer: r0[layer].copy() for layer in layers}
    prefix = np.asarray(seq[: t + 1])
    target = [int(seq[t + 1])]
    loss_value = None
    for _ in range(params.steps):
        leaves = {layer: Tensor(r[layer], requires_grad=True) for layer in layers}
        plan = RoutingPlan(learnable={(layer, t): leaves[layer] for layer in layers})
        logits = model.forward(prefix, plan).logits
        loss = ad.cross_entropy(logits[t : t + 1], target, "sum")
        grads = ad.backward(loss, [leaves[layer] for layer in layers])
        if loss_value is None:
            loss_value = float(loss.data)
        if not (math.isfinite(float(loss.data)) and all(np.all(np.isfinite(g)) for g in grads)):
            return None, loss_value
        for layer, g in zip(layers, grads):
            r[layer] = r[layer] - params.eta * g
    return r, loss_value


def strict_gradient(model: MoETransformer, seq, t: int, logits_at_t: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """dL_t/dr_t for every MoE layer at the given logits (Top-k mask held fixed)."""
    layers = model.config.moe_layer_ids
    leaves = {layer: Tensor(np.asarray(logits_at_t[layer], dtype=np.float64), requires_grad=True) for layer in layers}
    plan = RoutingPlan(learnable={(layer, t): leaves[layer] for layer in layers})
    logits = model.forward(np.asarray(seq[: t + 1]), plan).logits
    loss = ad.cross_entropy(logits[t : t + 1], [int(seq[t + 1])], "sum")
    return dict(zip(layers, ad.backward(loss, [leaves[layer] for layer in layers])))


def strict_loss(model: MoETransformer, seq, t: int, logits_at_t: dict[int, np.ndarray]) -> float:
    """L_t as a function of position t's routing logits, with the true Top-k selection."""
    c = model.config
    gatings = {layer: pi(r, c.active_experts, c.renormalize_topk) for layer, r in logits_at_t.items()}
    return token_nll(model, seq, t, gatings)


def optimize_token_logits(model: MoETransformer, seq, params: BuildParams = BuildParams(),
                          evaluate: bool = True) -> SequenceResult:
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) < 2:
        raise ValueError("optimize_token_logits needs a sequence with at least one target (length >= 2)")
    c = model.config
    layers = c.moe_layer_ids
    T = len(seq)
    n = T - 1

    base = model.forward(seq)
    keys = {layer: base.router_inputs[layer][:n] for layer in layers}
    initial = {layer: model.router_logits(keys[layer], layer) for layer in layers}
    nll_base = ad.cross_entropy(base.logits[:n], seq[1:], "none").data
    final = {layer: initial[layer].copy() for layer in layers}
    skipped = np.zeros(n, dtype=bool)

    if params.steps > 0 and params.mode == "strict":
        for t in range(n):
            r, _ = _strict_position(model, seq, t, {layer: initial[layer][t] for layer in layers}, params)
            if r is None:
                skipped[t] = True
                continue
            for layer in layers:
                final[layer][t] = r[layer]
    elif params.steps > 0:
        # one summed-loss backward per step; later tokens leak into dr_t
        for _ in range(params.steps):
            leaves = {(layer, t): Tensor(final[layer][t], requires_grad=True) for layer in layers for t in range(n)}
            logits = model.forward(seq, RoutingPlan(learnable=leaves)).logits
            loss = ad.cross_entropy(logits[:n], seq[1:], "sum")
            order = list(leaves)
            grads = ad.backward(loss, [leaves[s] for s in order])
            bad = not math.isfinite(float(loss.data))
            for (layer, t), g in zip(order, grads):
                if bad or not np.all(np.isfinite(g)):
                    skipped[t] = True
                else:
                    final[layer][t] = final[layer][t] - params.eta * g

    nll_after = np.full(n, np.nan)
    if evaluate:
        nll_before = np.array([token_nll(model, seq, t) for t in range(n)])
        for t in range(n):
            if skipped[t]:
                continue
            gatings = {layer: to_f32_floor(pi(final[layer][t], c.active_experts, c.renormalize_topk))
                       for layer in layers}
            nll_after[t] = token_nll(model, seq, t, gatings)
    else:
        nll_before = nll_base
    return SequenceResult(initial, final, keys, skipped, nll_before, nll_after)


def _threads() -> int:
    import os

    try:
        return max(1, int(os.environ.get("MOE_MEMROUTER_THREADS", "1")))
    except ValueError:
        return 1


def build_memory(model: MoETransformer, corpus: Corpus, params: BuildParams = BuildParams()
                 ) -> tuple[dict[int, LayerMemory], BuildReport]:
    """Per-layer memories {(x_t, pi(r_t^(S)))} over every predicted reference token."""
    t0 = time.perf_counter_ns()
    c = model.config
    layers = c.moe_layer_ids
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus.sequences if len(s) >= 2]
    evaluate = True

    def work(seq):
        return optimize_token_logits(model, seq, params, evaluate=evaluate)

    if _threads() > 1 and len(seqs) > 1:
        with ThreadPoolExecutor(_threads()) as pool:
            results = list(pool.map(work, seqs))
    else:
        results = [work(s) for s in seqs]

    keys = {layer: [] for layer in layers}
    values = {layer: [] for layer in layers}
    before, after = [], []
    skipped = rejected = 0
    for res in results:
        for t in range(len(res.skipped)):
            if res.skipped[t]:
                skipped += 1
                continue
            chosen = {layer: to_f32_floor(pi(res.final[layer][t], c.active_experts, c.renormalize_topk))
                      for layer in layers}
            nll_new = res.nll_after[t]
            if params.accept_only_improving and not nll_new <= res.nll_before[t]:
                rejected += 1
                chosen = {layer: to_f32_floor(pi(res.initial[layer][t], c.active_experts, c.renormalize_topk))
                          for layer in layers}
                nll_new = res.nll_before[t]
            for layer in layers:
                keys[layer].append(res.keys[layer][t].astype(np.float32).astype(np.float64))
                values[layer].append(chosen[layer])
            before.append(res.nll_before[t])
            after.append(nll_new)

    memories = {}
    for layer in layers:
        K = np.array(keys[layer]).reshape(-1, c.model_dim)
        Vv = np.array(values[layer]).reshape(-1, c.num_experts)
        memories[layer] = LayerMemory(layer, K, Vv, kernel=params.kernel, gamma=estimate_gamma(K))

    total = sum(len(r.skipped) for r in results)
    report = BuildReport(
        num_tokens=total,
        num_skipped=skipped,
        num_rejected=rejected,
        mode=params.mode,
        approximate_gradient=params.mode == "fast",
        seconds=(time.perf_counter_ns() - t0) / 1e9,
    )
    if before:
        b, a = np.array(before), np.array(after)
        report.mean_nll_before = float(b.mean())
        report.mean_nll_after = float(a.mean())
        report.frac_improved = float(np.mean(a < b))
    if total and skipped > 0.1 * total:
        msg = f"{skipped}/{total} tokens skipped for non-finite gradients"
        report.warnings.append(msg)
        log.warning(msg)
    return memories, report


def strict_gradient_error(model: MoETransformer, seq, step: float = 1e-3) -> float:
    """Max relative error of STRICT dL_t/dr_t against central differences, over all (t, layer).

    Logits are taken at their parametric values; the finite differences use
    the true Top-k selection, so a perturbation that flips the selected set
    shows up as a large error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    seq = np.asarray(seq, dtype=np.int64)
    base = model.forward(seq)
    worst = 0.0
    for t in range(len(seq) - 1):
        r0 = {layer: model.router_logits(base.router_inputs[layer][t], layer) for layer in base.router_inputs}
        grads = strict_gradient(model, seq, t, r0)
        for layer, g in grads.items():
            for j in range(len(g)):
                hi = {k: v.copy() for k, v in r0.items()}
                lo = {k: v.copy() for k, v in r0.items()}
                hi[layer][j] += step
                lo[layer][j] -= step
                fd = (strict_loss(model, seq, t, hi) - strict_loss(model, seq, t, lo)) / (2 * step)
                worst = max(worst, abs(fd - g[j]) / max(abs(g[j]), 1e-8))
    return worst
