"""
Toy decoder-only MoE transformer with routing hooks.

Every MoE layer computes its gating as Top-k over a full softmax of the
router logits. A :class:`RoutingPlan` can replace that gating per
(layer, position): with a fixed vector (override), with a differentiable
logit leaf (learnable), or through an ``adapter`` callback that sees the
layer's router inputs and parametric gatings and returns new gatings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "RoutingPlan",
    "ForwardResult",
    "MoETransformer",
    "pi",
    "topk_mask",
    "tiny_config",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    model_dim: int = 64
    num_layers: int = 4
    num_experts: int = 8
    active_experts: int = 2
    num_heads: int = 4
    context_length: int = 128
    expert_hidden_dim: int = 128
    # 0-based layer indices; None means every layer is MoE.
    moe_layers: tuple[int, ...] | None = None
    renormalize_topk: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "num_layers", "num_experts", "active_experts",
                     "num_heads", "context_length", "expert_hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.active_experts <= self.num_experts:
            raise ValueError("need 1 <= active_experts <= num_experts")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.moe_layers is None:
            layers = tuple(range(self.num_layers))
        else:
            layers = tuple(sorted(set(int(i) for i in self.moe_layers)))
        if any(i < 0 or i >= self.num_layers for i in layers):
            raise ValueError(f"moe_layers {layers} outside 0..{self.num_layers - 1}")
        object.__setattr__(self, "moe_layers", layers)

    @property
    def moe_layer_ids(self) -> tuple[int, ...]:
        return self.moe_layers

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["moe_layers"] = list(self.moe_layer_ids)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("moe_layers") is not None:
            d["moe_layers"] = tuple(d["moe_layers"])
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The gradient-check instance: d=8, N=4, k=2, L=2."""
    base = dict(vocab_size=16, model_dim=8, num_layers=2, num_experts=4, active_experts=2,
                num_heads=2, context_length=8, expert_hidden_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


def topk_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def pi(logits, k: int, renormalize: bool = False) -> np.ndarray:
    """Top-k of the full softmax of ``logits`` (last axis)."""
    r = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("pi: non-finite logits")
    if not 1 <= k <= r.shape[-1]:
        raise ValueError(f"pi: k={k} outside 1..{r.shape[-1]}")
    rows = r.reshape(-1, r.shape[-1])
    p = ad.softmax_rows(rows)
    g = np.where(topk_mask(p, k), p, 0.0)
    if renormalize:
        g = g / g.sum(axis=-1, keepdims=True)
    return g.reshape(r.shape)


def _pi_tensor(logits: Tensor, k: int, renormalize: bool) -> Tensor:
    probs = ad.softmax(logits)
    g = ad.where(topk_mask(probs.data, k), probs, 0.0)
    if renormalize:
        g = g / g.sum(axis=-1, keepdims=True)
    return g


Adapter = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RoutingPlan:
    """Per-(layer, position) routing directives for one sequence.

    Slots not named in ``overrides`` or ``learnable`` are PARAMETRIC.
    ``adapter(layer, x, a_param)`` may rewrite the gatings of whole layers;
    it runs after parametric gating and before overrides/learnables.
    """

    overrides: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    learnable: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    adapter: Adapter | None = None

    def directive(self, layer: int, pos: int) -> str:
        if (layer, pos) in self.learnable:
            return "LEARNABLE"
        if (layer, pos) in self.overrides:
            return "OVERRIDE"
        return "PARAMETRIC"

    def is_parametric(self) -> bool:
        return not (self.overrides or self.learnable or self.adapter)

    def validate(self, moe_layers, seq_len: int, num_experts: int) -> None:
        clash = set(self.overrides) & set(self.learnable)
        if clash:
            raise ValueError(f"slots with two directives: {sorted(clash)[:5]}")
        for (layer, pos), v in list(self.overrides.items()) + list(self.learnable.items()):
            if layer not in moe_layers:
                raise ValueError(f"directive for non-MoE layer {layer}")
            if not 0 <= pos < seq_len:
                raise ValueError(f"directive position {pos} outside sequence of length {seq_len}")
            shape = v.shape
            if shape != (num_experts,):
                raise ValueError(f"directive at {(layer, pos)} has shape {shape}, expected ({num_experts},)")


@dataclass
class ForwardResult:
    logits: Tensor
    router_inputs: dict[int, np.ndarray]  # layer -> (B*T, d)
    gatings: dict[int, np.ndarray]  # layer -> (B*T, N), the gatings actually used
    params: dict[str, Tensor] | None = None


class MoETransformer:
    """Pre-norm transformer whose FFN sublayers are (mostly) MoE.

    Parameters live in ``self.params`` as float64 arrays; they are never
    mutated by forward passes.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        expected = self.param_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        extra = set(params) - set(expected)
        if extra:
            raise ValueError(f"unexpected parameters: {sorted(extra)[:5]}")

    # -- construction ---------------------------------------------------------

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        V, d, H, N = config.vocab_size, config.model_dim, config.expert_hidden_dim, config.num_experts
        shapes: dict[str, tuple[int, ...]] = {
            "tok_emb": (V, d),
            "pos_emb": (config.context_length, d),
        }
        moe = set(config.moe_layer_ids)
        for layer in range(config.num_layers):
            p = f"layers.{layer}."
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "wqkv"] = (d, 3 * d)
            shapes[p + "wo"] = (d, d)
            shapes[p + "ffn_norm"] = (d,)
            if layer in moe:
                shapes[p + "router"] = (d, N)
                for i in range(N):
                    shapes[p + f"experts.{i}.w1"] = (d, H)
                    shapes[p + f"experts.{i}.w2"] = (H, d)
            else:
                shapes[p + "ffn.w1"] = (d, H)
                shapes[p + "ffn.w2"] = (H, d)
        shapes["final_norm"] = (d,)
        shapes["lm_head"] = (d, V)
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "MoETransformer":
        """Random init, rounded to float32-representable values."""
        rng = np.random.default_rng(seed)
        depth_scale = 1.0 / np.sqrt(2.0 * config.num_layers)
        params = {}
        for name, shape in cls.param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                w = np.ones(shape)
            elif name in ("tok_emb", "pos_emb"):
                w = rng.normal(0.0, 1.0 if name == "tok_emb" else 0.1, shape)
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
                if leaf in ("wo", "w2"):
                    w *= depth_scale
                elif name == "lm_head":
                    # near-uniform predictions before training
                    w *= 0.1
            params[name] = w.astype(np.float32).astype(np.float64)
        return cls(config, params)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].astype("<f4").tobytes())
        return h.hexdigest()

    # -- pieces ---------------------------------------------------------------

    def router_logits(self, x: np.ndarray, layer: int) -> np.ndarray:
        """x @ W_r for one d-vector or a batch of rows."""
        if layer not in self.config.moe_layer_ids:
            raise ValueError(f"layer {layer} is not an MoE layer")
        w = self.params[f"layers.{layer}.router"]
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != w.shape[0]:
            raise ad.ShapeError("router_logits", x.shape, w.shape)
        return x @ w

    def gate(self, x: np.ndarray, layer: int) -> np.ndarray:
        c = self.config
        return pi(self.router_logits(x, layer), c.active_experts, c.renormalize_topk)

    def _expert(self, x: Tensor, layer: int, i: int, P) -> Tensor:
        p = f"layers.{layer}.experts.{i}."
        return ad.silu(x @ P[p + "w1"]) @ P[p + "w2"]

    def _moe_mix(self, x: Tensor, gating: Tensor, layer: int, P) -> Tensor:
        """sum_i gating[:, i] * E_i(x), evaluating each expert only on its active rows."""
        n = x.shape[0]
        out: Tensor | None = None
        for i in range(self.config.num_experts):
            rows = np.flatnonzero(gating.data[:, i] != 0.0)
            if rows.size == 0:
                continue
            y = self._expert(x[rows], layer, i, P) * gating[rows, i : i + 1]
            contrib = ad.scatter_rows(y, rows, n)
            out = contrib if out is None else out + contrib
        if out is None:
            out = Tensor(np.zeros(x.shape))
        return out

    def moe_layer_forward(self, x, gating, layer: int) -> np.ndarray:
        """Expert mixture for a single d-vector (or rows) under a given gating."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(gating, dtype=np.float64))
        if g.shape != (x.shape[0], self.config.num_experts):
            raise ad.ShapeError("moe_layer_forward", x.shape, g.shape)
        P = {k: Tensor(v) for k, v in self.params.items()}
        return self._moe_mix(Tensor(x), Tensor(g), layer, P).data.squeeze()

    # -- full forward ---------------------------------------------------------

    def forward(self, tokens, plan: RoutingPlan | None = None, track_params: bool = False) -> ForwardResult:
        """Teacher-forced forward over ``tokens`` of shape (T,) or (B, T).

        Returns logits shaped like ``tokens`` plus a vocab axis. A non-trivial
        ``plan`` is only allowed for a single sequence.
        """
        c = self.config
        toks = np.asarray(tokens, dtype=np.int64)
        single = toks.ndim == 1
        if single:
            toks = toks[None, :]
        if toks.ndim != 2:
            raise ad.ShapeError("forward", toks.shape)
        B, T = toks.shape
        if T == 0 or T > c.context_length:
            raise ValueError(f"sequence length {T} outside 1..{c.context_length}")
        if toks.min() < 0 or toks.max() >= c.vocab_size:
            raise ValueError(f"unknown token id (vocab size {c.vocab_size})")
        plan = plan or RoutingPlan()
        if not plan.is_parametric():
            if B != 1:
                raise ValueError("routing plans apply to a single sequence")
            plan.validate(c.moe_layer_ids, T, c.num_experts)

        P = {k: Tensor(v, requires_grad=track_params, name=k) for k, v in self.params.items()}
        moe = set(c.moe_layer_ids)
        d = c.model_dim

        h = ad.embedding(P["tok_emb"], toks) + P["pos_emb"][:T]
        router_inputs: dict[int, np.ndarray] = {}
        gatings: dict[int, np.ndarray] = {}
        for layer in range(c.num_layers):
            pre = f"layers.{layer}."
            a = ad.rms_norm(h, P[pre + "attn_norm"])
            qkv = a @ P[pre + "wqkv"]
            q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
            h = h + ad.causal_attention(q, k, v, c.num_heads) @ P[pre + "wo"]

            x = ad.rms_norm(h, P[pre + "ffn_norm"]).reshape(B * T, d)
            if layer in moe:
                g = self._route(x, layer, plan, P, T)
                router_inputs[layer] = x.data
                gatings[layer] = g.data
                f = self._moe_mix(x, g, layer, P)
            else:
                f = ad.silu(x @ P[pre + "ffn.w1"]) @ P[pre + "ffn.w2"]
            h = h + f.reshape(B, T, d)

        logits = ad.rms_norm(h, P["final_norm"]) @ P["lm_head"]
        if single:
            logits = logits.reshape(T, c.vocab_size)
        return ForwardResult(logits, router_inputs, gatings, P if track_params else None)

    def _route(self, x: Tensor, layer: int, plan: RoutingPlan, P, T: int) -> Tensor:
        c = self.config
        logits = x @ P[f"layers.{layer}.router"]
        learn = sorted(pos for (lay, pos) in plan.learnable if lay == layer)
        if learn:
            leaves = [plan.learnable[(layer, pos)].reshape(1, -1) for pos in learn]
            stacked = leaves[0]
            for extra in leaves[1:]:
                stacked = _concat_rows(stacked, extra)
            rowmask = np.zeros((T, 1), dtype=bool)
            rowmask[learn] = True
            logits = ad.where(rowmask, ad.scatter_rows(stacked, learn, T), logits)
        g = _pi_tensor(logits, c.active_experts, c.renormalize_topk)

        if plan.adapter is not None:
            new = np.asarray(plan.adapter(layer, x.data, g.data), dtype=np.float64)
            if new.shape != g.shape:
                raise ad.ShapeError("adapter", new.shape, g.shape)
            if learn:
                keep = np.zeros((T, 1), dtype=bool)
                keep[learn] = True
                g = ad.where(keep, g, Tensor(new))
            else:
                g = Tensor(new)

        fixed = sorted(pos for (lay, pos) in plan.overrides if lay == layer)
        if fixed:
            const = np.zeros(g.shape)
            for pos in fixed:
                const[pos] = plan.overrides[(layer, pos)]
            rowmask = np.zeros((T, 1), dtype=bool)
            rowmask[fixed] = True
            g = ad.where(rowmask, Tensor(const), g)
        return g


def _concat_rows(a: Tensor, b: Tensor) -> Tensor:
    n = a.shape[0] + b.shape[0]
    top = ad.scatter_rows(a, np.arange(a.shape[0]), n)
    bottom = ad.scatter_rows(b, np.arange(a.shape[0], n), n)
    return top + bottom
