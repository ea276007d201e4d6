"""
Dense float64 tensors with reverse-mode differentiation.

Graphs are built by running ordinary Python code over :class:`Tensor`
objects (define-by-run). Every op records its parents and a closure that
maps the output gradient to parent gradients. :func:`backward` walks the
recorded graph once in reverse topological order and returns fresh
gradient arrays; it never writes into the tensors, so calling it twice on
the same graph yields identical results.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GradientError",
    "tensor",
    "backward",
    "finite_diff_check",
    "matmul",
    "softmax",
    "softmax_rows",
    "rms_norm",
    "silu",
    "embedding",
    "cross_entropy",
    "causal_attention",
    "where",
    "scatter_rows",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_lift(other))

    def __rsub__(self, other):
        return _add(_lift(other), -self)

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other))

    def __rtruediv__(self, other):
        return _div(_lift(other), self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError("reshape", old, tuple(shape)) from exc
        return Tensor._make(data, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise ----------------------------------------------------------

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def silu(self) -> "Tensor":
        return silu(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(op, a.shape, b.shape) from exc


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), grad_fn, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), grad_fn, "div")


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(a.data[idx], dtype=DTYPE), (a,), grad_fn, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands must have at least two dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), grad_fn, "matmul")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis of a plain array."""
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = softmax_rows(x.data)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), grad_fn, "softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if weight.shape != x.shape[-1:]:
        raise ShapeError("rms_norm", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    rms = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xh = xd / rms

    def grad_fn(g):
        dy = g * wd
        dx = (dy - xh * (dy * xh).mean(axis=-1, keepdims=True)) / rms
        dw = (g * xh).reshape(-1, wd.shape[0]).sum(axis=0)
        return dx, dw

    return Tensor._make(xh * wd, (x, weight), grad_fn, "rms_norm")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def grad_fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return Tensor._make(xd * sig, (x,), grad_fn, "silu")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), grad_fn, "embedding")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Row-wise -log softmax(logits)[target]; logits is (n, V)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    rows = np.arange(z.shape[0])
    losses = lse - z[rows, targets]
    n = z.shape[0]

    def grad_fn(g):
        p = softmax_rows(z)
        p[rows, targets] -= 1.0
        if reduction == "none":
            return (p * g[:, None],)
        scale = g / n if reduction == "mean" else g
        return (p * scale,)

    if reduction == "none":
        out = losses
    elif reduction == "sum":
        out = np.asarray(losses.sum())
    elif reduction == "mean":
        out = np.asarray(losses.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return Tensor._make(out, (logits,), grad_fn, "cross_entropy")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Multi-head causal scaled dot-product attention over (B, T, d) inputs."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3 or q.shape[-1] % num_heads:
        raise ShapeError("causal_attention", q.shape, k.shape, v.shape)
    B, T, d = q.shape
    dh = d // num_heads
    scale = 1.0 / np.sqrt(dh)

    def heads(a: np.ndarray) -> np.ndarray:
        return a.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    mask = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(mask, (qh @ kh.transpose(0, 1, 3, 2)) * scale, -np.inf)
    p = softmax_rows(scores)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, T, d)

    def grad_fn(g):
        gh = heads(g)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kh
        dk = ds.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, T, d)

        return merge(dq), merge(dk), merge(dv)

    return Tensor._make(out, (q, k, v), grad_fn, "causal_attention")


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from exc
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        g = np.broadcast_to(g, shape)
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), grad_fn, "where")


def scatter_rows(values: Tensor, rows, num_rows: int) -> Tensor:
    """Place ``values`` (m, ...) at distinct ``rows`` of a zero (num_rows, ...) array."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.shape[0] != rows.shape[0]:
        raise ShapeError("scatter_rows", values.shape, rows.shape)
    out = np.zeros((num_rows,) + values.shape[1:], dtype=DTYPE)
    out[rows] = values.data
    return Tensor._make(out, (values,), lambda g: (g[rows],), "scatter_rows")


# -- backward ---------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors not on any path to ``root`` get a zero gradient of their own
    shape.
    """
    wrt = list(wrt)
    if root.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.get(id(node))
            if g is None or node._grad_fn is None:
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=DTYPE).reshape(t.shape) for t in wrt]


class Graph:
    """A rebuildable computation: ``fn(**leaves) -> scalar Tensor``.

    ``forward`` binds numeric leaf values, runs ``fn`` and keeps the
    resulting root; ``backward`` differentiates that root w.r.t. every leaf.
    """

    def __init__(self, fn: Callable[..., Tensor], leaf_names: Sequence[str]):
        self.fn = fn
        self.leaf_names = list(leaf_names)
        self._leaves: dict[str, Tensor] = {}
        self.root: Tensor | None = None

    def forward(self, leaf_values: dict[str, np.ndarray]) -> Tensor:
        missing = set(self.leaf_names) - set(leaf_values)
        if missing:
            raise KeyError(f"unbound leaves: {sorted(missing)}")
        self._leaves = {n: Tensor(leaf_values[n], requires_grad=True, name=n) for n in self.leaf_names}
        self.root = self.fn(**self._leaves)
        return self.root

    def backward(self) -> dict[str, np.ndarray]:
        if self.root is None:
            raise GradientError("backward called before forward")
        names = self.leaf_names
        return dict(zip(names, backward(self.root, [self._leaves[n] for n in names])))


def finite_diff_check(graph: Graph, leaf_values: dict[str, np.ndarray], leaf: str, step: float) -> float:
    """Max relative error between backward() and central differences for ``leaf``.

    Relative error per element is ``|g_fd - g_bw| / max(|g_bw|, 1e-8)``.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    values = {k: np.array(v, dtype=DTYPE) for k, v in leaf_values.items()}
    graph.forward(values)
    analytic = graph.backward()[leaf]

    base = values[leaf]
    numeric = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        orig = base[i]
        base[i] = orig + step
        plus = float(graph.forward(values).data)
        base[i] = orig - step
        minus = float(graph.forward(values).data)
        base[i] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise GradientError(f"non-finite value while perturbing {leaf}{list(i)}")
        numeric[i] = (plus - minus) / (2.0 * step)
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(numeric - analytic) / denom)) if base.size else 0.0
