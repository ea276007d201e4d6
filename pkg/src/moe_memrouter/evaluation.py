"""
Teacher-forced evaluation, perplexity buckets, ablation sweeps and reports.

Report files written by :func:`emit_report` leave out wall-clock columns
unless asked for, so that two runs with the same seeds produce identical
bytes; timing goes to a separate file in the CLI.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .builder import BuildParams, BuildReport, build_memory
from .data import Corpus, take_tokens
from .model import MoETransformer, RoutingPlan
from .router import KnnAdapter, MemoryMismatch, selective_gate
from .store import LayerMemory

log = logging.getLogger(__name__)

ZERO_SHOT = "zero_shot"
KNN_MOE = "knn_moe"
KNN_MOE_SELECTIVE = "knn_moe_selective"
MODES = (ZERO_SHOT, KNN_MOE, KNN_MOE_SELECTIVE)
TIMING_FIELDS = ("retrieval_ms", "total_ms")
BUCKETS = ("high", "mid", "low")


@dataclass
class ExampleRow:
    index: int
    n_tokens: int
    nll: float
    ppl: float
    accuracy: float
    mean_lambda: float
    used_retrieval: bool
    retrieval_ms: float
    total_ms: float


@dataclass
class EvalReport:
    rows: list[ExampleRow]
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.meta.get("mode", ZERO_SHOT)

    def aggregate(self) -> dict:
        """Token-weighted NLL/accuracy, corpus PPL, and means over examples."""
        n = sum(r.n_tokens for r in self.rows)
        if not n:
            return {"examples": 0, "tokens": 0}
        nll = sum(r.nll * r.n_tokens for r in self.rows) / n
        acc = sum(r.accuracy * r.n_tokens for r in self.rows) / n
        m = len(self.rows)
        return {
            "examples": m,
            "tokens": n,
            "mean_nll": nll,
            "ppl": math.exp(nll),
            "accuracy": acc,
            "mean_example_ppl": sum(r.ppl for r in self.rows) / m,
            "mean_lambda": sum(r.mean_lambda for r in self.rows) / m,
            "retrieval_fraction": sum(r.used_retrieval for r in self.rows) / m,
            "mean_retrieval_ms": sum(r.retrieval_ms for r in self.rows) / m,
            "mean_total_ms": sum(r.total_ms for r in self.rows) / m,
        }

    def terciles(self) -> dict:
        out = {}
        for name, idx in zip(BUCKETS, tercile_buckets([r.ppl for r in self.rows])):
            rows = [self.rows[i] for i in idx]
            out[name] = {
                "examples": len(rows),
                "mean_nll": float(np.mean([r.nll for r in rows])) if rows else float("nan"),
                "accuracy": float(np.mean([r.accuracy for r in rows])) if rows else float("nan"),
            }
        return out

    def metrics(self) -> list[tuple]:
        """Everything except wall-clock fields; equal across bit-identical runs."""
        return [(r.index, r.n_tokens, r.nll, r.ppl, r.accuracy, r.mean_lambda, r.used_retrieval) for r in self.rows]


def tercile_buckets(ppls: Iterable[float]) -> list[list[int]]:
    """Indices of the [high, mid, low] perplexity thirds.

    Examples are split into three near-equal groups by ascending PPL
    (``np.array_split`` sizes); a value tied across a boundary joins the
    lower bucket.
    """
    ppls = list(ppls)
    order = sorted(range(len(ppls)), key=lambda i: (ppls[i], i))
    sizes = [len(a) for a in np.array_split(np.arange(len(ppls)), 3)]
    slot = np.repeat([0, 1, 2], sizes)  # 0 = low
    for p in range(1, len(order)):
        if ppls[order[p]] == ppls[order[p - 1]]:
            slot[p] = slot[p - 1]
    low, mid, high = ([order[p] for p in range(len(order)) if slot[p] == b] for b in range(3))
    return [high, mid, low]


def selective_threshold(baseline: EvalReport) -> float:
    """Largest baseline PPL inside the low tercile."""
    low = tercile_buckets([r.ppl for r in baseline.rows])[2]
    return max(baseline.rows[i].ppl for i in low) if low else -math.inf


def _check_memory(model: MoETransformer, memories: dict[int, LayerMemory], fingerprint: str | None) -> None:
    if fingerprint is not None and fingerprint != model.fingerprint():
        raise MemoryMismatch("memory was built for a different checkpoint (fingerprint mismatch)")
    c = model.config
    for layer, mem in memories.items():
        if layer not in c.moe_layer_ids:
            raise MemoryMismatch(f"memory for non-MoE layer {layer}")
        if len(mem) and (mem.dim != c.model_dim or mem.values.shape[1] != c.num_experts):
            raise MemoryMismatch(f"layer {layer} memory shape does not fit the model")


def _score(model: MoETransformer, seq: np.ndarray, plan: RoutingPlan | None):
    logits = model.forward(seq, plan).logits
    nll = ad.cross_entropy(logits[:-1], seq[1:], "none").data
    acc = float(np.mean(logits.data[:-1].argmax(axis=-1) == seq[1:]))
    return nll, acc


def evaluate(
    model: MoETransformer,
    corpus: Corpus,
    mode: str = ZERO_SHOT,
    memories: dict[int, LayerMemory] | None = None,
    K: int = 1,
    kernel: str | None = None,
    threshold: float | None = None,
    memory_fingerprint: str | None = None,
    meta: dict | None = None,
) -> EvalReport:
    """Score every sequence of length >= 2 under the given routing mode.

    For the selective mode ``threshold`` defaults to the low-tercile cut of
    a preliminary zero-shot pass over the same corpus.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode != ZERO_SHOT:
        if memories is None:
            raise ValueError(f"mode {mode} requires a memory")
        _check_memory(model, memories, memory_fingerprint)
        if kernel is not None:
            memories = {layer: m.with_kernel(kernel) for layer, m in memories.items()}
    seqs = [(i, np.asarray(s, dtype=np.int64)) for i, s in enumerate(corpus.sequences) if len(s) >= 2]

    if mode == KNN_MOE_SELECTIVE and threshold is None:
        threshold = selective_threshold(evaluate(model, corpus, ZERO_SHOT))

    rows = []
    for i, seq in seqs:
        t0 = time.perf_counter_ns()
        adapter = None
        if mode == ZERO_SHOT:
            nll, acc = _score(model, seq, None)
        else:
            use = True
            if mode == KNN_MOE_SELECTIVE:
                nll, acc = _score(model, seq, None)
                use = selective_gate(float(np.exp(nll.mean())), threshold)
            if use:
                adapter = KnnAdapter(memories, K)
                nll, acc = _score(model, seq, RoutingPlan(adapter=adapter))
        total = time.perf_counter_ns() - t0
        lam = float(np.concatenate(adapter.lambdas).mean()) if adapter and adapter.lambdas else 0.0
        mean_nll = float(nll.mean())
        rows.append(ExampleRow(
            index=i,
            n_tokens=len(nll),
            nll=mean_nll,
            ppl=math.exp(mean_nll),
            accuracy=acc,
            mean_lambda=lam,
            used_retrieval=adapter is not None and adapter.queried,
            retrieval_ms=(adapter.retrieval_ns if adapter else 0) / 1e6,
            total_ms=total / 1e6,
        ))

    info = {"mode": mode, "K": K if mode != ZERO_SHOT else None,
            "kernel": (kernel or _kernel_of(memories)) if mode != ZERO_SHOT else None,
            "fingerprint": model.fingerprint()}
    if mode == KNN_MOE_SELECTIVE:
        info["selective_threshold"] = threshold
    info.update(meta or {})
    return EvalReport(rows, info)


def _kernel_of(memories) -> str | None:
    kinds = {m.kernel for m in (memories or {}).values()}
    return kinds.pop() if len(kinds) == 1 else None


@dataclass
class BucketDelta:
    bucket: str
    examples: int
    baseline_ppl: float
    nll_delta: float  # treated - baseline, mean over examples
    accuracy_delta: float

    @property
    def nll_gain(self) -> float:
        return -self.nll_delta


def bucket_analysis(baseline: EvalReport, treated: EvalReport) -> list[BucketDelta]:
    """Per-tercile deltas of ``treated`` over a zero-shot ``baseline``, buckets by baseline PPL."""
    if [r.index for r in baseline.rows] != [r.index for r in treated.rows] or \
            [r.n_tokens for r in baseline.rows] != [r.n_tokens for r in treated.rows]:
        raise ValueError("bucket_analysis: reports cover different examples")
    out = []
    for name, idx in zip(BUCKETS, tercile_buckets([r.ppl for r in baseline.rows])):
        b = [baseline.rows[i] for i in idx]
        t = [treated.rows[i] for i in idx]
        if not idx:
            out.append(BucketDelta(name, 0, float("nan"), 0.0, 0.0))
            continue
        out.append(BucketDelta(
            name,
            len(idx),
            float(np.mean([r.ppl for r in b])),
            float(np.mean([y.nll - x.nll for x, y in zip(b, t)])),
            float(np.mean([y.accuracy - x.accuracy for x, y in zip(b, t)])),
        ))
    return out


# -- sweeps -----------------------------------------------------------------


@dataclass
class SweepGrid:
    K: list[int] = field(default_factory=lambda: [1])
    S: list[int] = field(default_factory=lambda: [1])
    ref_tokens: list[int] = field(default_factory=lambda: [1000])
    kernel: list[str] = field(default_factory=lambda: ["rbf"])
    selective: list[bool] = field(default_factory=lambda: [False])

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name):
                raise ValueError(f"sweep axis {f.name} is empty")

    def cells(self) -> list[dict]:
        names = [f.name for f in fields(self)]
        return [dict(zip(names, combo)) for combo in itertools.product(*(getattr(self, n) for n in names))]


class MemoryCache:
    """Built memories keyed by (checkpoint, reference corpus, S, eta, mode, acceptance rule)."""

    def __init__(self):
        self._store: dict[tuple, tuple[dict[int, LayerMemory], BuildReport]] = {}

    def get(self, model: MoETransformer, corpus: Corpus, params: BuildParams):
        key = (model.fingerprint(), corpus.digest(), params.steps, params.eta, params.mode,
               params.accept_only_improving)
        if key not in self._store:
            self._store[key] = build_memory(model, corpus, params)
        return self._store[key]


@dataclass
class SweepCell:
    params: dict
    report: EvalReport | None
    build: BuildReport | None
    error: str | None = None


def ablation_sweep(
    model: MoETransformer,
    ref_corpus: Corpus,
    test_corpus: Corpus,
    grid: SweepGrid,
    build: BuildParams = BuildParams(),
    cache: MemoryCache | None = None,
) -> list[SweepCell]:
    cache = cache or MemoryCache()
    baseline = evaluate(model, test_corpus, ZERO_SHOT)
    threshold = selective_threshold(baseline)
    cells = []
    for cell in grid.cells():
        try:
            params = BuildParams(eta=build.eta, steps=cell["S"], mode=build.mode,
                                 accept_only_improving=build.accept_only_improving, kernel=cell["kernel"])
            ref = take_tokens(ref_corpus, cell["ref_tokens"])
            memories, report = cache.get(model, ref, params)
            mode = KNN_MOE_SELECTIVE if cell["selective"] else KNN_MOE
            ev = evaluate(model, test_corpus, mode, memories, K=cell["K"], kernel=cell["kernel"],
                          threshold=threshold if cell["selective"] else None,
                          meta={"S": cell["S"], "ref_tokens": cell["ref_tokens"], "eta": build.eta})
            cells.append(SweepCell(cell, ev, report))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.exception("sweep cell %s failed", cell)
            cells.append(SweepCell(cell, None, None, f"{type(exc).__name__}: {exc}"))
    return cells


# -- report files -----------------------------------------------------------

ROW_COLUMNS = [f.name for f in fields(ExampleRow)]


def _columns(timing: bool) -> list[str]:
    return [c for c in ROW_COLUMNS if timing or c not in TIMING_FIELDS]


def _strip_timing(agg: dict, timing: bool) -> dict:
    if timing:
        return agg
    return {k: v for k, v in agg.items() if k not in ("mean_retrieval_ms", "mean_total_ms")}


def report_to_dict(report: EvalReport, timing: bool = False) -> dict:
    cols = _columns(timing)
    return {
        "meta": report.meta,
        "aggregate": _strip_timing(report.aggregate(), timing),
        "terciles": report.terciles(),
        "rows": [{c: getattr(r, c) for c in cols} for r in report.rows],
    }


def emit_report(report: EvalReport, path, fmt: str = "json", timing: bool = False) -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_to_dict(report, timing), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        cols = _columns(timing)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in report.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path) -> EvalReport:
    """Inverse of :func:`emit_report` for JSON files (absent timing reads as 0)."""
    d = json.loads(Path(path).read_text())
    rows = []
    for r in d["rows"]:
        full = {c: r.get(c, 0.0) for c in ROW_COLUMNS}
        rows.append(ExampleRow(**full))
    return EvalReport(rows, d["meta"])


def sweep_table(cells: list[SweepCell], timing: bool = False) -> list[dict]:
    table = []
    for c in cells:
        row = dict(c.params)
        row["error"] = c.error
        if c.report is not None:
            agg = _strip_timing(c.report.aggregate(), timing)
            row.update({k: agg.get(k) for k in ("mean_nll", "ppl", "accuracy", "mean_lambda")})
            if timing:
                row["mean_total_ms"] = agg.get("mean_total_ms")
                row["mean_retrieval_ms"] = agg.get("mean_retrieval_ms")
                row["build_seconds"] = c.build.seconds if c.build else None
        table.append(row)
    return table


def emit_table(cells: list[SweepCell], path, fmt: str = "csv", timing: bool = False) -> None:
    table = sweep_table(cells, timing)
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        return
    cols = list(table[0]) if table else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in table:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    path.write_text(buf.getvalue())
