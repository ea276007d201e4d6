"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The shift experiment uses the default run configuration: experts trained on
domain A (two order-2 chains announced by a marker token), memory built from
1000 tokens of domain B (the same chains with a lying marker), evaluated on
held-out domain B.
"""

import json
import time

import numpy as np
import pytest

from moe_memrouter import cli
from moe_memrouter.builder import BuildParams, build_memory, optimize_token_logits, strict_gradient_error
from moe_memrouter.checkpoint import load_checkpoint
from moe_memrouter.data import load_corpus
from moe_memrouter.evaluation import (
    KNN_MOE,
    KNN_MOE_SELECTIVE,
    ZERO_SHOT,
    MemoryCache,
    SweepGrid,
    ablation_sweep,
    bucket_analysis,
    emit_report,
    evaluate,
)
from moe_memrouter.model import ModelConfig, MoETransformer, pi
from moe_memrouter.router import route
from moe_memrouter.store import LayerMemory, estimate_gamma, query, to_f32_floor


@pytest.fixture(scope="module")
def shift(tmp_path_factory):
    """Default-config run: data, trained model and the S=1 memory."""
    out = tmp_path_factory.mktemp("shift")
    args = ["--set", f'output.dir="{out}"']
    t0 = time.perf_counter()
    for cmd in ("gen-data", "train"):
        assert cli.main([cmd, *args]) == 0, cmd
    train_s = time.perf_counter() - t0
    model = load_checkpoint(out / "model.ckpt")
    ref = load_corpus(out / "data/ref.txt")
    test = load_corpus(out / "data/test.txt")
    mems, rep = build_memory(model, ref, BuildParams(eta=2e-2, steps=1))
    zs = evaluate(model, test)
    return {"model": model, "ref": ref, "test": test, "mems": mems, "report": rep,
            "zs": zs, "train_seconds": train_s}


def test_criterion_01_gradient_fidelity(criterion):
    cfg = ModelConfig(vocab_size=16, model_dim=8, num_layers=2, num_experts=4, active_experts=2,
                      num_heads=2, context_length=8, expert_hidden_dim=16)
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        model = MoETransformer.init(cfg, seed)
        seq = np.random.default_rng(seed).integers(0, 16, 4)
        worst = max(worst, strict_gradient_error(model, seq, step=1e-3))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    criterion(1, "gradient fidelity", ok, f"max rel err {worst:.2e} (< 1e-4), {dt:.1f}s (< 60s)")
    assert ok


def test_criterion_02_memory_improves_reference(shift, criterion):
    rep = shift["report"]
    model, ref = shift["model"], shift["ref"]
    t0 = time.perf_counter()
    worst = -np.inf
    for seq in ref.sequences:
        r = optimize_token_logits(model, seq, BuildParams(eta=1e-4, steps=1))
        worst = max(worst, float(np.max(r.nll_after - r.nll_before)))
    small_s = time.perf_counter() - t0
    ok = (rep.mean_nll_after < rep.mean_nll_before and rep.frac_improved >= 0.6 and worst <= 1e-9
          and rep.seconds < 300)
    criterion(2, "memory improves reference NLL", ok,
              f"{ref.num_tokens} tokens, NLL {rep.mean_nll_before:.4f} -> {rep.mean_nll_after:.4f}, "
              f"improved {rep.frac_improved:.1%} (>= 60%), eta=1e-4 worst increase {worst:.1e} (<= 1e-9), "
              f"build {rep.seconds:.1f}s, eta=1e-4 pass {small_s:.1f}s (< 300s)")
    assert ok


def test_criterion_03_exact_key_override(shift, criterion):
    model, mems, ref = shift["model"], shift["mems"], shift["ref"]
    worst_lam = worst_val = 0.0
    for layer, mem in mems.items():
        # duplicate keys (same prefix) resolve to the lowest row id
        _, first = np.unique(mem.keys, axis=0, return_inverse=True)
        owner = {}
        for i, g in enumerate(first.ravel()):
            owner.setdefault(g, i)
        for i, key in enumerate(mem.keys):
            d = route(key, layer, model, mem, K=1)
            worst_lam = max(worst_lam, abs(d.lam - 1.0))
            worst_val = max(worst_val, float(np.abs(d.a_final - mem.values[owner[first.ravel()[i]]]).max()))
    zs = evaluate(model, ref).aggregate()["mean_nll"]
    knn = evaluate(model, ref, KNN_MOE, mems, K=1).aggregate()["mean_nll"]
    ok = worst_lam == 0.0 and worst_val <= 1e-6 and knn <= zs
    criterion(3, "exact-key override", ok,
              f"max |lambda-1| {worst_lam:.1e}, max |a_final-v| {worst_val:.1e} (<= 1e-6), "
              f"D_test=D_ref NLL {knn:.4f} <= zero-shot {zs:.4f}")
    assert ok


def test_criterion_04_fallback_identities(shift, criterion, tmp_path):
    model, test, mems, zs = shift["model"], shift["test"], shift["mems"], shift["zs"]
    c = model.config
    empty = {layer: LayerMemory(layer, np.zeros((0, c.model_dim)), np.zeros((0, c.num_experts)))
             for layer in c.moe_layer_ids}
    # similarities underflow to exactly 0, so every position takes the lambda = 0 path
    far = {layer: LayerMemory(layer, m.keys + 1e3, m.values, "rbf", 1e300) for layer, m in mems.items()}

    def report_bytes(rep, name):
        rep.meta = {}
        emit_report(rep, tmp_path / name)
        return (tmp_path / name).read_bytes()

    base = report_bytes(evaluate(model, test), "zs.json")
    checks = {
        "empty": report_bytes(evaluate(model, test, KNN_MOE, empty, K=4), "empty.json") == base,
        "threshold=inf": report_bytes(
            evaluate(model, test, KNN_MOE_SELECTIVE, mems, threshold=np.inf), "inf.json") == base,
    }
    lam0 = evaluate(model, test, KNN_MOE, far, K=2)
    checks["lambda=0"] = (all(r.mean_lambda == 0.0 for r in lam0.rows)
                          and [m[:5] for m in lam0.metrics()] == [m[:5] for m in zs.metrics()])
    ok = all(checks.values())
    criterion(4, "fallback identities", ok,
              ", ".join(f"{k} {'bit-exact' if v else 'DIFFERS'}" for k, v in checks.items()))
    assert ok


def test_criterion_05_shift_gain(shift, criterion):
    model, test, mems, zs = shift["model"], shift["test"], shift["mems"], shift["zs"]
    t0 = time.perf_counter()
    knn = evaluate(model, test, KNN_MOE, mems, K=1)
    total = shift["train_seconds"] + shift["report"].seconds + time.perf_counter() - t0
    z, k = zs.aggregate()["ppl"], knn.aggregate()["ppl"]
    gain = 1 - k / z
    buckets = {b.bucket: b.nll_gain for b in bucket_analysis(zs, knn)}
    ok = gain >= 0.02 and buckets["high"] >= buckets["low"] and total < 900
    criterion(5, "distribution-shift gain", ok,
              f"PPL {z:.2f} -> {k:.2f} ({gain:.2%}, >= 2%), NLL gain high {buckets['high']:.4f} "
              f"mid {buckets['mid']:.4f} low {buckets['low']:.4f} (high >= low), {total:.0f}s (< 900s)")
    assert ok


def test_criterion_06_reference_size_trend(shift, criterion):
    model, ref, test, zs = shift["model"], shift["ref"], shift["test"], shift["zs"]
    cells = ablation_sweep(model, ref, test, SweepGrid(K=[1], ref_tokens=[0, 250, 500, 1000]),
                           cache=MemoryCache())
    ppl = {c.params["ref_tokens"]: c.report.aggregate()["ppl"] for c in cells}
    zero_exact = cells[0].report.metrics() == zs.metrics()
    best = min(v for n, v in ppl.items() if n)
    ok = zero_exact and best < ppl[0]
    criterion(6, "reference-size trend", ok,
              "PPL " + ", ".join(f"{n}: {v:.2f}" for n, v in ppl.items())
              + f"; 0-token cell {'equals' if zero_exact else 'DIFFERS FROM'} zero-shot")
    assert ok


def test_criterion_07_step_insensitivity(shift, criterion):
    model, ref, test = shift["model"], shift["ref"], shift["test"]
    mems3, rep3 = build_memory(model, ref, BuildParams(eta=2e-2, steps=3))
    rep1 = shift["report"]
    p1 = evaluate(model, test, KNN_MOE, shift["mems"], K=1).aggregate()["ppl"]
    p3 = evaluate(model, test, KNN_MOE, mems3, K=1).aggregate()["ppl"]
    diff = abs(p1 - p3) / p1
    ok = diff < 0.01 and rep3.seconds >= rep1.seconds
    criterion(7, "S-insensitivity", ok,
              f"PPL S=1 {p1:.2f} vs S=3 {p3:.2f} ({diff:.2%}, < 1%), "
              f"build S=1 {rep1.seconds:.1f}s, S=3 {rep3.seconds:.1f}s")
    assert ok


def test_criterion_08_mixing_invariants(criterion):
    rng = np.random.default_rng(8)
    cfg = ModelConfig(vocab_size=16, model_dim=8, num_layers=2, num_experts=6, active_experts=2,
                      num_heads=2, context_length=8, expert_hidden_dim=16)
    model = MoETransformer.init(cfg, 8)
    c = model.config
    bad = []
    calls = 0
    while calls < 10_000:
        M = int(rng.integers(1, 64))
        keys = rng.normal(scale=rng.choice([0.1, 1.0, 5.0]), size=(M, c.model_dim))
        values = np.array([to_f32_floor(pi(rng.normal(scale=3, size=c.num_experts), c.active_experts))
                           for _ in range(M)])
        kernel = str(rng.choice(["rbf", "cosine"]))
        layer = int(rng.integers(2))
        mem = LayerMemory(layer, keys, values, kernel, estimate_gamma(keys))
        for _ in range(50):
            K = int(rng.integers(1, 9))
            x = keys[rng.integers(M)] if rng.random() < 0.2 else rng.normal(scale=2, size=c.model_dim)
            d = route(x, layer, model, mem, K)
            a = d.a_final
            expected = d.a_parametric if d.a_mem is None else (1 - d.lam) * d.a_parametric + d.lam * d.a_mem
            if not (0.0 <= d.lam <= 1.0 and np.all(a >= 0) and 0 < a.sum() <= 1 + 1e-9
                    and np.count_nonzero(a) <= (K + 1) * c.active_experts
                    and np.abs(a - expected).max() <= 1e-12):
                bad.append(calls)
            calls += 1
    ok = not bad
    criterion(8, "mixing invariants", ok, f"{calls} route() calls, {len(bad)} violations")
    assert ok


def test_criterion_09_retrieval_oracle(criterion):
    rng = np.random.default_rng(9)
    mismatches = 0
    for trial in range(200):
        M = int(rng.integers(1, 4097)) if trial % 10 == 0 else int(rng.integers(1, 400))
        d = int(rng.integers(1, 65))
        if trial % 3 == 0:
            # small integer grid: exact distance ties and duplicate keys
            keys = rng.integers(-2, 3, size=(M, d)).astype(float)
            x = rng.integers(-2, 3, size=d).astype(float)
        else:
            keys = rng.normal(size=(M, d))
            x = rng.normal(size=d)
        K = int(rng.integers(1, 9))
        nb = query(LayerMemory(0, keys, np.zeros((M, 2)), gamma=1.0), x, K)
        # scan every row, sort by (squared distance, row id)
        oracle = sorted((float(((x - k) ** 2).sum()), i) for i, k in enumerate(keys))[:K]
        if nb.indices.tolist() != [i for _, i in oracle] or not np.allclose(
                nb.distances, [s for s, _ in oracle], rtol=1e-12, atol=0):
            mismatches += 1
    ok = mismatches == 0
    criterion(9, "retrieval oracle equivalence", ok, f"200 memories (M <= 4096, d <= 64), {mismatches} mismatches")
    assert ok


def test_criterion_10_determinism(criterion, tmp_path):
    small = {
        "model": {"vocab_size": 24, "model_dim": 8, "num_layers": 2, "num_experts": 4, "active_experts": 2,
                  "num_heads": 2, "context_length": 16, "expert_hidden_dim": 16},
        "data": {
            "train": {"domain_id": "A", "sequence_length": 16, "num_sequences": 40, "active_tokens": 8,
                      "regimes": 2},
            "ref": {"domain_id": "B", "sequence_length": 16, "num_sequences": 4, "active_tokens": 8,
                    "regimes": 2, "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
            "test": {"domain_id": "B", "sequence_length": 16, "num_sequences": 6, "active_tokens": 8,
                     "regimes": 2, "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
            "ref_tokens": 50,
        },
        "train": {"steps": 20, "batch_size": 4, "seq_len": 16},
    }
    files = ["model.ckpt", "memory.mem", "report_zero_shot.json", "report_knn_moe.json",
             "report_knn_moe_selective.json", "buckets.json"]
    runs = []
    for name in ("a", "b"):
        cfg = dict(small, output={"dir": str(tmp_path / name)})
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        for cmd in ("gen-data", "train", "build-memory", "eval"):
            assert cli.main([cmd, "--config", str(path), "--seed", "3"]) == 0, cmd
        runs.append({f: (tmp_path / name / f).read_bytes() for f in files})
    same = [f for f in files if runs[0][f] == runs[1][f]]
    ok = len(same) == len(files)
    criterion(10, "determinism", ok, f"{len(same)}/{len(files)} files byte-identical across two runs")
    assert ok
