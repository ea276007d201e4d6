"""
Command-line driver: ``moe-memrouter <command> [--config run.json] [--set a.b=v] [--seed N]``.

Each command is one stage reading and writing files under ``output.dir``:

    gen-data      data/{train,ref,test}.txt
    train         model.ckpt, train_losses.json
    build-memory  memory.mem, build_report.json
    eval          report_<mode>.<fmt>, buckets.json
    sweep         sweep.<fmt>
    check         gradient finite-difference suite, PASS/FAIL per line

Every stage also writes ``manifest-<command>.json`` (config snapshot, input
and output hashes, versions) and ``timing-<command>.json``. Wall-clock
numbers live only in the timing file so that the other outputs of two runs
with equal seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from .builder import BuildParams, build_memory, strict_gradient_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DomainSpec, generate_corpus, load_corpus, save_corpus, take_tokens
from .evaluation import (
    MODES,
    ZERO_SHOT,
    MemoryCache,
    SweepGrid,
    ablation_sweep,
    bucket_analysis,
    emit_report,
    emit_table,
    evaluate,
)
from .model import ModelConfig, MoETransformer, tiny_config
from .store import MemoryFileError, load_memory, save_memory
from .train import TrainingDiverged, TrainOptions, pretrain

log = logging.getLogger("moe_memrouter")

COMMANDS = ("gen-data", "train", "build-memory", "eval", "sweep", "check")
SPLITS = ("train", "ref", "test")
SPLIT_SEED_OFFSET = {"train": 0, "ref": 1, "test": 2}

DEFAULT_CONFIG: dict = {
    "model": {**ModelConfig().to_dict(), "moe_layers": None},  # None: every layer is MoE
    "data": {
        "train": {"domain_id": "A", "sequence_length": 64, "num_sequences": 2000, "regimes": 2},
        "ref": {"domain_id": "B", "sequence_length": 64, "num_sequences": 20, "regimes": 2,
                "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
        "test": {"domain_id": "B", "sequence_length": 64, "num_sequences": 60, "regimes": 2,
                 "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
        "ref_tokens": 1000,
    },
    "train": {"steps": 1600, "batch_size": 16, "seq_len": 64, "lr": 0.3, "momentum": 0.9,
              "min_lr_ratio": 0.05, "grad_clip": 1.0},
    "build": BuildParams().to_dict(),
    "retrieval": {"K": 1, "kernel": "rbf"},
    "eval": {"modes": list(MODES), "selective_threshold": None, "format": "json"},
    "sweep": {"K": [1, 2, 4], "S": [1], "ref_tokens": [0, 250, 500, 1000], "kernel": ["rbf"],
              "selective": [False], "format": "csv"},
    "seeds": {"data": 0, "init": 0, "shuffle": 0},
    "output": {"dir": "runs/default"},
}


# -- config -----------------------------------------------------------------

_JSON_TYPES = {
    "int": "integer",
    "float": "number",
    "bool": "boolean",
    "str": "string",
    "str | None": ["string", "null"],
    "tuple[int, ...] | None": ["array", "null"],
}


def _object(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


def _dataclass_schema(cls, exclude=(), required=()) -> dict:
    props = {f.name: {"type": _JSON_TYPES[f.type]} for f in dataclasses.fields(cls) if f.name not in exclude}
    return _object(props, required)


def _list_of(kind: str) -> dict:
    return {"type": "array", "items": {"type": kind}, "minItems": 1}


# seeds and vocabulary of the data specs come from the seeds and model sections
_DOMAIN = _dataclass_schema(DomainSpec, exclude=("seed", "vocab_size"), required=("domain_id",))

SCHEMA = _object(
    {
        "model": _dataclass_schema(ModelConfig),
        "data": _object({**{s: _DOMAIN for s in SPLITS}, "ref_tokens": {"type": "integer", "minimum": 0}},
                        required=SPLITS),
        "train": _dataclass_schema(TrainOptions, exclude=("init_seed", "shuffle_seed")),
        "build": _dataclass_schema(BuildParams),
        "retrieval": _object({"K": {"type": "integer", "minimum": 1}, "kernel": {"enum": ["rbf", "cosine"]}}),
        "eval": _object({
            "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1},
            "selective_threshold": {"type": ["number", "null"]},
            "format": {"enum": ["json", "csv"]},
        }),
        "sweep": _object({
            "K": _list_of("integer"),
            "S": _list_of("integer"),
            "ref_tokens": _list_of("integer"),
            "kernel": {"type": "array", "items": {"enum": ["rbf", "cosine"]}, "minItems": 1},
            "selective": _list_of("boolean"),
            "format": {"enum": ["json", "csv"]},
        }),
        "seeds": _object({k: {"type": "integer", "minimum": 0} for k in ("data", "init", "shuffle")}),
        "output": _object({"dir": {"type": "string"}}),
    },
)


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` in place; the value is read as JSON when it parses."""
    path, sep, value = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    *parents, leaf = path.split(".")
    node = cfg
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {assignment!r}: {p!r} is not a config section")
        node = node[p]
    node[leaf] = _parse_value(value)


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULT_CONFIG, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seeds"] = {k: seed for k in cfg["seeds"]}
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def domain_spec(cfg: dict, split: str) -> DomainSpec:
    d = dict(cfg["data"][split])
    d["seed"] = cfg["seeds"]["data"] * 3 + SPLIT_SEED_OFFSET[split]
    d["vocab_size"] = cfg["model"]["vocab_size"]
    return DomainSpec.from_dict(d)


def train_options(cfg: dict) -> TrainOptions:
    return TrainOptions(**cfg["train"], init_seed=cfg["seeds"]["init"], shuffle_seed=cfg["seeds"]["shuffle"])


# -- run bookkeeping --------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"moe_memrouter": pkg, "numpy": np.__version__, "python": platform.python_version()}


class Run:
    """Output directory plus the manifest and timing records of one command."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.dir = Path(cfg["output"]["dir"])
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}
        self.timing: dict = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str, what: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing {what} {p}; run `{stage}` first")
        self.inputs[name] = p
        return p

    def wrote(self, name: str) -> Path:
        p = self.path(name)
        self.outputs[name] = p
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "inputs": {k: _sha256(p) for k, p in sorted(self.inputs.items())},
            "outputs": {k: _sha256(p) for k, p in sorted(self.outputs.items())},
            "versions": _versions(),
        }
        _write_json(self.dir / f"manifest-{self.command}.json", manifest)
        _write_json(self.dir / f"timing-{self.command}.json", self.timing)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    (run.dir / "data").mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        corpus = generate_corpus(domain_spec(cfg, split))
        if split == "ref":
            corpus = take_tokens(corpus, cfg["data"]["ref_tokens"])
        save_corpus(corpus, run.wrote(f"data/{split}.txt"))
        log.info("%s: %d sequences, %d tokens", split, len(corpus), corpus.num_tokens)


def _load_model(run: Run) -> MoETransformer:
    model = load_checkpoint(run.need("model.ckpt", "checkpoint", "train"))
    if model.config != model_config(run.cfg):
        raise ValueError("checkpoint config differs from the model section of the run config")
    return model


def _memory_expect(model: MoETransformer) -> dict:
    c = model.config
    return {"fingerprint": model.fingerprint(), "d": c.model_dim, "N": c.num_experts, "k": c.active_experts}


def cmd_train(run: Run) -> None:
    corpus = load_corpus(run.need("data/train.txt", "training corpus", "gen-data"))
    t0 = time.perf_counter()
    res = pretrain(model_config(run.cfg), corpus, train_options(run.cfg))
    run.timing["train_seconds"] = time.perf_counter() - t0
    run.dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, run.wrote("model.ckpt"))
    _write_json(run.wrote("train_losses.json"), res.losses)


def cmd_build_memory(run: Run) -> None:
    model = _load_model(run)
    ref = load_corpus(run.need("data/ref.txt", "reference corpus", "gen-data"))
    params = BuildParams(**run.cfg["build"])
    memories, report = build_memory(model, ref, params)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    meta = {**_memory_expect(model), "build": params.to_dict(), "reference_digest": ref.digest()}
    save_memory(memories, run.wrote("memory.mem"), meta)
    summary = report.to_dict()
    run.timing["build_seconds"] = summary.pop("seconds")
    _write_json(run.wrote("build_report.json"), summary)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(run)
    test = load_corpus(run.need("data/test.txt", "test corpus", "gen-data"))
    modes = cfg["eval"]["modes"]
    memories = None
    if any(m != ZERO_SHOT for m in modes):
        memories, _ = load_memory(run.need("memory.mem", "memory", "build-memory"), _memory_expect(model))
    fmt = cfg["eval"]["format"]
    reports = {}
    for mode in modes:
        report = evaluate(model, test, mode, memories, K=cfg["retrieval"]["K"], kernel=cfg["retrieval"]["kernel"],
                          threshold=cfg["eval"]["selective_threshold"])
        emit_report(report, run.wrote(f"report_{mode}.{fmt}"), fmt)
        agg = report.aggregate()
        run.timing[mode] = {k: agg[k] for k in ("mean_retrieval_ms", "mean_total_ms")}
        reports[mode] = report
        print(f"{mode}: ppl={agg['ppl']:.4f} accuracy={agg['accuracy']:.4f} mean_lambda={agg['mean_lambda']:.4f}")
    if ZERO_SHOT in reports and len(reports) > 1:
        buckets = {mode: [dataclasses.asdict(b) for b in bucket_analysis(reports[ZERO_SHOT], r)]
                   for mode, r in reports.items() if mode != ZERO_SHOT}
        _write_json(run.wrote("buckets.json"), buckets)


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(run)
    ref = load_corpus(run.need("data/ref.txt", "reference corpus", "gen-data"))
    test = load_corpus(run.need("data/test.txt", "test corpus", "gen-data"))
    axes = {k: v for k, v in cfg["sweep"].items() if k != "format"}
    cells = ablation_sweep(model, ref, test, SweepGrid(**axes), BuildParams(**cfg["build"]), MemoryCache())
    fmt = cfg["sweep"]["format"]
    run.dir.mkdir(parents=True, exist_ok=True)
    emit_table(cells, run.wrote(f"sweep.{fmt}"), fmt)
    run.timing["cells"] = [
        {**c.params, "build_seconds": c.build.seconds if c.build else None,
         **({k: c.report.aggregate()[k] for k in ("mean_retrieval_ms", "mean_total_ms")} if c.report else {})}
        for c in cells
    ]
    failed = [c for c in cells if c.error]
    for c in failed:
        print(f"cell {c.params} failed: {c.error}", file=sys.stderr)


def check_suite() -> list[tuple[str, bool, str]]:
    """Finite-difference checks of the autodiff primitives and of STRICT routing gradients."""
    results = []
    rng = np.random.default_rng(0)
    primitives = {
        "matmul": (lambda a, b: (a @ b).sum(), {"a": (3, 4), "b": (4, 2)}),
        "softmax": (lambda a: (ad.softmax(a) * ad.softmax(a)).sum(), {"a": (2, 5)}),
        "rms_norm": (lambda x, w: (ad.rms_norm(x, w) * ad.rms_norm(x, w)).mean(), {"x": (3, 4), "w": (4,)}),
        "silu": (lambda a: ad.silu(a).sum(), {"a": (3, 4)}),
        "cross_entropy": (lambda z: ad.cross_entropy(z, [0, 2, 1]), {"z": (3, 4)}),
        "attention": (lambda q, k, v: (ad.causal_attention(q, k, v, 2) * ad.causal_attention(q, k, v, 2)).sum(),
                      {"q": (1, 3, 4), "k": (1, 3, 4), "v": (1, 3, 4)}),
    }
    for name, (fn, shapes) in primitives.items():
        g = ad.Graph(fn, list(shapes))
        values = {k: rng.normal(size=s) for k, s in shapes.items()}
        err = max(ad.finite_diff_check(g, values, leaf, step=1e-3) for leaf in shapes)
        results.append((f"autodiff {name}", err < 1e-4, f"max rel err {err:.2e}"))
    model = MoETransformer.init(tiny_config(), seed=0)
    seq = rng.integers(0, model.config.vocab_size, 4)
    err = strict_gradient_error(model, seq, step=1e-3)
    results.append(("strict routing gradient", err < 1e-4, f"max rel err {err:.2e}"))
    return results


def cmd_check() -> int:
    ok = True
    for name, passed, detail in check_suite():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return 0 if ok else 1


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "build-memory": cmd_build_memory,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def run(command: str, config_path=None, overrides=(), seed: int | None = None) -> int:
    if command == "check":
        return cmd_check()
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    cfg = load_config(config_path, overrides, seed)
    r = Run(command, cfg)
    HANDLERS[command](r)
    r.finish()
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="moe-memrouter", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run config; missing sections take defaults")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                    help="override a config value after loading (repeatable)")
    ap.add_argument("--seed", type=int, help="set every entry of the seeds section")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args.command, args.config, args.overrides, args.seed)
    except (ConfigError, FileNotFoundError, CheckpointError, MemoryFileError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
