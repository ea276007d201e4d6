"""Base-model pretraining: SGD with momentum and cosine learning-rate decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Corpus
from .model import ModelConfig, MoETransformer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class TrainOptions:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 0.3
    momentum: float = 0.9
    min_lr_ratio: float = 0.05
    grad_clip: float = 1.0
    init_seed: int = 0
    shuffle_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MoETransformer
    losses: list[float] = field(default_factory=list)


def _batch(corpus: Corpus, rng: np.random.Generator, batch: int, seq_len: int) -> np.ndarray:
    rows = []
    for i in rng.integers(len(corpus.sequences), size=batch):
        s = corpus.sequences[i]
        L = min(seq_len, len(s))
        start = int(rng.integers(len(s) - L + 1))
        rows.append(s[start : start + L])
    width = min(len(r) for r in rows)
    return np.stack([r[:width] for r in rows])


def pretrain(config: ModelConfig, corpus: Corpus, opt: TrainOptions | None = None) -> TrainResult:
    opt = opt or TrainOptions()
    usable = [s for s in corpus.sequences if len(s) >= 2]
    if not usable:
        raise ValueError("pretrain needs a corpus with at least one sequence of length >= 2")
    if corpus.vocab_size != config.vocab_size:
        raise ValueError(f"corpus vocab {corpus.vocab_size} != model vocab {config.vocab_size}")
    corpus = Corpus(usable, corpus.domain_id, corpus.vocab_size)
    seq_len = min(opt.seq_len, config.context_length)

    model = MoETransformer.init(config, seed=opt.init_seed)
    rng = np.random.default_rng(opt.shuffle_seed)
    names = sorted(model.params)
    velocity = {n: np.zeros_like(model.params[n]) for n in names}
    losses: list[float] = []

    for step in range(opt.steps):
        toks = _batch(corpus, rng, opt.batch_size, seq_len)
        res = model.forward(toks, track_params=True)
        V = config.vocab_size
        loss = ad.cross_entropy(res.logits[:, :-1].reshape(-1, V), toks[:, 1:].reshape(-1))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        losses.append(value)
        grads = ad.backward(loss, [res.params[n] for n in names])

        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        clip = min(1.0, opt.grad_clip / norm) if opt.grad_clip and norm > 0 else 1.0
        progress = step / max(1, opt.steps - 1)
        lr = opt.lr * (opt.min_lr_ratio + (1 - opt.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
        for n, g in zip(names, grads):
            v = velocity[n]
            v *= opt.momentum
            v += g * clip
            model.params[n] = model.params[n] - lr * v
        if step % 100 == 0 or step == opt.steps - 1:
            log.info("step %d loss %.4f lr %.4f", step, value, lr)

    # frozen weights are kept float32-representable so checkpoints round-trip exactly
    for n in names:
        model.params[n] = model.params[n].astype(np.float32).astype(np.float64)
    return TrainResult(model, losses)
