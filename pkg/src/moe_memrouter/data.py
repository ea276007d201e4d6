"""
Synthetic token domains.

A domain is fixed by its id and generator parameters; the sampling seed
only decides which sequences are drawn. Two specs with the same domain id
therefore sample from the same distribution, which is how reference and
held-out test splits of one domain are produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "DomainSpec",
    "Corpus",
    "generate_corpus",
    "transition_table",
    "save_corpus",
    "load_corpus",
    "bigram_distribution",
    "total_variation",
    "take_tokens",
]

GENERATORS = ("markov2", "template")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    kind: str = "markov2"
    seed: int = 0
    sequence_length: int = 128
    num_sequences: int = 64
    vocab_size: int = 64
    # markov2: tokens the chain may visit, successors per context
    active_tokens: int = 16
    branching: int = 2
    # domain whose token subset is reused; None means this domain's own
    token_pool: str | None = None
    # markov2: start from another domain's table and redraw this fraction of contexts
    base_domain: str | None = None
    shift_fraction: float = 1.0
    # template: motif count and length
    num_motifs: int = 12
    motif_length: int = 6
    # markov2: number of hidden chains; each sequence follows one, announced by a
    # leading marker token. For an offset_fraction share of sequences the marker
    # announces chain (r + marker_offset) mod regimes, a cue that lies about
    # which chain follows.
    regimes: int = 1
    marker_offset: int = 0
    offset_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator kind {self.kind!r}; choose from {GENERATORS}")
        if self.sequence_length < 1 or self.num_sequences < 0:
            raise ValueError("sequence_length must be >= 1 and num_sequences >= 0")
        if self.regimes < 1:
            raise ValueError("regimes must be >= 1")
        if not 2 <= self.active_tokens <= self.vocab_size - self.marker_count:
            raise ValueError(f"active_tokens={self.active_tokens} overflows vocab of {self.vocab_size}")
        if not 1 <= self.branching <= self.active_tokens:
            raise ValueError("branching must be in 1..active_tokens")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise ValueError("shift_fraction must be in [0, 1]")
        if not 0.0 <= self.offset_fraction <= 1.0:
            raise ValueError("offset_fraction must be in [0, 1]")

    @property
    def marker_count(self) -> int:
        return self.regimes if self.regimes > 1 else 0

    @property
    def markers(self) -> np.ndarray:
        """Marker ids, taken from the top of the vocabulary."""
        return np.arange(self.vocab_size - self.marker_count, self.vocab_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown domain spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corpus:
    sequences: list[np.ndarray]
    domain_id: str
    vocab_size: int

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_tokens(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.domain_id}:{self.vocab_size}".encode())
        for s in self.sequences:
            h.update(np.asarray(s, dtype="<u2").tobytes())
            h.update(b"|")
        return h.hexdigest()


def _domain_rng(spec: DomainSpec) -> np.random.Generator:
    key = f"{spec.kind}|{spec.domain_id}|{spec.vocab_size}|{spec.active_tokens}|{spec.branching}|" \
          f"{spec.num_motifs}|{spec.motif_length}"
    if spec.regimes > 1:
        key += f"|{spec.regimes}"
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little"))


def _active_tokens(spec: DomainSpec) -> np.ndarray:
    pool_id = spec.token_pool or spec.base_domain
    pool = spec if pool_id is None else dataclasses.replace(spec, domain_id=pool_id, token_pool=None, base_domain=None)
    return np.sort(_domain_rng(pool).choice(spec.vocab_size - spec.marker_count, spec.active_tokens, replace=False))


def transition_table(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    """(active token ids, P[r, a, b, c]) for one order-2 chain per regime.

    With ``base_domain`` set, the base domain's tables are copied and a
    ``shift_fraction`` share of their contexts get freshly drawn successors.
    """
    rng = _domain_rng(spec)
    rng.choice(spec.vocab_size - spec.marker_count, spec.active_tokens, replace=False)
    V = spec.vocab_size
    active = _active_tokens(spec)
    contexts = [(a, b) for a in active for b in active]
    if spec.base_domain is None:
        tables = np.zeros((spec.regimes, V, V, V))
        redraw = [contexts] * spec.regimes
    else:
        base = dataclasses.replace(spec, domain_id=spec.base_domain, base_domain=None, token_pool=None,
                                   shift_fraction=1.0, marker_offset=0, offset_fraction=1.0)
        _, tables = transition_table(base)
        n = int(round(spec.shift_fraction * len(contexts)))
        redraw = [[contexts[i] for i in np.sort(rng.choice(len(contexts), n, replace=False))]
                  for _ in range(spec.regimes)]
    for r in range(spec.regimes):
        for a, b in redraw[r]:
            succ = rng.choice(active, spec.branching, replace=False)
            tables[r, a, b] = 0.0
            tables[r, a, b, succ] = rng.dirichlet(np.ones(spec.branching))
    return active, tables


def _motifs(spec: DomainSpec) -> list[np.ndarray]:
    rng = _domain_rng(spec)
    rng.choice(spec.vocab_size - spec.marker_count, spec.active_tokens, replace=False)
    active = _active_tokens(spec)
    return [rng.choice(active, spec.motif_length) for _ in range(spec.num_motifs)]


def generate_corpus(spec: DomainSpec) -> Corpus:
    rng = np.random.default_rng([spec.seed, int(hashlib.sha256(spec.domain_id.encode()).hexdigest()[:8], 16)])
    T = spec.sequence_length
    seqs: list[np.ndarray] = []
    if spec.kind == "markov2":
        active, tables = transition_table(spec)
        cdf = np.cumsum(tables, axis=-1)
        for _ in range(spec.num_sequences):
            r = int(rng.integers(spec.regimes)) if spec.regimes > 1 else 0
            s = np.empty(T, dtype=np.int64)
            head = 0
            if spec.regimes > 1:
                lie = rng.random() < spec.offset_fraction
                s[0] = spec.markers[(r + spec.marker_offset * lie) % spec.regimes]
                head = 1
            n0 = min(head + 2, T)
            s[head:n0] = rng.choice(active, n0 - head)
            u = rng.random(T)
            for t in range(n0, T):
                row = cdf[r, s[t - 2], s[t - 1]]
                s[t] = min(int(np.searchsorted(row, u[t] * row[-1], side="right")), spec.vocab_size - 1)
            seqs.append(s)
    else:
        motifs = _motifs(spec)
        for _ in range(spec.num_sequences):
            parts: list[np.ndarray] = []
            n = 0
            while n < T:
                m = motifs[rng.integers(len(motifs))]
                parts.append(m)
                n += len(m)
            seqs.append(np.concatenate(parts)[:T].astype(np.int64))
    return Corpus(seqs, spec.domain_id, spec.vocab_size)


def take_tokens(corpus: Corpus, n_tokens: int) -> Corpus:
    """Leading sequences holding ``n_tokens`` tokens in total; the last one is cut short."""
    out: list[np.ndarray] = []
    left = n_tokens
    for s in corpus.sequences:
        if left <= 0:
            break
        out.append(s[:left])
        left -= len(out[-1])
    return Corpus(out, corpus.domain_id, corpus.vocab_size)


def bigram_distribution(corpus: Corpus) -> np.ndarray:
    V = corpus.vocab_size
    counts = np.zeros((V, V))
    for s in corpus.sequences:
        np.add.at(counts, (s[:-1], s[1:]), 1.0)
    total = counts.sum()
    return counts / total if total else counts


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def save_corpus(corpus: Corpus, path) -> None:
    lines = [f"# domain_id={corpus.domain_id} vocab_size={corpus.vocab_size}"]
    lines += [" ".join(str(int(t)) for t in s) for s in corpus.sequences]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path) -> Corpus:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing corpus header line")
    fields = dict(kv.split("=", 1) for kv in text[0][1:].split())
    try:
        domain_id, V = fields["domain_id"], int(fields["vocab_size"])
    except KeyError as exc:
        raise ValueError(f"{path}: header lacks {exc}") from exc
    seqs = []
    for lineno, line in enumerate(text[1:], start=2):
        ids = np.array([int(t) for t in line.split()], dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise ValueError(f"{path}:{lineno}: token id outside vocab of {V}")
        seqs.append(ids)
    return Corpus(seqs, domain_id, V)
