"""Score sources standing in for the acoustic and language models.

Both provider kinds satisfy the same contract: ``logprobs(history)`` returns a
log-distribution over the vocabulary for the next token, deterministically.
The toy AM is context-independent given the position, which keeps the full
sentence-level normalization exactly computable at desk scale.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .core import (
    NORMALIZATION_TOL,
    StepScores,
    TokenSeq,
    UsageError,
    Vocabulary,
    log_sum_exp,
    validate_step_scores,
)

EOS_UNIT = "</s>"
EOS_FLOOR = 1e-12  # early-EOS acoustic mass: negligible but finite


@runtime_checkable
class ScoreSource(Protocol):
    """Next-token scorer: history in, log-distribution of length k out."""

    vocab_size: int

    def logprobs(self, history: TokenSeq) -> np.ndarray: ...


class NGramLM:
    """Add-k smoothed n-gram model with recursive backoff to lower orders.

    p(w|ctx) = (count(ctx,w) + k_s) / (count(ctx) + k_s*k) when ctx was seen;
    an unseen context falls back to the next shorter context, down to the
    unigram, which is always available after training.
    """

    def __init__(self, order: int, vocab_size: int, k_s: float, counts: list[dict]):
        if order < 1:
            raise UsageError(f"order must be >= 1, got {order}")
        if k_s <= 0:
            raise UsageError(f"smoothing constant must be > 0, got {k_s}")
        if vocab_size < 2:
            raise UsageError(f"vocab_size must be >= 2, got {vocab_size}")
        if len(counts) != order or () not in counts[0]:
            raise UsageError("counts must hold one table per context length, with unigrams present")
        self.order = order
        self.vocab_size = vocab_size
        self.k_s = float(k_s)
        self.counts = counts
        self._cache: dict[TokenSeq, np.ndarray] = {}

    def logprobs(self, history: TokenSeq) -> np.ndarray:
        """Log-distribution for the next token, using the longest seen context."""
        history = tuple(history)
        if len(history) >= self.order:
            history = history[len(history) - self.order + 1:]
        cached = self._cache.get(history)
        if cached is not None:
            return cached
        ctx = history
        while ctx not in self.counts[len(ctx)]:
            ctx = ctx[1:]
        c = self.counts[len(ctx)][ctx]
        probs = (c + self.k_s) / (c.sum() + self.k_s * self.vocab_size)
        out = np.log(probs)
        out.setflags(write=False)
        self._cache[history] = out
        return out

    def to_json_dict(self) -> dict:
        tables = []
        for table in self.counts:
            tables.append({",".join(map(str, ctx)): [int(x) for x in vec]
                           for ctx, vec in table.items()})
        return {"order": self.order, "vocab_size": self.vocab_size,
                "k_s": self.k_s, "counts": tables}

    @staticmethod
    def from_json_dict(d: dict) -> "NGramLM":
        counts = []
        for table in d["counts"]:
            parsed = {}
            for key, vec in table.items():
                ctx = tuple(int(x) for x in key.split(",")) if key else ()
                parsed[ctx] = np.asarray(vec, dtype=np.float64)
            counts.append(parsed)
        return NGramLM(int(d["order"]), int(d["vocab_size"]), float(d["k_s"]), counts)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "NGramLM":
        return NGramLM.from_json_dict(json.loads(Path(path).read_text()))


def train_ngram(corpus, order: int, k_s: float, vocab_size: int) -> NGramLM:
    """Count-based training over token sequences; contexts of every length
    up to order-1 are collected so backoff has full support."""
    corpus = list(corpus)
    if not corpus:
        raise UsageError("training corpus is empty")
    counts: list[dict] = [{} for _ in range(max(order, 1))]
    for seq in corpus:
        seq = tuple(seq)
        for t in seq:
            if not 0 <= t < vocab_size:
                raise UsageError(f"token id {t} out of range for k={vocab_size}")
        for n, w in enumerate(seq):
            for clen in range(min(n, order - 1) + 1):
                ctx = seq[n - clen:n]
                vec = counts[clen].get(ctx)
                if vec is None:
                    vec = counts[clen][ctx] = np.zeros(vocab_size)
                vec[w] += 1
    return NGramLM(order, vocab_size, k_s, counts)


class PositionwiseToyAM:
    """Per-utterance acoustic scores: one log-distribution per position.

    The distribution depends only on the position (not the token history);
    positions past the last row reuse the final row.
    """

    def __init__(self, log_matrix, validate: bool = True):
        m = np.ascontiguousarray(log_matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise UsageError("toy AM needs a nonempty N x k matrix")
        if validate:
            for n in range(m.shape[0]):
                if np.any(np.isnan(m[n])) or np.any(m[n] == np.inf):
                    raise UsageError(f"toy AM row {n} has non-finite entries")
                if abs(log_sum_exp(m[n])) > NORMALIZATION_TOL:
                    raise UsageError(f"toy AM row {n} is not normalized")
        m.setflags(write=False)
        self.log_matrix = m

    @property
    def vocab_size(self) -> int:
        return self.log_matrix.shape[1]

    @property
    def num_rows(self) -> int:
        return self.log_matrix.shape[0]

    def row(self, position: int) -> np.ndarray:
        return self.log_matrix[min(position, self.num_rows - 1)]

    def logprobs(self, history: TokenSeq) -> np.ndarray:
        return self.row(len(history))


class TrainableToyAM:
    """Positionwise AM parameterized by unconstrained logits.

    Rows become log-distributions through a log-softmax on read, so gradient
    updates to the logits always stay inside the model family.
    """

    def __init__(self, logits):
        m = np.array(logits, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise UsageError("trainable toy AM needs a nonempty N x k logit matrix")
        if not np.all(np.isfinite(m)):
            raise UsageError("toy AM logits must be finite")
        self.logits = m

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    @property
    def num_rows(self) -> int:
        return self.logits.shape[0]

    def log_matrix(self) -> np.ndarray:
        z = self.logits
        m = z.max(axis=1, keepdims=True)
        return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))

    def row(self, position: int) -> np.ndarray:
        return self.log_matrix()[min(position, self.num_rows - 1)]

    def logprobs(self, history: TokenSeq) -> np.ndarray:
        return self.row(len(history))

    def frozen(self) -> PositionwiseToyAM:
        return PositionwiseToyAM(self.log_matrix(), validate=False)


@dataclass(frozen=True)
class Utterance:
    """One corpus item: identifier, reference tokens, and its acoustic scores."""

    utt_id: str
    reference: TokenSeq
    am: PositionwiseToyAM


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic corpus.

    ``noise`` holds one confusion strength per unit: with probability
    noise[w] the AM row for a reference token w peaks on a uniformly drawn
    competitor instead of w itself. Every row keeps the shape "mass 1-eps on
    the peak, eps spread evenly over the other k-1 units".
    """

    vocab_size: int
    len_range: tuple[int, int]
    sizes: tuple[int, int, int]  # train, dev, test
    noise: tuple[float, ...]
    seed: int
    marker_fraction: float = 0.3
    chain_concentration: float = 0.3

    def __post_init__(self):
        k = self.vocab_size
        if k < 2:
            raise UsageError("generator config: vocab_size must be >= 2")
        lo, hi = self.len_range
        if not (1 <= lo <= hi):
            raise UsageError("generator config: len_range must satisfy 1 <= min <= max")
        if any(s < 0 for s in self.sizes):
            raise UsageError("generator config: sizes must be nonnegative")
        noise = tuple(float(x) for x in self.noise)
        if len(noise) != k:
            raise UsageError(f"generator config: noise must have length k={k}")
        if any(not 0.0 <= e < 1.0 for e in noise):
            raise UsageError("generator config: noise strengths must lie in [0, 1)")
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "len_range", (int(lo), int(hi)))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))


def uniform_noise(k: int, eps: float) -> tuple[float, ...]:
    return tuple([float(eps)] * k)


def split_noise(k: int, eos_id: int, low: float, high: float) -> tuple[float, ...]:
    """Half the units get `low`, half `high`; EOS is forced into the low half
    (trading places with the last unit of the low block) so endings stay
    decodable."""
    noise = [low if i < k // 2 else high for i in range(k)]
    if noise[eos_id] != low:
        noise[k // 2 - 1] = high
        noise[eos_id] = low
    return tuple(noise)


def build_am_row(k: int, peak: int, eps: float, support=None) -> np.ndarray:
    """Log-prob row with mass 1-eps on `peak` and eps spread evenly over the
    remaining supported tokens; tokens outside `support` get zero probability
    (all k tokens by default)."""
    row = np.full(k, -np.inf)
    if support is None:
        support = range(k)
    others = [t for t in support if t != peak]
    if eps == 0.0 or not others:
        row[peak] = 0.0
        return row
    row[others] = np.log(eps / len(others))
    row[peak] = np.log1p(-eps)
    # exact renormalization keeps rows inside the 1e-9 validation tolerance
    finite = row > -np.inf
    row[finite] -= log_sum_exp(row[finite])
    return row


def _random_units(rng: np.random.Generator, k: int, marker_fraction: float) -> tuple[str, ...]:
    letters = np.array(list(string.ascii_lowercase))
    units: list[str] = []
    seen = set()
    while len(units) < k - 1:
        length = int(rng.integers(1, 5))
        base = "".join(rng.choice(letters, size=length))
        if rng.random() < marker_fraction:
            base += "@@"
        if base not in seen and base != EOS_UNIT:
            seen.add(base)
            units.append(base)
    units.append(EOS_UNIT)  # EOS takes the last id
    return tuple(units)


def generate_synthetic_corpus(cfg: GeneratorConfig) -> tuple[Vocabulary, dict[str, list[Utterance]]]:
    """Sample references from a seeded Markov chain and build their AM matrices.

    Returns the vocabulary (EOS at id k-1) and {"train", "dev", "test"} splits.
    Identical config and seed reproduce the output exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.vocab_size
    eos = k - 1
    vocab = Vocabulary(_random_units(rng, k, cfg.marker_fraction), eos_id=eos)

    n_content = k - 1
    conc = cfg.chain_concentration
    init = rng.dirichlet(np.full(n_content, conc))
    trans = rng.dirichlet(np.full(n_content, conc), size=n_content)

    noise = np.asarray(cfg.noise)
    splits: dict[str, list[Utterance]] = {}
    for split, size in zip(("train", "dev", "test"), cfg.sizes):
        utts = []
        for i in range(size):
            length = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1))
            tokens = [int(rng.choice(n_content, p=init))]
            for _ in range(length - 1):
                tokens.append(int(rng.choice(n_content, p=trans[tokens[-1]])))
            ref = tuple(tokens) + (eos,)
            rows = np.empty((len(ref), k))
            for n, w in enumerate(ref):
                eps = noise[w]
                peak = w
                if eps > 0.0 and rng.random() < eps:
                    # confusors come from the content units only: a decoder
                    # hypothesis must never be lured into stopping early
                    choices = [t for t in range(n_content) if t != w]
                    peak = int(choices[rng.integers(len(choices))])
                if n == len(ref) - 1:
                    rows[n] = build_am_row(k, peak, eps)
                else:
                    # EOS gets only a floor of acoustic mass before the final
                    # position, like a trained AED model; with unnormalized
                    # cumulative scores any real early-EOS mass would let the
                    # one-token hypothesis beat every full-length one, while
                    # an exact zero would blow up under a negative EOS scale
                    row = build_am_row(k, peak, eps, support=range(n_content))
                    if eps > 0.0:
                        probs = np.exp(row) * (1.0 - EOS_FLOOR)
                        probs[eos] = EOS_FLOOR
                        with np.errstate(divide="ignore"):
                            row = np.log(probs)
                    rows[n] = row
            utts.append(Utterance(f"{split}-{i:05d}", ref, PositionwiseToyAM(rows, validate=False)))
        splits[split] = utts
    return vocab, splits


def save_corpus(path, utterances):
    """JSON Lines: {"id": str, "ref": [int], "am_logp": [[float; k]; N]}."""
    with open(path, "w") as f:
        for u in utterances:
            line = {"id": u.utt_id, "ref": list(u.reference),
                    "am_logp": [list(map(float, row)) for row in u.am.log_matrix]}
            f.write(json.dumps(line) + "\n")


def load_corpus(path, validate: bool = True) -> list[Utterance]:
    utts = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                utt = Utterance(str(d["id"]), tuple(int(t) for t in d["ref"]),
                                PositionwiseToyAM(np.asarray(d["am_logp"]), validate=validate))
            except (KeyError, ValueError, TypeError) as e:
                raise UsageError(f"{path}: line {lineno}: {e}") from e
            utts.append(utt)
    return utts


def provider_step_scores(am: ScoreSource, lm: ScoreSource, history: TokenSeq) -> StepScores:
    """Assemble one StepScores from the two providers; validated on the way out."""
    step = StepScores(am.logprobs(history), lm.logprobs(history))
    issues = validate_step_scores(step)
    if issues:
        raise UsageError("provider emitted an invalid distribution: " + "; ".join(issues))
    return step
