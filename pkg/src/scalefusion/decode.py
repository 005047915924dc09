"""Shallow-fusion beam search, n-best rescoring, and brute-force oracles.

Hypotheses are compared by the raw (unnormalized) fusion score with no length
normalization. Ties break toward the lexicographically smaller token-id
sequence so every oracle comparison is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Hypothesis, NBestList, ScaleSet, TokenSeq, UsageError
from .fusion import (
    exact_sequence_scores,
    scaled_logprob,
    sequence_at,
    sequence_score,
)
from .providers import PositionwiseToyAM, ScoreSource

EOS_TERMINATE = "terminate"
FIXED_LENGTH = "fixed_length"


@dataclass(frozen=True)
class BeamConfig:
    """Search knobs. eos_rule "terminate" finalizes a hypothesis when EOS is
    its extension (finalized hypotheses keep competing within the beam);
    "fixed_length" treats EOS as an ordinary token and finalizes everything at
    max_len."""

    beam_size: int
    max_len: int
    eos_id: int | None = None
    eos_rule: str = EOS_TERMINATE
    tie_break: str = "lexicographic"

    def __post_init__(self):
        if self.beam_size < 1:
            raise UsageError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len < 1:
            raise UsageError(f"max_len must be >= 1, got {self.max_len}")
        if self.eos_rule not in (EOS_TERMINATE, FIXED_LENGTH):
            raise UsageError(f"unknown eos_rule {self.eos_rule!r}")
        if self.eos_rule == EOS_TERMINATE and self.eos_id is None:
            raise UsageError("eos_rule 'terminate' needs an eos_id")
        if self.tie_break != "lexicographic":
            raise UsageError(f"unsupported tie_break {self.tie_break!r}")


class _Beam:
    __slots__ = ("tokens", "score", "am", "lm", "final")

    def __init__(self, tokens, score, am, lm, final):
        self.tokens = tokens
        self.score = score
        self.am = am
        self.lm = lm
        self.final = final


def beam_search(am: ScoreSource, lm: ScoreSource, scales: ScaleSet, cfg: BeamConfig,
                utt_id: str = "", reference: TokenSeq = ()) -> NBestList:
    """Top-B search under the shallow-fusion decision rule.

    Returns the surviving hypotheses sorted by score descending; each ends
    with EOS or at max_len, with its per-token AM/LM log-probs recorded.
    """
    k = am.vocab_size
    if lm.vocab_size != k:
        raise UsageError("AM and LM disagree on the vocabulary size")
    scales.check_vocab_size(k)
    alpha, beta = scales.alpha_vec(k), scales.beta_vec(k)
    terminate = cfg.eos_rule == EOS_TERMINATE

    beam = [_Beam((), 0.0, (), (), False)]
    for _ in range(cfg.max_len):
        pool = []
        expanded = False
        for hyp in beam:
            if hyp.final:
                pool.append(hyp)
                continue
            expanded = True
            am_row = am.logprobs(hyp.tokens)
            lm_row = lm.logprobs(hyp.tokens)
            contrib = scaled_logprob(alpha, am_row) + scaled_logprob(beta, lm_row)
            for w in range(k):
                tokens = hyp.tokens + (w,)
                pool.append(_Beam(tokens, hyp.score + float(contrib[w]),
                                  hyp.am + (float(am_row[w]),), hyp.lm + (float(lm_row[w]),),
                                  terminate and w == cfg.eos_id))
        if not expanded:
            break
        pool.sort(key=lambda h: (-h.score, h.tokens))
        beam = pool[:cfg.beam_size]

    hyps = [Hypothesis(h.tokens, np.array(h.am), np.array(h.lm)) for h in beam]
    return NBestList(utt_id, tuple(reference), tuple(hyps))


def exhaustive_argmax(am: PositionwiseToyAM, lm: ScoreSource, scales: ScaleSet,
                      length: int) -> TokenSeq:
    """Globally optimal fixed-length sequence by scoring all k^N candidates."""
    scores = exact_sequence_scores(am, lm, scales, length)
    # np.argmax returns the first maximum: the lexicographically smallest winner
    return sequence_at(int(np.argmax(scores)), am.vocab_size, length)


def rescore_nbest(nbest: NBestList, scales: ScaleSet) -> NBestList:
    """Reorder a fixed hypothesis set by sequence score, stable under ties."""
    ranked = sorted(nbest.hypotheses, key=lambda h: -sequence_score(h, scales))
    return NBestList(nbest.utt_id, nbest.reference, tuple(ranked))


def save_nbest(path, nbests):
    """JSON Lines: {"id", "ref", "hyps": [{"tokens", "am_logp", "lm_logp"}]}."""
    with open(path, "w") as f:
        for nb in nbests:
            line = {
                "id": nb.utt_id,
                "ref": list(nb.reference),
                "hyps": [{"tokens": list(h.tokens),
                          "am_logp": [float(x) for x in h.am_logp],
                          "lm_logp": [float(x) for x in h.lm_logp]}
                         for h in nb.hypotheses],
            }
            f.write(json.dumps(line) + "\n")


def load_nbest(path) -> list[NBestList]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                hyps = tuple(Hypothesis(tuple(h["tokens"]),
                                        np.asarray(h["am_logp"], dtype=np.float64),
                                        np.asarray(h["lm_logp"], dtype=np.float64))
                             for h in d["hyps"])
                out.append(NBestList(str(d["id"]), tuple(int(t) for t in d["ref"]), hyps))
            except (KeyError, ValueError, TypeError) as e:
                raise UsageError(f"{path}: line {lineno}: {e}") from e
    return out


def strip_trailing_eos(tokens: TokenSeq, eos_id: int) -> TokenSeq:
    """Drop one final EOS if present; used when reporting error rates."""
    tokens = tuple(tokens)
    if tokens and tokens[-1] == eos_id:
        return tokens[:-1]
    return tokens
