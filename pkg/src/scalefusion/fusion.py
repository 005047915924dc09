"""Renormalized log-linear combination of AM and LM scores.

Token-level and sentence-level posteriors for both scale granularities, plus
the exact (fully enumerated) sentence-level normalization that is feasible
only at toy scale and serves as the oracle for everything else.
"""

from __future__ import annotations

import math

import numpy as np

from .core import (
    CapacityError,
    DegenerateInputError,
    GradientVector,
    Hypothesis,
    NBestList,
    ScaleSet,
    StepScores,
    TokenSeq,
    UsageError,
    log_sum_exp,
)
from .providers import PositionwiseToyAM, ScoreSource

ENUMERATION_CAP = 10_000_000


def scaled_logprob(scale, logp):
    """Elementwise scale * logp with the convention 0 * (+-inf) = 0.

    A model with scale zero exerts no influence, even on tokens it assigns
    zero probability.
    """
    scale = np.asarray(scale, dtype=np.float64)
    logp = np.asarray(logp, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(scale == 0.0, 0.0, scale * logp)


def combined_logits(step: StepScores, scales: ScaleSet) -> np.ndarray:
    """alpha_w * am_logp(w) + beta_w * lm_logp(w); -inf marks zero-probability
    tokens under a positive scale."""
    k = step.k
    return scaled_logprob(scales.alpha_vec(k), step.am_logp) + \
        scaled_logprob(scales.beta_vec(k), step.lm_logp)


def _normalize_logits(z: np.ndarray) -> np.ndarray:
    m = float(np.max(z))
    if m == -math.inf:
        raise DegenerateInputError("all combined logits are -inf")
    if not math.isfinite(m):
        raise DegenerateInputError("combined logits contain non-finite values")
    return z - log_sum_exp(z)


def token_posterior(step: StepScores, scales: ScaleSet) -> np.ndarray:
    """Per-token renormalization: log-softmax of the combined logits."""
    return _normalize_logits(combined_logits(step, scales))


def token_sequence_logprob(steps, tokens: TokenSeq, scales: ScaleSet) -> float:
    """Sum of token-level posterior log-probs along a sequence (log prod p_hat_n)."""
    tokens = tuple(tokens)
    if len(steps) != len(tokens):
        raise UsageError("need exactly one StepScores per token")
    return float(sum(token_posterior(s, scales)[t] for s, t in zip(steps, tokens)))


def sequence_score(hyp: Hypothesis, scales: ScaleSet) -> float:
    """Unnormalized shallow-fusion score: sum_n alpha_{w_n} am_n + beta_{w_n} lm_n."""
    if len(hyp) == 0:
        return 0.0
    if scales.mode == "agnostic":
        a = np.full(len(hyp), scales.alpha)
        b = np.full(len(hyp), scales.beta)
    else:
        idx = list(hyp.tokens)
        a, b = scales.alpha[idx], scales.beta[idx]
    return float(np.sum(scaled_logprob(a, hyp.am_logp)) + np.sum(scaled_logprob(b, hyp.lm_logp)))


def nbest_scores(nbest: NBestList, scales: ScaleSet) -> np.ndarray:
    return np.array([sequence_score(h, scales) for h in nbest.hypotheses])


def nbest_posterior(nbest: NBestList, scales: ScaleSet) -> np.ndarray:
    """Sequence-level posterior renormalized over the n-best list (a softmax)."""
    scores = nbest_scores(nbest, scales)
    return np.exp(scores - log_sum_exp(scores))


def sequence_at(index: int, k: int, length: int) -> TokenSeq:
    """Token sequence at a lexicographic enumeration index (first token most
    significant)."""
    tokens = [0] * length
    for pos in range(length - 1, -1, -1):
        index, tokens[pos] = divmod(index, k)
    return tuple(tokens)


def sequence_index(tokens: TokenSeq, k: int) -> int:
    index = 0
    for t in tokens:
        index = index * k + t
    return index


def exact_sequence_scores(am: PositionwiseToyAM, lm: ScoreSource, scales: ScaleSet,
                          length: int) -> np.ndarray:
    """Shallow-fusion scores of all k^length sequences, in lexicographic order.

    The positionwise AM factorizes over positions; LM scores follow each
    enumerated prefix's own history. Feasible only while k^length stays small.
    """
    k = am.vocab_size
    if lm.vocab_size != k:
        raise UsageError("AM and LM disagree on the vocabulary size")
    if length < 1:
        raise UsageError("length must be >= 1")
    if k ** length > ENUMERATION_CAP:
        raise CapacityError(f"k^N = {k}^{length} exceeds the enumeration cap {ENUMERATION_CAP}")
    alpha, beta = scales.alpha_vec(k), scales.beta_vec(k)
    scores = np.zeros(1)
    for n in range(length):
        am_part = scaled_logprob(alpha, am.row(n))
        expanded = np.empty(scores.size * k)
        for i in range(scores.size):
            prefix = sequence_at(i, k, n)
            lm_part = scaled_logprob(beta, lm.logprobs(prefix))
            expanded[i * k:(i + 1) * k] = scores[i] + am_part + lm_part
        scores = expanded
    return scores


def exact_sentence_posterior(am: PositionwiseToyAM, lm: ScoreSource, length: int,
                             scales: ScaleSet, target: TokenSeq) -> float:
    """Sentence-level renormalized probability of `target`, with the partition
    summed over every sequence of the given length by explicit enumeration."""
    target = tuple(target)
    if len(target) != length:
        raise UsageError(f"target has length {len(target)}, expected {length}")
    scores = exact_sequence_scores(am, lm, scales, length)
    return float(np.exp(scores[sequence_index(target, am.vocab_size)] - log_sum_exp(scores)))


def sequence_score_gradient(hyp: Hypothesis, scales: ScaleSet) -> GradientVector:
    """d sequence_score / d scales. Subword mode: the alpha_v partial collects
    the hypothesis's AM log-probs at positions where token v occurs."""
    if scales.mode == "agnostic":
        return GradientVector(float(np.sum(hyp.am_logp)), float(np.sum(hyp.lm_logp)))
    k = scales.k
    d_alpha = np.zeros(k)
    d_beta = np.zeros(k)
    idx = np.fromiter(hyp.tokens, dtype=np.int64, count=len(hyp))
    np.add.at(d_alpha, idx, hyp.am_logp)
    np.add.at(d_beta, idx, hyp.lm_logp)
    return GradientVector(d_alpha, d_beta)
