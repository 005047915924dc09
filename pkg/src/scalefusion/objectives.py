"""Training criteria for the combination scales: cross-entropy and minimum
expected word error, both with hand-derived analytic gradients and a central
finite-difference oracle to check them against."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateInputError,
    GradientVector,
    Hypothesis,
    InfiniteLossError,
    NBestList,
    ScaleSet,
    StepScores,
    TokenSeq,
    UsageError,
    log_softmax,
    log_sum_exp,
    validate_step_scores,
)
from .fusion import nbest_scores, scaled_logprob, sequence_score_gradient
from .metrics import accuracy


@dataclass(frozen=True)
class CETrainingItem:
    """Teacher-forced target sequence with one StepScores per position."""

    target: TokenSeq
    steps: tuple[StepScores, ...]

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) != len(self.target):
            raise UsageError("need exactly one StepScores per target token")
        for n, step in enumerate(self.steps):
            issues = validate_step_scores(step)
            if issues:
                raise UsageError(f"step {n}: " + "; ".join(issues))


@dataclass(frozen=True)
class ObjectiveValue:
    loss: float
    gradient: GradientVector


def _masked_weighted(weight: np.ndarray, logp: np.ndarray) -> np.ndarray:
    # weight is exactly 0 wherever logp can be -inf under a positive scale
    with np.errstate(invalid="ignore"):
        return np.where(weight == 0.0, 0.0, weight * logp)


def ce_loss_grad_arrays(am: np.ndarray, lm: np.ndarray, targets: np.ndarray,
                        scales: ScaleSet) -> tuple[float, object, object]:
    """Cross-entropy loss and scale gradients from stacked (N, k) score arrays.

    loss = -sum_n log p_hat_n(w_n) with the per-token renormalization;
    d loss / d alpha_v = -sum_n [delta(w_n = v) - p_hat_n(v)] * am_n(v),
    beta analogous with the LM scores; agnostic mode sums over v.
    """
    n_pos, k = am.shape
    alpha, beta = scales.alpha_vec(k), scales.beta_vec(k)
    z = scaled_logprob(alpha, am) + scaled_logprob(beta, lm)
    row_max = z.max(axis=1)
    if np.any(row_max == -np.inf):
        raise DegenerateInputError("a position has all combined logits at -inf")
    if not np.all(np.isfinite(row_max)):
        raise DegenerateInputError("combined logits contain non-finite values")
    z_target = z[np.arange(n_pos), targets]
    if np.any(z_target == -np.inf):
        raise InfiniteLossError("a target token has combined logit -inf")
    shifted = z - row_max[:, None]
    log_norm = row_max + np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.sum(log_norm - z_target))
    posterior = np.exp(z - log_norm[:, None])
    weight = posterior.copy()
    weight[np.arange(n_pos), targets] -= 1.0
    ga = _masked_weighted(weight, am)
    gb = _masked_weighted(weight, lm)
    if scales.mode == "agnostic":
        return max(loss, 0.0), float(ga.sum()), float(gb.sum())
    return max(loss, 0.0), ga.sum(axis=0), gb.sum(axis=0)


def ce_objective(item: CETrainingItem, scales: ScaleSet) -> ObjectiveValue:
    """Negative log token-level renormalized probability of the target."""
    if not item.target:
        if scales.mode == "agnostic":
            return ObjectiveValue(0.0, GradientVector(0.0, 0.0))
        return ObjectiveValue(0.0, GradientVector(np.zeros(scales.k), np.zeros(scales.k)))
    am = np.stack([s.am_logp for s in item.steps])
    lm = np.stack([s.lm_logp for s in item.steps])
    targets = np.asarray(item.target, dtype=np.int64)
    loss, d_alpha, d_beta = ce_loss_grad_arrays(am, lm, targets, scales)
    return ObjectiveValue(loss, GradientVector(d_alpha, d_beta))


def hypothesis_errors(nbest: NBestList, accuracy_mode: str = "neg-edit",
                      detokenizer=None) -> np.ndarray:
    """Nonnegative error counts E(h, ref) = -accuracy for every hypothesis."""
    return np.array([
        -accuracy(h.tokens, nbest.reference, mode=accuracy_mode, detokenizer=detokenizer)
        for h in nbest.hypotheses
    ])


def minwer_loss_grad(scores: np.ndarray, errors: np.ndarray):
    """Expected error under the list posterior plus the per-hypothesis weights
    q_h (E_h - loss) that multiply each score gradient."""
    q = np.exp(scores - log_sum_exp(scores))
    loss = float(np.dot(q, errors))
    return loss, q * (errors - loss)


def minwer_objective(nbest: NBestList, scales: ScaleSet, accuracy_mode: str = "neg-edit",
                     detokenizer=None) -> ObjectiveValue:
    """Expected edit distance under the n-best posterior, with its gradient.

    d loss / d theta = sum_h q_h (E_h - loss) d score_h / d theta.
    """
    errors = hypothesis_errors(nbest, accuracy_mode, detokenizer)
    scores = nbest_scores(nbest, scales)
    loss, coeff = minwer_loss_grad(scores, errors)
    if scales.mode == "agnostic":
        d_alpha = d_beta = 0.0
        for c, h in zip(coeff, nbest.hypotheses):
            d_alpha += c * float(np.sum(h.am_logp))
            d_beta += c * float(np.sum(h.lm_logp))
        return ObjectiveValue(loss, GradientVector(float(d_alpha), float(d_beta)))
    k = scales.k
    d_alpha, d_beta = np.zeros(k), np.zeros(k)
    for c, h in zip(coeff, nbest.hypotheses):
        g = sequence_score_gradient(h, scales)
        d_alpha += c * g.d_alpha
        d_beta += c * g.d_beta
    return ObjectiveValue(loss, GradientVector(d_alpha, d_beta))


def fd_gradient_flat(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    Coordinates where either evaluation is non-finite come back as NaN.
    """
    if h <= 0:
        raise UsageError(f"step size must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        fp, fm = f(plus), f(minus)
        out.flat[i] = (fp - fm) / (2.0 * h) if math.isfinite(fp) and math.isfinite(fm) else math.nan
    return out


def finite_difference_gradient(objective, scales: ScaleSet, h: float = 1e-5) -> GradientVector:
    """Finite-difference scale gradient of a closure f(ScaleSet) -> loss."""
    a0 = np.atleast_1d(np.asarray(scales.alpha, dtype=np.float64))
    b0 = np.atleast_1d(np.asarray(scales.beta, dtype=np.float64))
    split = a0.size

    def f(flat: np.ndarray) -> float:
        a, b = flat[:split], flat[split:]
        if scales.mode == "agnostic":
            return float(objective(scales.with_values(float(a[0]), float(b[0]))))
        return float(objective(scales.with_values(a, b)))

    g = fd_gradient_flat(f, np.concatenate([a0, b0]), h)
    if scales.mode == "agnostic":
        return GradientVector(float(g[0]), float(g[1]))
    return GradientVector(g[:split], g[split:])


# ---------------------------------------------------------------------------
# randomized instances for gradient verification
# ---------------------------------------------------------------------------

def random_scales(rng: np.random.Generator, mode: str, k: int) -> ScaleSet:
    if mode == "agnostic":
        return ScaleSet("agnostic", 1.0 + 0.3 * rng.standard_normal(),
                        1.0 + 0.3 * rng.standard_normal())
    return ScaleSet("subword", 1.0 + 0.3 * rng.standard_normal(k),
                    1.0 + 0.3 * rng.standard_normal(k))


def random_step_scores(rng: np.random.Generator, k: int) -> StepScores:
    return StepScores(log_softmax(2.0 * rng.standard_normal(k)),
                      log_softmax(2.0 * rng.standard_normal(k)))


def random_ce_item(rng: np.random.Generator, k: int, length: int) -> CETrainingItem:
    steps = tuple(random_step_scores(rng, k) for _ in range(length))
    target = tuple(int(t) for t in rng.integers(0, k, size=length))
    return CETrainingItem(target, steps)


def random_nbest(rng: np.random.Generator, k: int, max_hyps: int = 5,
                 max_len: int = 6) -> NBestList:
    ref = tuple(int(t) for t in rng.integers(0, k, size=rng.integers(1, max_len + 1)))
    hyps, seen = [], set()
    target_count = int(rng.integers(1, max_hyps + 1))
    while len(hyps) < target_count:
        tokens = tuple(int(t) for t in rng.integers(0, k, size=rng.integers(1, max_len + 1)))
        if tokens in seen:
            continue
        seen.add(tokens)
        n = len(tokens)
        hyps.append(Hypothesis(tokens, np.log(rng.uniform(0.02, 0.98, size=n)),
                               np.log(rng.uniform(0.02, 0.98, size=n))))
    return NBestList("rand", ref, tuple(hyps))


def gradient_check(criterion: str, mode: str, trials: int, seed: int,
                   h: float = 1e-5, k: int = 6) -> dict:
    """Compare analytic and finite-difference gradients on random instances.

    Returns {"criterion", "mode", "trials", "max_rel_err", "h"}; the relative
    error denominator is max(1, |analytic|, |numeric|) per coordinate.
    """
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _ in range(trials):
        scales = random_scales(rng, mode, k)
        if criterion == "ce":
            item = random_ce_item(rng, k, int(rng.integers(1, 5)))
            analytic = ce_objective(item, scales).gradient
            fd = finite_difference_gradient(lambda s: ce_objective(item, s).loss, scales, h)
        elif criterion == "minwer":
            nbest = random_nbest(rng, k)
            analytic = minwer_objective(nbest, scales).gradient
            fd = finite_difference_gradient(lambda s: minwer_objective(nbest, s).loss, scales, h)
        else:
            raise UsageError(f"unknown criterion {criterion!r}")
        a, f = analytic.flat(), fd.flat()
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
        max_err = max(max_err, float(np.max(np.abs(a - f) / denom)))
    return {"criterion": criterion, "mode": mode, "trials": trials,
            "h": h, "max_rel_err": max_err}
