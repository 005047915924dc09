"""Scale initialization, gradient-descent training of the combination scales,
joint training of the trainable toy AM, and the grid-search manual baseline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GradientVector, NBestList, ScaleSet, TokenSeq, UsageError
from .decode import BeamConfig, beam_search, strip_trailing_eos
from .fusion import scaled_logprob
from .metrics import corpus_wer
from .objectives import hypothesis_errors, minwer_loss_grad
from .providers import NGramLM, PositionwiseToyAM, ScoreSource, TrainableToyAM, Utterance

CRITERIA = ("ce", "minwer")
MODES = ("agnostic", "subword")


class Adam:
    """Adaptive-moment gradient descent over one flat parameter vector."""

    def __init__(self, dim: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise UsageError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise UsageError("moment decay rates must lie in (0, 1)")
        if eps <= 0:
            raise UsageError(f"epsilon must be > 0, got {eps}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    criterion: str = "ce"
    mode: str = "agnostic"
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 0          # 0 means full batch
    seed: int = 0
    train_scales: bool = True
    train_toy_am: bool = False
    accuracy_mode: str = "neg-edit"
    regenerate_nbest: bool = False
    dataset: str = "train"

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise UsageError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise UsageError(f"learning rate must be >= 0, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise UsageError("moment decay rates must lie in (0, 1)")
        if self.batch_size < 0:
            raise UsageError(f"batch_size must be >= 0, got {self.batch_size}")

    def to_json_dict(self) -> dict:
        return {
            "criterion": self.criterion, "mode": self.mode, "epochs": self.epochs,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "adam_eps": self.adam_eps, "batch_size": self.batch_size,
            "seed": self.seed, "train_scales": self.train_scales,
            "train_toy_am": self.train_toy_am, "accuracy_mode": self.accuracy_mode,
            "regenerate_nbest": self.regenerate_nbest, "dataset": self.dataset,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown train config fields: {sorted(unknown)}")
        return TrainConfig(**d)


@dataclass
class TrainReport:
    criterion: str
    mode: str
    epochs: int
    loss_per_epoch: list[float]
    final_scales: ScaleSet
    mean_alpha: float
    mean_beta: float
    seconds_per_epoch: list[float] = field(default_factory=list)
    diverged: bool = False

    def to_json_dict(self, vocab_size: int) -> dict:
        return {
            "criterion": self.criterion,
            "mode": self.mode,
            "epochs": self.epochs,
            "loss_per_epoch": self.loss_per_epoch,
            "final_scales": self.final_scales.to_json_dict(vocab_size),
            "mean_alpha": self.mean_alpha,
            "mean_beta": self.mean_beta,
            "seconds_per_epoch": self.seconds_per_epoch,
            "diverged": self.diverged,
        }


def init_scales(mode: str, k: int, seed: int, stddev: float = 0.01) -> ScaleSet:
    """Gaussian draws around 1.0 (the neutral scale), deterministic per seed."""
    if stddev < 0:
        raise UsageError(f"stddev must be >= 0, got {stddev}")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "agnostic":
        return ScaleSet("agnostic", rng.normal(1.0, stddev), rng.normal(1.0, stddev))
    return ScaleSet("subword", rng.normal(1.0, stddev, size=k), rng.normal(1.0, stddev, size=k))


def _pack_scales(scales: ScaleSet) -> np.ndarray:
    if scales.mode == "agnostic":
        return np.array([scales.alpha, scales.beta])
    return np.concatenate([scales.alpha, scales.beta])


def _unpack_scales(mode: str, k: int, vec: np.ndarray) -> ScaleSet:
    if mode == "agnostic":
        return ScaleSet("agnostic", float(vec[0]), float(vec[1]))
    return ScaleSet("subword", vec[:k], vec[k:])


def teacher_forced_lm_matrix(lm: ScoreSource, reference: TokenSeq) -> np.ndarray:
    """LM log-distributions along the reference prefixes, one row per position."""
    return np.stack([lm.logprobs(reference[:n]) for n in range(len(reference))])


@dataclass
class _CEData:
    am: np.ndarray        # all positions of all utterances, stacked (T, k)
    lm: np.ndarray
    targets: np.ndarray   # (T,)
    utt_rows: list[np.ndarray]


def _compile_ce(corpus: list[Utterance], lm: ScoreSource) -> _CEData:
    if not corpus:
        raise UsageError("training corpus is empty")
    ams, lms, tgts, rows = [], [], [], []
    offset = 0
    for utt in corpus:
        n = len(utt.reference)
        if n == 0:
            raise UsageError(f"utterance {utt.utt_id!r} has an empty reference")
        if utt.am.num_rows < n:
            raise UsageError(f"utterance {utt.utt_id!r}: AM has fewer rows than the reference")
        ams.append(utt.am.log_matrix[:n])
        lms.append(teacher_forced_lm_matrix(lm, utt.reference))
        tgts.append(np.asarray(utt.reference, dtype=np.int64))
        rows.append(np.arange(offset, offset + n))
        offset += n
    return _CEData(np.concatenate(ams), np.concatenate(lms), np.concatenate(tgts), rows)


def _ce_batch_loss_grad(data: _CEData, utt_idx, scales: ScaleSet):
    from .objectives import ce_loss_grad_arrays

    rows = np.concatenate([data.utt_rows[i] for i in utt_idx])
    loss, d_alpha, d_beta = ce_loss_grad_arrays(
        data.am[rows], data.lm[rows], data.targets[rows], scales)
    inv = 1.0 / len(utt_idx)
    if scales.mode == "agnostic":
        return loss * inv, np.array([d_alpha, d_beta]) * inv
    return loss * inv, np.concatenate([d_alpha, d_beta]) * inv


@dataclass
class _MinwerData:
    errors: np.ndarray       # (H,)
    am_sum: np.ndarray       # (H,) total AM log-prob per hypothesis
    lm_sum: np.ndarray
    am_agg: np.ndarray | None  # (H, k) per-unit sums, subword mode only
    lm_agg: np.ndarray | None
    hyp_counts: np.ndarray   # hypotheses per utterance


def _compile_minwer(nbests: list[NBestList], mode: str, k: int,
                    accuracy_mode: str, detokenizer) -> _MinwerData:
    if not nbests:
        raise UsageError("no n-best lists to train on")
    errors, am_sum, lm_sum, counts = [], [], [], []
    aggs = ([], []) if mode == "subword" else None
    for nb in nbests:
        errors.append(hypothesis_errors(nb, accuracy_mode, detokenizer))
        counts.append(len(nb))
        for h in nb.hypotheses:
            am_sum.append(float(np.sum(h.am_logp)))
            lm_sum.append(float(np.sum(h.lm_logp)))
            if aggs is not None:
                a, b = np.zeros(k), np.zeros(k)
                idx = np.fromiter(h.tokens, dtype=np.int64, count=len(h))
                np.add.at(a, idx, h.am_logp)
                np.add.at(b, idx, h.lm_logp)
                aggs[0].append(a)
                aggs[1].append(b)
    return _MinwerData(
        errors=np.concatenate(errors),
        am_sum=np.asarray(am_sum),
        lm_sum=np.asarray(lm_sum),
        am_agg=np.stack(aggs[0]) if aggs else None,
        lm_agg=np.stack(aggs[1]) if aggs else None,
        hyp_counts=np.asarray(counts, dtype=np.int64),
    )


def _minwer_batch_loss_grad(data: _MinwerData, utt_idx, scales: ScaleSet):
    sel = np.concatenate([
        np.arange(start, start + count) for start, count in zip(
            np.concatenate([[0], np.cumsum(data.hyp_counts)])[utt_idx],
            data.hyp_counts[utt_idx])
    ])
    errors = data.errors[sel]
    if scales.mode == "agnostic":
        am_sel, lm_sel = data.am_sum[sel], data.lm_sum[sel]
        scores = scales.alpha * am_sel + scales.beta * lm_sel
        grad = np.zeros(2)
    else:
        am_sel, lm_sel = data.am_agg[sel], data.lm_agg[sel]
        scores = am_sel @ scales.alpha + lm_sel @ scales.beta
        grad = np.zeros(2 * scales.k)
    total_loss = 0.0
    pos = 0
    for count in data.hyp_counts[utt_idx]:
        seg = slice(pos, pos + count)
        loss_u, coeff = minwer_loss_grad(scores[seg], errors[seg])
        total_loss += loss_u
        if scales.mode == "agnostic":
            grad[0] += float(coeff @ am_sel[seg])
            grad[1] += float(coeff @ lm_sel[seg])
        else:
            grad[:scales.k] += coeff @ am_sel[seg]
            grad[scales.k:] += coeff @ lm_sel[seg]
        pos += count
    inv = 1.0 / len(utt_idx)
    return total_loss * inv, grad * inv


def _batches(num_utts: int, batch_size: int, rng: np.random.Generator):
    if batch_size == 0 or batch_size >= num_utts:
        yield np.arange(num_utts)
        return
    order = rng.permutation(num_utts)
    for start in range(0, num_utts, batch_size):
        yield order[start:start + batch_size]


def train_scales(cfg: TrainConfig, scales0: ScaleSet, corpus: list[Utterance] | None = None,
                 lm: ScoreSource | None = None, nbests: list[NBestList] | None = None,
                 beam_cfg: BeamConfig | None = None, checkpoint_cb=None,
                 detokenizer=None) -> TrainReport:
    """Gradient-descent training of the scales with model parameters fixed.

    CE needs `corpus` (toy-AM matrices) plus `lm` for teacher-forced rows;
    minWER needs `nbests` (or corpus+lm+beam_cfg to decode them, re-decoded
    each epoch when cfg.regenerate_nbest is set).
    """
    if cfg.mode != scales0.mode:
        raise UsageError(f"config mode {cfg.mode!r} does not match the initial scales")
    if cfg.criterion == "ce":
        if corpus is None or lm is None:
            raise UsageError("CE training needs a corpus and a language model")
        k = corpus[0].am.vocab_size if corpus else 0
        data = _compile_ce(corpus, lm)
        evaluate = lambda idx, s: _ce_batch_loss_grad(data, idx, s)
        num_utts = len(corpus)
    else:
        if nbests is None:
            if corpus is None or lm is None or beam_cfg is None:
                raise UsageError("minWER training needs n-best lists, or corpus+lm+beam_cfg")
            nbests = [beam_search(u.am, lm, scales0, beam_cfg, u.utt_id, u.reference)
                      for u in corpus]
        k = scales0.k or (lm.vocab_size if lm is not None else
                          max(max(h.tokens) for nb in nbests for h in nb.hypotheses) + 1)
        data = _compile_minwer(nbests, cfg.mode, k, cfg.accuracy_mode, detokenizer)
        evaluate = lambda idx, s: _minwer_batch_loss_grad(data, idx, s)
        num_utts = len(data.hyp_counts)

    params = _pack_scales(scales0)
    adam = Adam(params.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    k_for_unpack = scales0.k or k

    losses: list[float] = []
    seconds: list[float] = []
    diverged = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.criterion == "minwer" and cfg.regenerate_nbest and epoch > 0:
            if corpus is None or lm is None or beam_cfg is None:
                raise UsageError("regenerate_nbest needs corpus, lm, and beam_cfg")
            current = _unpack_scales(cfg.mode, k_for_unpack, params)
            nbests = [beam_search(u.am, lm, current, beam_cfg, u.utt_id, u.reference)
                      for u in corpus]
            data = _compile_minwer(nbests, cfg.mode, k_for_unpack, cfg.accuracy_mode, detokenizer)
            evaluate = lambda idx, s: _minwer_batch_loss_grad(data, idx, s)
        epoch_loss = 0.0
        epoch_weight = 0
        for idx in _batches(num_utts, cfg.batch_size, rng):
            scales = _unpack_scales(cfg.mode, k_for_unpack, params)
            loss, grad = evaluate(idx, scales)
            if not np.isfinite(loss):
                diverged = True
                break
            epoch_loss += loss * len(idx)
            epoch_weight += len(idx)
            if cfg.train_scales:
                params = adam.step(params, grad)
        if diverged:
            break
        losses.append(epoch_loss / epoch_weight)
        seconds.append(time.perf_counter() - t0)
        if checkpoint_cb is not None:
            checkpoint_cb(epoch, _unpack_scales(cfg.mode, k_for_unpack, params))

    final = _unpack_scales(cfg.mode, k_for_unpack, params)
    return TrainReport(cfg.criterion, cfg.mode, cfg.epochs, losses, final,
                       final.mean_alpha(), final.mean_beta(), seconds, diverged)


def _joint_ce_utterance(logits: np.ndarray, lm_rows: np.ndarray, targets: np.ndarray,
                        scales: ScaleSet):
    """CE loss for one utterance with gradients for scales and toy-AM logits.

    The AM rows are the log-softmax of the logits, so
    d loss / d logits = G - softmax(logits) * rowsum(G) with
    G = alpha_v (p_hat - onehot) the gradient w.r.t. the AM log-probs.
    """
    n, k = logits.shape
    m = logits.max(axis=1, keepdims=True)
    log_am = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    alpha, beta = scales.alpha_vec(k), scales.beta_vec(k)
    z = alpha * log_am + scaled_logprob(beta, lm_rows)
    zm = z.max(axis=1, keepdims=True)
    log_norm = zm[:, 0] + np.log(np.exp(z - zm).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.sum(log_norm - z[rows, targets]))
    posterior = np.exp(z - log_norm[:, None])
    weight = posterior
    weight[rows, targets] -= 1.0
    d_alpha_mat = weight * log_am
    d_beta_mat = _safe_weight_lm(weight, lm_rows)
    g = alpha * weight
    am_probs = np.exp(log_am)
    d_logits = g - am_probs * g.sum(axis=1, keepdims=True)
    if scales.mode == "agnostic":
        return loss, float(d_alpha_mat.sum()), float(d_beta_mat.sum()), d_logits
    return loss, d_alpha_mat.sum(axis=0), d_beta_mat.sum(axis=0), d_logits


def _safe_weight_lm(weight: np.ndarray, lm_rows: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.where(weight == 0.0, 0.0, weight * lm_rows)


def joint_train(cfg: TrainConfig, scales0: ScaleSet, corpus: list[Utterance],
                lm: ScoreSource, checkpoint_cb=None):
    """Fine-tune toy-AM logits (and optionally the scales) with the LM fixed.

    Only the CE criterion is supported here, matching the training recipe the
    scale-learning procedure pairs with joint optimization. Returns
    (TrainReport, trained per-utterance AMs, final scales).
    """
    if cfg.criterion != "ce":
        raise UsageError("joint training supports the CE criterion only")
    if cfg.mode != scales0.mode:
        raise UsageError(f"config mode {cfg.mode!r} does not match the initial scales")
    if not corpus:
        raise UsageError("training corpus is empty")
    k = corpus[0].am.vocab_size
    k_for_unpack = scales0.k or k

    toy_ams = [TrainableToyAM(u.am.log_matrix[:len(u.reference)].copy()) for u in corpus]
    lm_rows = [teacher_forced_lm_matrix(lm, u.reference) for u in corpus]
    targets = [np.asarray(u.reference, dtype=np.int64) for u in corpus]

    scale_dim = _pack_scales(scales0).size if cfg.train_scales else 0
    am_sizes = [t.logits.size for t in toy_ams]
    am_offsets = np.concatenate([[0], np.cumsum(am_sizes)]) + scale_dim

    params = np.empty(0)
    if cfg.train_scales:
        params = _pack_scales(scales0)
    if cfg.train_toy_am:
        params = np.concatenate([params] + [t.logits.ravel() for t in toy_ams])
    adam = Adam(params.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    scales = scales0

    def current_scales():
        if cfg.train_scales:
            return _unpack_scales(cfg.mode, k_for_unpack, params[:scale_dim])
        return scales0

    def utterance_logits(i):
        if cfg.train_toy_am:
            lo, hi = am_offsets[i], am_offsets[i] + am_sizes[i]
            return params[lo:hi].reshape(toy_ams[i].logits.shape)
        return toy_ams[i].logits

    losses: list[float] = []
    seconds: list[float] = []
    diverged = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        epoch_weight = 0
        for idx in _batches(len(corpus), cfg.batch_size, rng):
            scales = current_scales()
            inv = 1.0 / len(idx)
            grad = np.zeros(params.size)
            batch_loss = 0.0
            for i in idx:
                loss_u, da, db, dX = _joint_ce_utterance(
                    utterance_logits(i), lm_rows[i], targets[i], scales)
                batch_loss += loss_u
                if cfg.train_scales:
                    if cfg.mode == "agnostic":
                        grad[0] += da * inv
                        grad[1] += db * inv
                    else:
                        grad[:k_for_unpack] += da * inv
                        grad[k_for_unpack:scale_dim] += db * inv
                if cfg.train_toy_am:
                    lo, hi = am_offsets[i], am_offsets[i] + am_sizes[i]
                    grad[lo:hi] += dX.ravel() * inv
            if not np.isfinite(batch_loss):
                diverged = True
                break
            epoch_loss += batch_loss * inv * len(idx)
            epoch_weight += len(idx)
            if params.size:
                params = adam.step(params, grad)
        if diverged:
            break
        losses.append(epoch_loss / epoch_weight)
        seconds.append(time.perf_counter() - t0)
        if checkpoint_cb is not None:
            checkpoint_cb(epoch, current_scales())

    if cfg.train_toy_am:
        trained = [TrainableToyAM(utterance_logits(i)) for i in range(len(corpus))]
    else:
        trained = toy_ams
    final = current_scales()
    report = TrainReport(cfg.criterion, cfg.mode, cfg.epochs, losses, final,
                         final.mean_alpha(), final.mean_beta(), seconds, diverged)
    return report, trained, final


@dataclass
class GridSearchResult:
    best_beta: float
    best_error_rate: float
    alpha: float
    table: list[dict]

    def to_json_dict(self) -> dict:
        return {"best_beta": self.best_beta, "best_error_rate": self.best_error_rate,
                "alpha": self.alpha, "table": self.table}


def grid_search_scales(nbests: list[NBestList], beta_grid, alpha: float = 1.0,
                       eos_id: int | None = None) -> GridSearchResult:
    """Manual-tuning baseline: pick the beta whose rescored top-1 minimizes the
    corpus error rate; ties go to the smaller beta."""
    beta_grid = [float(b) for b in beta_grid]
    if not beta_grid:
        raise UsageError("beta grid is empty")
    am_sum = [np.array([float(np.sum(h.am_logp)) for h in nb.hypotheses]) for nb in nbests]
    lm_sum = [np.array([float(np.sum(h.lm_logp)) for h in nb.hypotheses]) for nb in nbests]
    refs = []
    for nb in nbests:
        r = nb.reference
        refs.append(strip_trailing_eos(r, eos_id) if eos_id is not None else r)

    hyp_cache: dict[tuple[int, int], TokenSeq] = {}

    def top1_tokens(u: int, beta: float) -> TokenSeq:
        i = int(np.argmax(alpha * am_sum[u] + beta * lm_sum[u]))
        key = (u, i)
        if key not in hyp_cache:
            t = nbests[u].hypotheses[i].tokens
            hyp_cache[key] = strip_trailing_eos(t, eos_id) if eos_id is not None else t
        return hyp_cache[key]

    table = []
    best_beta = None
    best_rate = None
    for beta in sorted(beta_grid):
        hyps = [top1_tokens(u, beta) for u in range(len(nbests))]
        report = corpus_wer(refs, hyps)
        table.append({"beta": beta, "error_rate": report.error_rate,
                      "errors": report.errors, "ref_tokens": report.ref_tokens})
        if best_rate is None or report.error_rate < best_rate:
            best_rate = report.error_rate
            best_beta = beta
    return GridSearchResult(best_beta, best_rate, alpha, table)
