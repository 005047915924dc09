"""Shared domain types, validation, and numerically stable log-space primitives.

All probabilities in this package live in natural-log space; linear-space
values only appear in documented outputs. Types are immutable after
construction and every function here is pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Tolerances: strict one for validating inputs, looser one for quantities
# accumulated over up to ~1e4 terms in double precision.
NORMALIZATION_TOL = 1e-9
DERIVED_TOL = 1e-8

TokenSeq = tuple[int, ...]


class UsageError(ValueError):
    """A caller violated a documented precondition."""


class CapacityError(RuntimeError):
    """An exact enumeration was requested beyond the supported size."""


class InputDataError(RuntimeError):
    """An input file is unreadable, malformed, or violates its schema."""


class DegenerateInputError(ValueError):
    """No finite combined score exists, so no distribution can be formed."""


class InfiniteLossError(ArithmeticError):
    """The objective is infinite at the requested point."""


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) with max-subtraction for stability.

    Returns exactly -inf only when every input is -inf. Raises UsageError
    on empty input.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise UsageError("log_sum_exp needs at least one value")
    m = float(np.max(v))
    if math.isnan(m) or math.isinf(m):
        # all -inf stays -inf; +inf and nan propagate
        return m
    return m + math.log(float(np.sum(np.exp(v - m))))


def log_softmax(values: np.ndarray) -> np.ndarray:
    """Shift a vector of log-scores so it becomes a log-distribution."""
    return values - log_sum_exp(values)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Vocabulary:
    """Closed set of subword units; ids are the positions 0..k-1.

    Unit strings ending in `continuation_marker` glue to the following unit
    when detokenizing (BPE-style continuation).
    """

    units: tuple[str, ...]
    eos_id: int
    continuation_marker: str = "@@"

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        if len(self.units) < 2:
            raise UsageError(f"vocabulary needs k >= 2 units, got {len(self.units)}")
        if len(set(self.units)) != len(self.units):
            raise UsageError("vocabulary unit strings must be unique")
        if not 0 <= self.eos_id < len(self.units):
            raise UsageError(f"eos_id {self.eos_id} out of range for k={len(self.units)}")

    @property
    def k(self) -> int:
        return len(self.units)

    def content_length(self, token_id: int) -> int:
        """Character length of a unit, continuation marker excluded."""
        unit = self.units[token_id]
        if self.continuation_marker and unit.endswith(self.continuation_marker):
            unit = unit[: -len(self.continuation_marker)]
        return len(unit)

    def detokenize(self, tokens, drop_eos: bool = True) -> list[str]:
        """Merge subword units into words, driven by the continuation marker."""
        words: list[str] = []
        current = ""
        for t in tokens:
            if drop_eos and t == self.eos_id:
                continue
            unit = self.units[t]
            if self.continuation_marker and unit.endswith(self.continuation_marker):
                current += unit[: -len(self.continuation_marker)]
            else:
                words.append(current + unit)
                current = ""
        if current:
            words.append(current)
        return words

    def to_json_dict(self) -> dict:
        return {
            "units": list(self.units),
            "eos_id": self.eos_id,
            "continuation_marker": self.continuation_marker,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Vocabulary":
        return Vocabulary(
            units=tuple(d["units"]),
            eos_id=int(d["eos_id"]),
            continuation_marker=d.get("continuation_marker", "@@"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict()) + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        return Vocabulary.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ScaleSet:
    """AM scales alpha and LM scales beta; scalars or per-unit vectors.

    mode "agnostic": alpha and beta are floats shared by every unit.
    mode "subword": alpha and beta are length-k vectors indexed by token id.
    """

    mode: str
    alpha: object
    beta: object

    def __post_init__(self):
        if self.mode == "agnostic":
            a, b = float(self.alpha), float(self.beta)
            if not (math.isfinite(a) and math.isfinite(b)):
                raise UsageError("agnostic scales must be finite")
            object.__setattr__(self, "alpha", a)
            object.__setattr__(self, "beta", b)
        elif self.mode == "subword":
            a = _readonly(np.asarray(self.alpha, dtype=np.float64))
            b = _readonly(np.asarray(self.beta, dtype=np.float64))
            if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
                raise UsageError("subword scales must be 1-D vectors of equal length")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise UsageError("subword scales must be finite")
            object.__setattr__(self, "alpha", a)
            object.__setattr__(self, "beta", b)
        else:
            raise UsageError(f"unknown scale mode {self.mode!r}")

    @property
    def k(self) -> int | None:
        """Vector length in subword mode, None in agnostic mode."""
        return None if self.mode == "agnostic" else int(np.size(self.alpha))

    def check_vocab_size(self, k: int):
        if self.mode == "subword" and self.k != k:
            raise UsageError(f"scale vectors have length {self.k}, vocabulary has k={k}")

    def alpha_vec(self, k: int) -> np.ndarray:
        self.check_vocab_size(k)
        if self.mode == "agnostic":
            return np.full(k, self.alpha)
        return self.alpha

    def beta_vec(self, k: int) -> np.ndarray:
        self.check_vocab_size(k)
        if self.mode == "agnostic":
            return np.full(k, self.beta)
        return self.beta

    def with_values(self, alpha, beta) -> "ScaleSet":
        return ScaleSet(self.mode, alpha, beta)

    def mean_alpha(self) -> float:
        return float(np.mean(self.alpha))

    def mean_beta(self) -> float:
        return float(np.mean(self.beta))

    def to_json_dict(self, vocab_size: int) -> dict:
        if self.mode == "subword":
            self.check_vocab_size(vocab_size)
            alpha, beta = list(self.alpha), list(self.beta)
        else:
            alpha, beta = self.alpha, self.beta
        return {"mode": self.mode, "alpha": alpha, "beta": beta, "vocab_size": int(vocab_size)}

    @staticmethod
    def from_json_dict(d: dict) -> tuple["ScaleSet", int]:
        scales = ScaleSet(d["mode"], d["alpha"], d["beta"])
        k = int(d["vocab_size"])
        scales.check_vocab_size(k)
        return scales, k


def save_scales(scales: ScaleSet, vocab_size: int, path):
    Path(path).write_text(json.dumps(scales.to_json_dict(vocab_size)) + "\n")


def load_scales(path) -> tuple[ScaleSet, int]:
    return ScaleSet.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class StepScores:
    """One decoding position: AM and LM log-distributions over the vocabulary."""

    am_logp: np.ndarray
    lm_logp: np.ndarray

    def __post_init__(self):
        am = _readonly(np.asarray(self.am_logp, dtype=np.float64))
        lm = _readonly(np.asarray(self.lm_logp, dtype=np.float64))
        if am.ndim != 1 or lm.ndim != 1 or am.shape != lm.shape:
            raise UsageError("am_logp and lm_logp must be 1-D vectors of equal length")
        object.__setattr__(self, "am_logp", am)
        object.__setattr__(self, "lm_logp", lm)

    @property
    def k(self) -> int:
        return self.am_logp.shape[0]


def _logdist_violations(name: str, v: np.ndarray, tol: float) -> list[str]:
    issues = []
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        issues.append(f"{name}: non-finite")
        return issues
    if np.any(v > tol):
        issues.append(f"{name}: positive log-probability")
    if abs(log_sum_exp(v)) > tol:
        issues.append(f"{name}: not normalized")
    return issues


def validate_step_scores(step: StepScores, tol: float = NORMALIZATION_TOL) -> list[str]:
    """Check the log-distribution invariants; empty list means ok.

    -inf entries are legal (zero probability); NaN and +inf are not.
    """
    issues = _logdist_violations("am_logp", step.am_logp, tol)
    issues += _logdist_violations("lm_logp", step.lm_logp, tol)
    return issues


@dataclass(frozen=True)
class Hypothesis:
    """A scored token sequence with its per-token AM and LM log-probabilities."""

    tokens: TokenSeq
    am_logp: np.ndarray
    lm_logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        am = _readonly(np.asarray(self.am_logp, dtype=np.float64))
        lm = _readonly(np.asarray(self.lm_logp, dtype=np.float64))
        if am.shape != (len(self.tokens),) or lm.shape != (len(self.tokens),):
            raise UsageError("per-token score arrays must match the token count")
        object.__setattr__(self, "am_logp", am)
        object.__setattr__(self, "lm_logp", lm)

    def __len__(self) -> int:
        return len(self.tokens)


def validate_hypothesis(hyp: Hypothesis, tol: float = NORMALIZATION_TOL) -> list[str]:
    issues = []
    for name, v in (("am_logp", hyp.am_logp), ("lm_logp", hyp.lm_logp)):
        if not np.all(np.isfinite(v)):
            issues.append(f"{name}: non-finite")
        elif np.any(v > tol):
            issues.append(f"{name}: positive log-probability")
    return issues


@dataclass(frozen=True)
class NBestList:
    """Reference transcription plus the decoder's scored candidates."""

    utt_id: str
    reference: TokenSeq
    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(int(t) for t in self.reference))
        hyps = tuple(self.hypotheses)
        if not hyps:
            raise UsageError(f"n-best list {self.utt_id!r} has no hypotheses")
        seen = set()
        for h in hyps:
            if h.tokens in seen:
                raise UsageError(f"duplicate hypothesis {h.tokens} in {self.utt_id!r}")
            seen.add(h.tokens)
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self) -> int:
        return len(self.hypotheses)


@dataclass(frozen=True)
class GradientVector:
    """Partials of an objective w.r.t. the scale (and optionally toy-AM) parameters."""

    d_alpha: object
    d_beta: object
    d_toy_am: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        """Concatenated [d_alpha..., d_beta...] view (toy-AM part excluded)."""
        return np.concatenate([np.atleast_1d(np.asarray(self.d_alpha, dtype=np.float64)),
                               np.atleast_1d(np.asarray(self.d_beta, dtype=np.float64))])
