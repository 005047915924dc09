"""Post-training analyses of subword-dependent scales: distributions, the
AM-LM scale correlation, and the per-character-length profile."""

from __future__ import annotations

import numpy as np

from .core import ScaleSet, UsageError, Vocabulary


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise UsageError("pearson needs two equal-length vectors with at least 2 entries")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise UsageError("pearson is undefined for a zero-variance input")
    r = float(np.dot(dx, dy) / np.sqrt(vx * vy))
    return max(-1.0, min(1.0, r))


def scale_histogram(values, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram spanning [min, max], right-most bin closed.

    Returns (counts, bin_edges); counts always sum to len(values).
    """
    if bins < 1:
        raise UsageError(f"bins must be >= 1, got {bins}")
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    return counts, edges


def length_profile(scales: ScaleSet, vocab: Vocabulary) -> dict[int, dict]:
    """Mean alpha and beta grouped by unit character length (markers excluded).

    Only lengths that actually occur appear in the result.
    """
    if scales.mode != "subword":
        raise UsageError("length_profile needs subword-dependent scales")
    scales.check_vocab_size(vocab.k)
    groups: dict[int, list[int]] = {}
    for token_id in range(vocab.k):
        groups.setdefault(vocab.content_length(token_id), []).append(token_id)
    profile = {}
    for length in sorted(groups):
        ids = groups[length]
        profile[length] = {
            "mean_alpha": float(np.mean(scales.alpha[ids])),
            "mean_beta": float(np.mean(scales.beta[ids])),
            "count": len(ids),
        }
    return profile


def build_scale_report(scales: ScaleSet, vocab: Vocabulary, bins: int = 50) -> dict:
    """Full analysis bundle: histograms, moments, correlation, length profile."""
    if scales.mode != "subword":
        raise UsageError("scale analysis needs subword-dependent scales")
    scales.check_vocab_size(vocab.k)
    alpha_counts, alpha_edges = scale_histogram(scales.alpha, bins)
    beta_counts, beta_edges = scale_histogram(scales.beta, bins)
    return {
        "vocab_size": vocab.k,
        "alpha_mean": float(np.mean(scales.alpha)),
        "alpha_std": float(np.std(scales.alpha)),
        "beta_mean": float(np.mean(scales.beta)),
        "beta_std": float(np.std(scales.beta)),
        "pearson_alpha_beta": pearson(scales.alpha, scales.beta),
        "alpha_histogram": {"bin_edges": [float(e) for e in alpha_edges],
                            "counts": [int(c) for c in alpha_counts]},
        "beta_histogram": {"bin_edges": [float(e) for e in beta_edges],
                           "counts": [int(c) for c in beta_counts]},
        "length_profile": {str(length): stats
                           for length, stats in length_profile(scales, vocab).items()},
    }
