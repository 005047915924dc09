"""Edit distance, corpus WER, and the accuracy function used by minWER training."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import UsageError


def edit_distance(a, b) -> int:
    """Levenshtein distance: minimum substitutions + insertions + deletions."""
    a, b = tuple(a), tuple(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_ops(ref, hyp) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one minimal ref->hyp alignment.

    When several minimal alignments exist the backtrace prefers match/substitute,
    then deletion, then insertion, so the split is deterministic.
    """
    ref, hyp = tuple(ref), tuple(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j] + 1,          # delete ref[i-1]
                          d[i][j - 1] + 1,          # insert hyp[j-1]
                          d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, ins, dels


@dataclass
class WerReport:
    error_rate: float
    substitutions: int
    insertions: int
    deletions: int
    errors: int
    ref_tokens: int
    num_utterances: int
    per_utterance: list = field(default_factory=list)

    def to_json_dict(self, include_per_utterance: bool = True) -> dict:
        d = {
            "error_rate": self.error_rate,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "errors": self.errors,
            "ref_tokens": self.ref_tokens,
            "num_utterances": self.num_utterances,
        }
        if include_per_utterance:
            d["per_utterance"] = self.per_utterance
        return d


def corpus_wer(refs, hyps, detokenizer=None, ids=None) -> WerReport:
    """Aggregate error rate: total edit distance over total reference length.

    With a detokenizer, both sides are merged into words first so the rate is
    a word error rate; otherwise it is computed over the token ids as given.
    """
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise UsageError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if ids is None:
        ids = [str(i) for i in range(len(refs))]
    total_subs = total_ins = total_dels = total_ref = 0
    per_utt = []
    for utt_id, r, h in zip(ids, refs, hyps):
        if detokenizer is not None:
            r, h = detokenizer(r), detokenizer(h)
        s, i, d = edit_ops(r, h)
        total_subs += s
        total_ins += i
        total_dels += d
        total_ref += len(r)
        per_utt.append({
            "id": utt_id,
            "errors": s + i + d,
            "ref_len": len(r),
            "substitutions": s,
            "insertions": i,
            "deletions": d,
        })
    errors = total_subs + total_ins + total_dels
    if total_ref > 0:
        rate = errors / total_ref
    else:
        rate = 0.0 if errors == 0 else float("inf")
    return WerReport(
        error_rate=rate,
        substitutions=total_subs,
        insertions=total_ins,
        deletions=total_dels,
        errors=errors,
        ref_tokens=total_ref,
        num_utterances=len(refs),
        per_utterance=per_utt,
    )


def accuracy(y, y_ref, mode: str = "neg-edit", detokenizer=None) -> float:
    """Sequence accuracy, <= 0 with equality only for a perfect match.

    mode "neg-edit" scores -edit_distance over token ids; mode "word" scores
    -edit_distance over detokenized words and requires a detokenizer.
    """
    if mode == "neg-edit":
        return -float(edit_distance(y, y_ref))
    if mode == "word":
        if detokenizer is None:
            raise UsageError("word-level accuracy needs a detokenizer")
        return -float(edit_distance(detokenizer(y), detokenizer(y_ref)))
    raise UsageError(f"unknown accuracy mode {mode!r}")
