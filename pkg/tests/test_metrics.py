import numpy as np
import pytest

from scalefusion.core import UsageError, Vocabulary
from scalefusion.metrics import accuracy, corpus_wer, edit_distance, edit_ops


def slow_levenshtein(a, b):
    """Independent recursive oracle for the DP implementation."""
    from functools import lru_cache

    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1,
                   d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


class TestEditDistance:
    def test_identity(self):
        assert edit_distance((1, 2, 3), (1, 2, 3)) == 0

    def test_empty_vs_three(self):
        assert edit_distance((), (5, 5, 5)) == 3

    def test_kitten_sitting(self):
        kitten = tuple("kitten")
        sitting = tuple("sitting")
        assert slow_levenshtein(kitten, sitting) == 3
        assert edit_distance(kitten, sitting) == 3

    def test_matches_recursive_oracle_on_random_pairs(self):
        rng = np.random.default_rng(17)
        for _ in range(60):
            a = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
            b = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
            assert edit_distance(a, b) == slow_levenshtein(a, b)

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(23)
        for _ in range(60):
            seqs = [tuple(rng.integers(0, 3, size=rng.integers(0, 7))) for _ in range(3)]
            a, b, c = seqs
            assert edit_distance(a, b) == edit_distance(b, a)
            assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)

    def test_ops_sum_to_distance(self):
        rng = np.random.default_rng(29)
        for _ in range(40):
            r = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
            h = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
            s, i, d = edit_ops(r, h)
            assert s + i + d == edit_distance(r, h)
            # insertions/deletions must account for the length difference
            assert i - d == len(h) - len(r)


class TestCorpusWer:
    def test_perfect_match(self):
        refs = [(1, 2), (3,)]
        assert corpus_wer(refs, refs).error_rate == 0.0

    def test_all_empty_hyps_is_all_deletions(self):
        refs = [(1, 2), (3, 4, 5)]
        rep = corpus_wer(refs, [(), ()])
        assert rep.error_rate == 1.0
        assert rep.deletions == 5 and rep.insertions == 0 and rep.substitutions == 0

    def test_hand_counted_fixture(self):
        # errors 1/4 and 2/6 -> (1+2)/(4+6) = 3/10
        refs = [(1, 2, 3, 4), (1, 2, 3, 4, 5, 6)]
        hyps = [(1, 2, 3, 9), (1, 9, 3, 4, 5, 9)]
        rep = corpus_wer(refs, hyps)
        assert rep.error_rate == pytest.approx(3 / 10)
        assert rep.errors == 3 and rep.ref_tokens == 10

    def test_single_utterance_equals_ratio(self):
        ref, hyp = (1, 2, 3), (1, 3)
        rep = corpus_wer([ref], [hyp])
        assert rep.error_rate == pytest.approx(edit_distance(ref, hyp) / len(ref))

    def test_length_mismatch_rejected(self):
        with pytest.raises(UsageError):
            corpus_wer([(1,)], [(1,), (2,)])

    def test_per_utterance_breakdown(self):
        rep = corpus_wer([(1, 2)], [(1, 3)], ids=["u0"])
        assert rep.per_utterance[0]["id"] == "u0"
        assert rep.per_utterance[0]["errors"] == 1

    def test_word_level_with_detokenizer(self):
        v = Vocabulary(("he@@", "llo", "there", "</s>"), eos_id=3)
        refs = [(0, 1, 2)]
        hyps = [(0, 1)]  # "hello" vs "hello there": one word deletion
        rep = corpus_wer(refs, hyps, detokenizer=v.detokenize)
        assert rep.errors == 1 and rep.ref_tokens == 2


class TestAccuracy:
    def test_perfect(self):
        assert accuracy((1, 2), (1, 2)) == 0.0

    def test_empty_vs_five(self):
        assert accuracy((), (1, 2, 3, 4, 5)) == -5.0

    def test_kitten_fixture(self):
        assert accuracy(tuple("kitten"), tuple("sitting")) == -3.0

    def test_word_mode_needs_detokenizer(self):
        with pytest.raises(UsageError):
            accuracy((1,), (1,), mode="word")

    def test_word_mode(self):
        v = Vocabulary(("a@@", "b", "c", "</s>"), eos_id=3)
        # "ab" vs "ab c": one word apart even though token distance is 1 too
        assert accuracy((0, 1), (0, 1, 2), mode="word", detokenizer=v.detokenize) == -1.0

    def test_nonpositive_with_equality_only_on_match(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            y = tuple(rng.integers(0, 3, size=rng.integers(0, 6)))
            y_ref = tuple(rng.integers(0, 3, size=rng.integers(0, 6)))
            a = accuracy(y, y_ref)
            assert a <= 0.0
            assert (a == 0.0) == (y == y_ref)
