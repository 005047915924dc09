import numpy as np
import pytest

from scalefusion.analysis import build_scale_report, length_profile, pearson, scale_histogram
from scalefusion.core import ScaleSet, UsageError, Vocabulary


class TestPearson:
    def test_perfect_correlation(self):
        x = np.array([1.0, 2.0, 5.0, -3.0])
        assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        x = np.array([1.0, 2.0, 5.0, -3.0])
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_three_point_closed_form(self):
        # r = 3 / sqrt(2 * 14/3) = 0.9820 to 4 d.p.
        r = pearson([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        assert round(r, 4) == 0.9820
        assert r == pytest.approx(3.0 / np.sqrt(2.0 * 14.0 / 3.0), abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(UsageError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_short_or_mismatched_rejected(self):
        with pytest.raises(UsageError):
            pearson([1.0], [1.0])
        with pytest.raises(UsageError):
            pearson([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_invariant_under_positive_affine_transforms(self):
        rng = np.random.default_rng(33)
        for _ in range(30):
            x = rng.normal(0, 1, size=20)
            y = rng.normal(0, 1, size=20)
            base = pearson(x, y)
            a, b = float(rng.uniform(0.1, 5)), float(rng.normal(0, 3))
            c, d = float(rng.uniform(0.1, 5)), float(rng.normal(0, 3))
            assert pearson(a * x + b, c * y + d) == pytest.approx(base, abs=1e-12)

    def test_result_stays_in_unit_interval(self):
        rng = np.random.default_rng(34)
        for _ in range(50):
            x = rng.normal(0, 1, size=int(rng.integers(2, 30)))
            y = rng.normal(0, 1, size=x.size)
            assert -1.0 <= pearson(x, y) <= 1.0


class TestScaleHistogram:
    def test_constant_vector_lands_in_one_bin(self):
        counts, edges = scale_histogram([2.5] * 7, bins=3)
        assert counts.sum() == 7
        assert np.count_nonzero(counts) == 1

    def test_boundary_convention_01(self):
        counts, edges = scale_histogram([0.0, 1.0], bins=2)
        assert list(counts) == [1, 1]  # right-most bin is closed

    def test_counts_match_independent_recount(self):
        rng = np.random.default_rng(35)
        values = rng.normal(1.0, 0.1, size=10_000)
        counts, edges = scale_histogram(values, bins=50)
        assert counts.sum() == values.size
        recount = np.zeros(50, dtype=int)
        for v in values:
            for b in range(50):
                left, right = edges[b], edges[b + 1]
                if (left <= v < right) or (b == 49 and v == right):
                    recount[b] += 1
                    break
        assert np.array_equal(counts, recount)

    def test_bad_bins_rejected(self):
        with pytest.raises(UsageError):
            scale_histogram([1.0, 2.0], bins=0)


class TestLengthProfile:
    def vocab(self):
        return Vocabulary(("a", "ab", "xyz@@", "zz", "</s>"), eos_id=4)

    def test_grouping_arithmetic(self):
        v = Vocabulary(("a", "ab", "</s>"), eos_id=2)
        scales = ScaleSet("subword", np.array([1.0, 3.0, 5.0]), np.array([2.0, 4.0, 6.0]))
        profile = length_profile(scales, v)
        assert profile[1] == {"mean_alpha": 1.0, "mean_beta": 2.0, "count": 1}
        assert profile[2] == {"mean_alpha": 3.0, "mean_beta": 4.0, "count": 1}
        assert profile[4] == {"mean_alpha": 5.0, "mean_beta": 6.0, "count": 1}

    def test_markers_excluded_and_groups_merged(self):
        v = self.vocab()
        scales = ScaleSet("subword", np.arange(5.0), np.arange(5.0) + 10.0)
        profile = length_profile(scales, v)
        # "ab" and "zz" share length 2; "xyz@@" counts as 3
        assert profile[2] == {"mean_alpha": 2.0, "mean_beta": 12.0, "count": 2}
        assert profile[3]["count"] == 1

    def test_constant_scales_give_equal_means(self):
        v = self.vocab()
        scales = ScaleSet("subword", np.full(5, 1.5), np.full(5, 0.25))
        profile = length_profile(scales, v)
        for stats in profile.values():
            assert stats["mean_alpha"] == 1.5 and stats["mean_beta"] == 0.25

    def test_absent_lengths_do_not_appear(self):
        v = self.vocab()
        scales = ScaleSet("subword", np.ones(5), np.ones(5))
        assert set(length_profile(scales, v)) == {1, 2, 3, 4}

    def test_agnostic_mode_rejected(self):
        with pytest.raises(UsageError):
            length_profile(ScaleSet("agnostic", 1.0, 1.0), self.vocab())


class TestReport:
    def test_report_is_deterministic_and_complete(self):
        rng = np.random.default_rng(36)
        v = Vocabulary(tuple(f"u{i}" for i in range(19)) + ("</s>",), eos_id=19)
        scales = ScaleSet("subword", rng.normal(1.0, 0.2, 20), rng.normal(0.6, 0.2, 20))
        r1 = build_scale_report(scales, v, bins=10)
        r2 = build_scale_report(scales, v, bins=10)
        assert r1 == r2
        assert sum(r1["alpha_histogram"]["counts"]) == 20
        assert sum(r1["beta_histogram"]["counts"]) == 20
        assert -1.0 <= r1["pearson_alpha_beta"] <= 1.0
        assert sum(g["count"] for g in r1["length_profile"].values()) == 20
