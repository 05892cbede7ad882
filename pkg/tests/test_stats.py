import math

import numpy as np
import pytest

from drgraduate import stats
from oracles import mc_band, permutation_kw_pvalue, small_kw_fixtures


def rank_h(groups):
    """Textbook H with average ranks computed by explicit counting and the tie correction."""
    pooled = [v for g in groups for v in g]
    n = len(pooled)
    ranks = {}
    for v in set(pooled):
        below = sum(1 for x in pooled if x < v)
        equal = sum(1 for x in pooled if x == v)
        ranks[v] = below + (equal + 1) / 2
    h = 12 / (n * (n + 1)) * sum(sum(ranks[v] for v in g) ** 2 / len(g) for g in groups) - 3 * (n + 1)
    ties = sum(c ** 3 - c for c in (pooled.count(v) for v in set(pooled)))
    return h / (1 - ties / (n ** 3 - n))


class TestKruskalWallis:
    def test_separated_triples(self):
        r = stats.kruskal_wallis([[1, 2, 3], [101, 102, 103]])
        assert r.H == pytest.approx(27 / 7, abs=1e-12)   # 3.857142...
        assert r.dof == 1
        assert r.p_value == pytest.approx(math.erfc(math.sqrt(27 / 7 / 2)), rel=1e-12)

    def test_identical_groups(self):
        r = stats.kruskal_wallis([[1, 2, 3, 4], [1, 2, 3, 4]])
        assert r.H == pytest.approx(0.0, abs=1e-12) and r.p_value == pytest.approx(1.0)

    def test_all_equal(self):
        r = stats.kruskal_wallis([[5, 5], [5, 5, 5]])
        assert r.H == 0.0 and r.p_value == 1.0

    def test_rank_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            groups = [list(rng.integers(0, 6, rng.integers(2, 8))) for _ in range(3)]
            if len(set(v for g in groups for v in g)) < 2:
                continue
            assert stats.kruskal_wallis(groups).H == pytest.approx(rank_h(groups), rel=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        groups = [rng.normal(size=12), rng.normal(0.5, size=9), rng.normal(1, size=7)]
        base = stats.kruskal_wallis(groups).H
        assert stats.kruskal_wallis([np.exp(g) for g in groups]).H == pytest.approx(base, rel=1e-12)
        assert stats.kruskal_wallis([g ** 3 for g in groups]).H == pytest.approx(base, rel=1e-12)

    def test_matches_scipy(self):
        from scipy.stats import kruskal
        rng = np.random.default_rng(2)
        groups = [rng.integers(0, 4, 15), rng.integers(1, 5, 11), rng.integers(0, 3, 8)]
        H, p = kruskal(*groups)
        r = stats.kruskal_wallis(groups)
        assert r.H == pytest.approx(H, rel=1e-12) and r.p_value == pytest.approx(p, rel=1e-10)

    def test_errors(self):
        with pytest.raises(ValueError):
            stats.kruskal_wallis([[1, 2, 3]])
        with pytest.raises(ValueError):
            stats.kruskal_wallis([[1, 2], []])
        with pytest.raises(ValueError):
            stats.kruskal_wallis([[1, 2], [3]])

    def test_permutation_oracle_three_groups_with_ties(self):
        # large samples, so the chi-square tail must agree with the permutation p-value
        rng = np.random.default_rng(3)
        groups = [rng.integers(0, 8, 40), rng.integers(1, 9, 35), rng.integers(0, 7, 30)]
        p_perm, h = permutation_kw_pvalue(groups, 100_000, np.random.default_rng(4))
        r = stats.kruskal_wallis(groups)
        assert r.H == pytest.approx(h, rel=1e-12)
        # the chi-square tail is itself an approximation, hence the extra 0.01
        assert abs(r.p_value - p_perm) < mc_band(p_perm, 100_000) + 0.01


class TestExactKruskalWallis:
    @pytest.mark.parametrize("idx", range(20))
    def test_small_fixture_matches_permutations(self, idx):
        groups = small_kw_fixtures()[idx]
        r = stats.kruskal_wallis(groups, method="exact")
        p_perm, h = permutation_kw_pvalue(groups, 100_000, np.random.default_rng(idx))
        assert r.H == pytest.approx(h, rel=1e-12)
        assert abs(r.p_value - p_perm) <= mc_band(r.p_value, 100_000) + 1e-12

    def test_separated_triples_exact(self):
        # only 2 of the 20 splits are as extreme as the observed one
        assert stats.kruskal_wallis([[1, 2, 3], [101, 102, 103]], method="exact").p_value == pytest.approx(0.1)

    def test_chi_square_is_poor_on_tiny_samples(self):
        g = [[1, 2, 3], [101, 102, 103]]
        assert abs(stats.kruskal_wallis(g).p_value - stats.kruskal_wallis(g, method="exact").p_value) > 0.04

    def test_enumeration_limit(self):
        with pytest.raises(ValueError, match="assignments"):
            stats.kruskal_wallis([np.arange(30), np.arange(30) + 0.5, np.arange(30) + 0.25], method="exact")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            stats.kruskal_wallis([[1, 2, 3], [4, 5, 6]], method="bootstrap")


class TestCohensD:
    def test_hand_arithmetic(self):
        e = stats.cohens_d([0, 2], [2, 4])
        # means 1 and 3, both sample variances 2, pooled S = sqrt(2)
        assert e.d == pytest.approx(-2 / math.sqrt(2), abs=1e-12)
        assert e.pooled_S == pytest.approx(math.sqrt(2), abs=1e-12)
        assert e.label == "very large"

    def test_unequal_sizes(self):
        e = stats.cohens_d([1, 2, 3, 4], [2, 4])
        # means 2.5 and 3; variances 5/3 and 2; S^2 = (3*5/3 + 1*2)/4 = 7/4
        assert e.d == pytest.approx(-0.5 / math.sqrt(7 / 4), abs=1e-12)

    def test_identical(self):
        e = stats.cohens_d([1, 2, 3], [1, 2, 3])
        assert e.d == 0.0 and e.label == "very small"

    def test_zero_spread(self):
        assert stats.cohens_d([1, 1], [1, 1]).d == 0.0
        assert stats.cohens_d([2, 2], [1, 1]).d == math.inf
        assert stats.cohens_d([1, 1], [2, 2]).d == -math.inf

    def test_normal_fixture(self):
        rng = np.random.default_rng(0)
        e = stats.cohens_d(rng.normal(1, 1, 10000), rng.normal(0, 1, 10000))
        assert e.d == pytest.approx(1.0, abs=0.05) and e.label == "large"

    def test_antisymmetry_and_affine(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=30), rng.normal(0.3, 2, size=20)
        d = stats.cohens_d(a, b).d
        assert stats.cohens_d(b, a).d == -d
        assert stats.cohens_d(a + 7.5, b + 7.5).d == pytest.approx(d, rel=1e-12)
        assert stats.cohens_d(a * 3, b * 3).d == pytest.approx(d, rel=1e-12)

    @pytest.mark.parametrize("d,label", [(0.0, "very small"), (0.1, "very small"), (0.19, "very small"),
                                         (0.2, "small"), (0.5, "medium"), (0.79, "medium"), (0.8, "large"),
                                         (1.3, "very large"), (2.0, "huge"), (-2.5, "huge"), (-0.6, "medium")])
    def test_labels(self, d, label):
        assert stats.effect_label(d) == label

    def test_needs_two_per_group(self):
        with pytest.raises(ValueError):
            stats.cohens_d([1], [1, 2])


def test_report_row():
    row = stats.compare_groups("blur", [3, 4, 5, 6], "clean", [1, 2, 3, 4])
    assert tuple(row) == stats.REPORT_FIELDS
    assert row["n_a"] == 4 and row["d"] > 0
