import numpy as np
import pytest

from drgraduate import balancer as bal


def formula(t, w0, wf, r):
    """Scalar per-grade evaluation with plain floats."""
    w0 = [v / sum(w0) for v in w0]
    wf = [v / sum(wf) for v in wf]
    k = r ** (t - 1)
    w = [k * a + (1 - k) * b for a, b in zip(w0, wf)]
    return [v / sum(w) for v in w]


class TestSchedule:
    def test_first_epoch_is_w0(self):
        s = bal.BalancingSchedule(w0=(5, 1, 1, 2, 1))
        assert np.array_equal(s.ratios_at(1), np.array([0.5, 0.1, 0.1, 0.2, 0.1]))

    def test_normalizes_on_construction(self):
        s = bal.BalancingSchedule()
        assert sum(s.wf) == pytest.approx(1.0) and s.wf[0] == pytest.approx(0.5 / 10.5)

    def test_limit(self):
        s = bal.BalancingSchedule()
        assert np.max(np.abs(s.ratios_at(10_000) - np.array(s.wf))) < 1e-4

    def test_hand_formula_at_300(self):
        s = bal.BalancingSchedule()
        np.testing.assert_allclose(s.ratios_at(300), formula(300, [1] * 5, [0.5, 2, 2, 3, 3], 0.99), atol=1e-12)

    def test_sums_to_one(self):
        s = bal.BalancingSchedule(w0=(0.73, 0.07, 0.15, 0.025, 0.025))
        for t in (1, 2, 17, 240, 5000):
            assert s.ratios_at(t).sum() == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("kw", [dict(r=1.0), dict(r=0.0), dict(w0=(1, 1, 1)), dict(wf=(-1, 1, 1, 1, 1))])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            bal.BalancingSchedule(**kw)

    def test_epoch_zero(self):
        with pytest.raises(ValueError):
            bal.ratios_at(0, bal.BalancingSchedule())


class TestCounts:
    def test_uniform(self):
        assert bal.apportion(30, [0.2] * 5).tolist() == [6] * 5

    def test_largest_remainder_tie_to_lower_grade(self):
        assert bal.apportion(30, [0.5, 0.125, 0.125, 0.125, 0.125]).tolist() == [15, 4, 4, 4, 3]

    def test_stochastic_rounding(self):
        rng = np.random.default_rng(0)
        w = np.array([0.5, 0.125, 0.125, 0.125, 0.125])
        draws = np.array([bal.stochastic_counts(30, w, rng) for _ in range(4000)])
        assert np.all(draws.sum(axis=1) == 30)
        assert np.all((draws == np.floor(30 * w)) | (draws == np.ceil(30 * w)))
        np.testing.assert_allclose(draws.mean(axis=0), 30 * w, atol=0.05)

    def test_stochastic_exact_when_integral(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert bal.stochastic_counts(30, [0.2] * 5, rng).tolist() == [6] * 5


class TestSampler:
    grades = np.array([0] * 50 + [1] * 3 + [2] * 10 + [3] * 2 + [4] * 1)

    def test_batch_composition_and_replacement(self):
        s = bal.BatchSampler(self.grades, batch_size=30, rounding="largest_remainder")
        batch = s.batch(1, 0)
        picked = self.grades[[i for i, _ in batch]]
        assert np.bincount(picked, minlength=5).tolist() == [6] * 5
        # grade 4 has a single image, so it is drawn repeatedly
        assert len({i for i, _ in batch if self.grades[i] == 4}) == 1

    def test_deterministic(self):
        a = bal.BatchSampler(self.grades, seed=3)
        b = bal.BatchSampler(self.grades, seed=3)
        assert [a.batch(t, k) for t in (1, 5) for k in range(3)] == [b.batch(t, k) for t in (1, 5) for k in range(3)]
        assert a.batch(2, 0) != bal.BatchSampler(self.grades, seed=4).batch(2, 0)

    def test_empty_class_named(self):
        with pytest.raises(bal.EmptyClassError, match="grade 3"):
            bal.BatchSampler([0, 1, 2, 4])

    def test_expected_counts_within_multinomial_bounds(self):
        s = bal.BatchSampler(self.grades, bal.BalancingSchedule(), 30, seed=11)
        t = 40
        w = s.schedule.ratios_at(t)
        counts = np.zeros(5)
        for k in range(1000):
            counts += np.bincount(self.grades[[i for i, _ in s.batch(t, k)]], minlength=5)
        sd = np.sqrt(1000 * 30 * w * (1 - w))
        assert np.all(np.abs(counts - 1000 * 30 * w) < 3 * sd)

    def test_sample_batch_ids(self):
        manifest = [(f"im{i}", f"p{i}", int(g)) for i, g in enumerate(self.grades)]
        out = bal.sample_batch(manifest, 1, 10, seed=0)
        assert len(out) == 10 and all(ident.startswith("im") for ident, _ in out)


class TestAugmentation:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert np.array_equal(bal.apply_augmentation(img, bal.Augmentation()), img)

    def test_flips(self):
        img = np.arange(16 * 16 * 3, dtype=float).reshape(16, 16, 3) / 1000
        out = bal.apply_augmentation(img, bal.Augmentation(hflip=True, vflip=True))
        assert np.array_equal(out, img[::-1, ::-1])

    def test_shape_and_range_preserved(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        pol = bal.AugmentationPolicy()
        for _ in range(20):
            out = bal.apply_augmentation(img, pol.draw(rng))
            assert out.shape == img.shape and out.dtype == img.dtype
            assert out.min() >= 0 and out.max() <= 1

    def test_rotation_by_90_matches_rot90(self):
        img = np.random.default_rng(2).uniform(size=(15, 15, 3))
        out = bal.apply_augmentation(img, bal.Augmentation(angle=90.0))
        np.testing.assert_allclose(out, np.rot90(img, 1, axes=(0, 1)), atol=1e-9)

    def test_policy_ranges(self):
        rng = np.random.default_rng(3)
        pol = bal.AugmentationPolicy()
        augs = [pol.draw(rng) for _ in range(500)]
        assert max(abs(a.angle) for a in augs) <= 25
        assert max(abs(a.brightness) for a in augs) <= 0.15
        assert all(0.85 <= a.contrast <= 1.15 for a in augs)
        assert {a.hflip for a in augs} == {True, False}

    def test_seeded(self):
        pol = bal.AugmentationPolicy()
        assert pol.draw(np.random.default_rng(9)) == pol.draw(np.random.default_rng(9))
