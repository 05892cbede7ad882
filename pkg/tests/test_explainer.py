import math

import numpy as np
import pytest
from scipy.signal import convolve2d

from drgraduate import explainer as ex

S, RF, SIDE = 32, 94, 128


def dense_oracle(L, stride, rf, side):
    """Place impulses on a full grid and run a plain 2-D convolution."""
    grades = np.clip(np.floor(np.asarray(L) + 0.5), 0, 4)
    win = ex.gaussian_window(rf)
    out = {}
    for c in ex.MAP_GRADES:
        sparse = np.zeros((side, side))
        for i, j in zip(*np.nonzero(grades == c)):
            if stride * i < side and stride * j < side:
                sparse[stride * i, stride * j] = 1.0
        out[c] = convolve2d(sparse, win, mode="same")
    return out


class TestBuildMaps:
    def test_all_low_is_empty(self):
        em = ex.build_maps(np.full((4, 4), 0.49), S, RF, SIDE)
        assert all(not m.any() for m in em.maps.values())

    def test_single_impulse_placement(self):
        for i, j in [(0, 0), (1, 2), (3, 3), (2, 1)]:
            L = np.zeros((4, 4))
            L[i, j] = 2.0
            em = ex.build_maps(L, S, RF, SIDE)
            r, q = np.unravel_index(np.argmax(em.maps[2]), (SIDE, SIDE))
            assert abs(r - S * i) <= 1 and abs(q - S * j) <= 1
            assert em.maps[2][S * i, S * j] == 1.0
            assert not em.maps[1].any() and not em.maps[3].any()

    def test_radial_decay(self):
        L = np.zeros((4, 4))
        L[1, 1] = 2.0
        E = ex.build_maps(L, S, RF, SIDE).maps[2]
        row = E[S, S:S + 40]
        assert np.all(np.diff(row) < 0)
        assert E[S, S + 5] == pytest.approx(E[S + 5, S]) == pytest.approx(E[S - 5, S])

    def test_kernel_width(self):
        win = ex.gaussian_window(RF)
        assert win.shape == (95, 95) and win.max() == 1.0
        h = 47
        assert win[h, h + 10] == pytest.approx(math.exp(-0.5 * (10 / (RF / 6)) ** 2), rel=1e-14)
        assert ex.gaussian_window(95).shape == (95, 95)

    def test_linearity_against_dense_convolution(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            L = rng.uniform(-0.5, 5.5, (4, 4))
            em = ex.build_maps(L, S, RF, SIDE)
            oracle = dense_oracle(L, S, RF, SIDE)
            for c in ex.MAP_GRADES:
                assert np.max(np.abs(em.maps[c] - oracle[c])) < 1e-10

    def test_two_close_impulses_sum(self):
        L = np.zeros((8, 8))
        L[2, 2] = L[2, 3] = 1.0
        em = ex.build_maps(L, 8, 31, 64)
        one = np.zeros((8, 8))
        one[2, 2] = 1.0
        two = np.zeros((8, 8))
        two[2, 3] = 1.0
        a = ex.build_maps(one, 8, 31, 64).maps[1]
        b = ex.build_maps(two, 8, 31, 64).maps[1]
        assert np.max(np.abs(em.maps[1] - (a + b))) < 1e-12
        assert np.max(np.abs(em.maps[1] - dense_oracle(L, 8, 31, 64)[1])) < 1e-10

    def test_half_open_bins_and_top_bin(self):
        g = ex.cell_grades(np.array([[-3, 0.49, 0.5, 1.49], [1.5, 3.5, 4.49, 4.5], [9.0, 2.0, 2.5, 3.49]]))
        assert g.tolist() == [[0, 0, 1, 1], [2, 4, 4, 4], [4, 2, 3, 3]]

    def test_grade_exclusivity(self):
        rng = np.random.default_rng(1)
        L = rng.uniform(0, 5, (4, 4))
        pos = ex.impulse_positions(L, S)
        assert sum(len(v) for v in pos.values()) == int((L >= 0.5).sum())

    def test_nonnegative(self):
        L = np.random.default_rng(2).uniform(-2, 6, (4, 4))
        assert all((m >= 0).all() for m in ex.build_maps(L, S, RF, SIDE).maps.values())


class TestObjects:
    def test_empty(self):
        assert ex.extract_objects(np.zeros((20, 20))) == []

    def test_single_impulse(self):
        L = np.zeros((4, 4))
        L[2, 1] = 3.0
        E = ex.build_maps(L, S, RF, SIDE).maps[3]
        objs = ex.extract_objects(E, 0.3)
        assert len(objs) == 1 and objs[0].mask[2 * S, S]
        assert objs[0].peak == 1.0 and objs[0].peak_pixel == (2 * S, S)

    def test_eight_connectivity(self):
        E = np.zeros((5, 5))
        E[1, 1] = E[2, 2] = 0.9
        assert len(ex.extract_objects(E, 0.5)) == 1

    def test_threshold_sweep_pixel_counts_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            L = rng.uniform(0, 5, (4, 4))
            em = ex.build_maps(L, S, RF, SIDE)
            for c in ex.MAP_GRADES:
                sizes = [sum(o.size for o in ex.extract_objects(em.maps[c], t)) for t in ex.THRESHOLD_SWEEP]
                assert sizes == sorted(sizes, reverse=True)

    def test_component_number_can_grow_with_threshold(self):
        # two impulses 2s apart: tails sum to about 0.25 midway, so one blob at 0.1 and two at 0.3
        L = np.zeros((4, 4))
        L[1, 1] = L[1, 3] = 2.0
        E = ex.build_maps(L, S, RF, SIDE).maps[2]
        assert len(ex.extract_objects(E, 0.1)) == 1
        assert len(ex.extract_objects(E, 0.3)) == 2

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            ex.extract_objects(np.zeros((3, 3)), t)


def _image(objects_by_grade, masks, pred, true, max_pixel=None):
    side = next(iter(masks.values())).shape
    objs = {}
    for c, arrs in objects_by_grade.items():
        objs[c] = []
        for m in arrs:
            pix = np.argwhere(m)
            objs[c].append(ex.Component(pix, m, 1.0, tuple(pix[0])))
    full = {c: masks.get(c, np.zeros(side, dtype=bool)) for c in ex.MAP_GRADES}
    return ex.ExplainedImage(objs, full, pred, true, max_pixel)


def _box(r0, r1, c0, c1, side=20):
    m = np.zeros((side, side), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


class TestOverlap:
    def test_exact_objects(self):
        m2 = _box(2, 5, 2, 5)
        m1 = _box(10, 12, 10, 12)
        im = _image({2: [m2], 1: [m1]}, {1: m1, 2: m2}, 2, 2)
        rep = ex.overlap_metrics([im])
        assert all(v == 1.0 for v in rep.values().values())

    def test_disjoint(self):
        im = _image({2: [_box(0, 2, 0, 2)]}, {1: _box(10, 12, 10, 12), 2: _box(15, 18, 15, 18)}, 2, 2)
        rep = ex.overlap_metrics([im])
        assert all(v == 0.0 for v in rep.values().values())

    def test_definitions(self):
        m1 = _box(0, 3, 0, 3)
        m3 = _box(10, 14, 10, 14)
        # grade-3 object on the grade-1 lesion, one on the grade-3 lesion, one on nothing
        objs = {3: [_box(1, 2, 1, 2), _box(11, 12, 11, 12), _box(17, 19, 0, 2)]}
        im = _image(objs, {1: m1, 3: m3}, 3, 3)
        rep = ex.overlap_metrics([im])
        assert rep.O_obj_g == pytest.approx(1 / 3)
        assert rep.O_obj == pytest.approx(2 / 3)
        assert rep.O_any == pytest.approx(2 / 3)
        assert rep.O_class == 1.0
        assert rep.O_gt == 1.0   # both lesions touched by grade-3 objects

    def test_gt_needs_same_or_higher_grade(self):
        m3 = _box(10, 14, 10, 14)
        im = _image({2: [_box(11, 12, 11, 12)]}, {3: m3}, 2, 3)
        assert ex.overlap_metrics([im]).O_gt == 0.0

    def test_max_object_and_miss(self):
        m2 = _box(2, 5, 2, 5)
        hit, miss = _box(3, 4, 3, 4), _box(15, 17, 15, 17)
        im_a = _image({2: [hit, miss]}, {2: m2}, 2, 2, max_pixel=(16, 16))
        im_b = _image({}, {2: m2}, 2, 2)        # no objects: counts as a miss
        im_c = _image({2: [hit]}, {2: m2}, 1, 2)  # wrong grade: excluded
        rep = ex.overlap_metrics([im_a, im_b, im_c])
        assert rep.O_max == 0.0 and rep.O_class == 0.5
        assert rep.counts["correct_images"] == 2

    def test_containment_invariant(self):
        rng = np.random.default_rng(4)
        images = []
        for _ in range(20):
            masks = {c: rng.uniform(size=(20, 20)) > 0.93 for c in ex.MAP_GRADES}
            objs = {c: [rng.uniform(size=(20, 20)) > 0.97 for _ in range(2)] for c in ex.MAP_GRADES}
            objs = {c: [o for o in v if o.any()] for c, v in objs.items()}
            images.append(_image(objs, masks, int(rng.integers(0, 5)), int(rng.integers(0, 5))))
        rep = ex.overlap_metrics(images)
        assert rep.O_obj_g <= rep.O_obj <= rep.O_any


class TestFiles:
    def test_report_round_trip(self, tmp_path):
        rep = ex.OverlapReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, threshold=0.5)
        path = tmp_path / "overlap.csv"
        rep.to_csv(str(path), comment="config_digest=abc")
        back = ex.OverlapReport.from_csv(str(path))
        assert back.values() == rep.values() and back.threshold == 0.5

    def test_reference_table_parses(self, tmp_path):
        # published magnitudes at threshold 0.3, used only as a parsing fixture
        path = tmp_path / "reference.csv"
        path.write_text("threshold,O_obj_g,O_obj,O_max,O_class,O_gt,O_any\n0.3,0.506,0.677,0.712,0.784,0.526,0.729\n")
        rep = ex.OverlapReport.from_csv(str(path))
        assert rep.values() == {"O_obj_g": 0.506, "O_obj": 0.677, "O_max": 0.712, "O_class": 0.784,
                                "O_gt": 0.526, "O_any": 0.729}
        assert rep.O_obj_g <= rep.O_obj <= rep.O_any

    def test_malformed_report(self, tmp_path):
        from drgraduate.imageio import DataError
        path = tmp_path / "bad.csv"
        path.write_text("O_obj_g,O_obj,O_max,O_class,O_gt,O_any\n0.1,x,0.3,0.4,0.5,0.6\n")
        with pytest.raises(DataError, match=":2"):
            ex.OverlapReport.from_csv(str(path))

    def test_maps_round_trip(self, tmp_path):
        L = np.zeros((4, 4))
        L[1, 1] = L[1, 2] = 2.2
        em = ex.build_maps(L, S, RF, SIDE)
        ex.save_maps(em, str(tmp_path), "im0", 0.3, digest="d" * 64)
        back = ex.load_maps(str(tmp_path), "im0")
        scale = max(1.0, max(m.max() for m in em.maps.values()))
        for c in ex.MAP_GRADES:
            assert np.max(np.abs(back.maps[c] - em.maps[c])) <= scale / 65535
        assert back.stride == S and back.rf == RF and back.threshold == 0.3
        assert "config_digest=" + "d" * 64 in (tmp_path / "im0_maps.txt").read_text()
