import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admkd.analysis import (
    AnalysisError,
    CurvePoint,
    RegionMask,
    cam,
    emit_curves,
    miou,
    read_curves,
    read_pgm,
    similarity_regions,
    threshold_mask,
    write_pgm,
)
from admkd.tensor import ShapeError


def mask(cells, shape=(2, 2)):
    v = np.zeros(shape, bool)
    for c in cells:
        v[c] = True
    return RegionMask(v, "cam", 0.5)


class TestCam:
    def test_zero_weights(self, rng):
        assert not cam(rng.normal(size=(3, 4, 4)), np.zeros(3)).any()

    def test_selector(self, rng):
        f = rng.normal(size=(3, 4, 4))
        np.testing.assert_array_equal(cam(f, [0.0, 1.0, 0.0]), f[1])

    def test_small_instance_oracle(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.5], [0.0, 2.0]]])
        w = [2.0, -3.0]
        want = [[2 * 1 + 3 * 1, 2 * 2 - 3 * 0.5], [2 * 3 - 0, 2 * 4 - 3 * 2]]
        np.testing.assert_allclose(cam(f, w), want)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            cam(np.zeros((3, 2, 2)), np.zeros(2))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_linear_in_row(self, seed):
        r = np.random.default_rng(seed)
        f, w1, w2 = r.normal(size=(4, 3, 3)), r.normal(size=4), r.normal(size=4)
        np.testing.assert_allclose(cam(f, w1 + w2), cam(f, w1) + cam(f, w2), atol=1e-6)


class TestThreshold:
    def test_constant_map(self):
        assert threshold_mask(np.full((3, 3), 2.0), t=0.7).values.all()

    def test_frac_of_max(self):
        m = threshold_mask(np.array([[0.0, 10.0]]), t=0.5)
        assert m.values.tolist() == [[False, True]] and m.threshold == 5.0

    def test_mean_split(self):
        assert threshold_mask(np.array([[1.0, 3.0]]), "mean-split").values.tolist() == [[False, True]]

    def test_non_finite(self):
        with pytest.raises(AnalysisError):
            threshold_mask(np.array([[np.nan]]))

    def test_unknown_rule(self):
        with pytest.raises(AnalysisError):
            threshold_mask(np.zeros((1, 1)), "otsu")


class TestMiou:
    def test_identity(self):
        assert miou(mask([(0, 0), (1, 1)]), mask([(0, 0), (1, 1)])) == 1.0

    def test_disjoint(self):
        assert miou(mask([(0, 0)]), mask([(1, 1)])) == 0.0

    def test_one_third(self):
        assert miou(mask([(0, 0), (0, 1)]), mask([(0, 1), (1, 0)])) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert miou(mask([]), mask([])) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            miou(mask([], (2, 2)), mask([], (3, 3)))

    @settings(max_examples=100, deadline=None)
    @given(a=arrays(bool, (3, 3)), b=arrays(bool, (3, 3)))
    def test_bounded_and_symmetric(self, a, b):
        ma, mb = RegionMask(a, "cam", 0), RegionMask(b, "reference", 0)
        v = miou(ma, mb)
        assert 0.0 <= v <= 1.0 and v == miou(mb, ma)
        if a.any():
            assert miou(ma, ma) == 1.0


class TestSimilarityRegions:
    def test_constant(self):
        sim, dis = similarity_regions(np.full((2, 2), 0.3))
        assert sim.values.all() and not dis.values.any()

    def test_two_point(self):
        sim, dis = similarity_regions(np.array([[0.9, -0.9]]))
        assert sim.values.tolist() == [[True, False]] and dis.values.tolist() == [[False, True]]

    @settings(max_examples=100, deadline=None)
    @given(s=arrays(np.float64, (4, 4), elements=st.floats(-1, 1)))
    def test_partition(self, s):
        sim, dis = similarity_regions(s)
        assert (sim.values | dis.values).all() and not (sim.values & dis.values).any()


class TestCurves:
    def test_empty_is_header_only(self, tmp_path):
        emit_curves([], tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text() == "epoch,metric,value\n"

    def test_roundtrip(self, tmp_path):
        pts = [CurvePoint(0, "a", 0.1), CurvePoint(1, "a", 1 / 3), CurvePoint(0, "b", -2.5e-9)]
        emit_curves(pts, tmp_path / "c.csv")
        assert read_curves(tmp_path / "c.csv") == pts

    def test_grouped_and_sorted(self, tmp_path):
        pts = [CurvePoint(2, "b", 1.0), CurvePoint(1, "a", 2.0), CurvePoint(0, "b", 3.0), CurvePoint(0, "a", 4.0)]
        emit_curves(pts, tmp_path / "c.csv")
        got = [(p.metric, p.epoch) for p in read_curves(tmp_path / "c.csv")]
        assert got == [("a", 0), ("a", 1), ("b", 0), ("b", 2)]

    def test_reads_training_csv(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("epoch,model,ce,top1-test\n0,t,1.5,nan\n1,t,1.25,0.5\n")
        pts = read_curves(p)
        assert CurvePoint(1, "top1-test/t", 0.5) in pts and len(pts) == 3

    def test_point_invariants(self):
        with pytest.raises(AnalysisError):
            CurvePoint(-1, "a", 0.0)
        with pytest.raises(AnalysisError):
            CurvePoint(0, "a", float("inf"))

    def test_unwritable_path(self, tmp_path):
        (tmp_path / "f").write_text("")
        with pytest.raises(AnalysisError):
            emit_curves([], tmp_path / "f" / "c.csv")


class TestPgm:
    def test_roundtrip(self, tmp_path):
        m = mask([(0, 1)], (2, 3))
        write_pgm(m, tmp_path / "m.pgm")
        assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")
        np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), np.where(m.values, 255, 0))
