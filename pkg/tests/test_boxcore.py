import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uridet import boxcore
from uridet.boxcore import Detection


def brute_force_iou(a, b):
    """Oracle: IoU via direct area arithmetic, no shared code with boxcore."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(dets, threshold):
    """Oracle: literal greedy NMS over Detection lists, O(n^2)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        suppressed = False
        for j in kept:
            if dets[j].class_id == dets[i].class_id:
                if brute_force_iou(dets[j].box, dets[i].box) >= threshold:
                    suppressed = True
                    break
        if not suppressed:
            kept.append(i)
    return kept


def random_box(rng, lo=0.0, hi=100.0, min_side=0.5):
    x0 = rng.uniform(lo, hi - min_side)
    y0 = rng.uniform(lo, hi - min_side)
    w = rng.uniform(min_side, hi - x0)
    h = rng.uniform(min_side, hi - y0)
    return np.array([x0, y0, x0 + w, y0 + h])


class TestIou:
    def test_identity(self):
        b = np.array([0.0, 0.0, 10.0, 10.0])
        assert boxcore.iou(b, b) == 1.0

    def test_disjoint(self):
        assert boxcore.iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0

    def test_known_third(self):
        # inter = 5*10 = 50, union = 100 + 100 - 50 = 150
        assert boxcore.iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert boxcore.iou(a, b) == pytest.approx(brute_force_iou(a, b), abs=1e-12)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = boxcore.iou(a, b)
            assert v == boxcore.iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(9)
        A = np.stack([random_box(rng) for _ in range(13)])
        B = np.stack([random_box(rng) for _ in range(7)])
        M = boxcore.iou_matrix(A, B)
        for i in range(13):
            for j in range(7):
                assert M[i, j] == pytest.approx(boxcore.iou(A[i], B[j]), abs=1e-12)


class TestEncodeDecode:
    def test_identity_delta(self):
        b = np.array([0.0, 0.0, 10.0, 10.0])
        np.testing.assert_allclose(boxcore.encode(b, b), np.zeros(4))

    def test_hand_evaluated_shift(self):
        d = boxcore.encode([5, 5, 15, 15], [0, 0, 10, 10])
        np.testing.assert_allclose(d, [0.5, 0.5, 0.0, 0.0])

    def test_hand_evaluated_scale(self):
        d = boxcore.encode([0, 0, 20, 10], [0, 0, 10, 10])
        np.testing.assert_allclose(d, [0.5, 0.0, np.log(2.0), 0.0])

    def test_decode_identity(self):
        np.testing.assert_allclose(
            boxcore.decode(np.zeros(4), [0, 0, 10, 10], 100, 100), [0, 0, 10, 10]
        )

    def test_round_trip_of_shift_example(self):
        d = boxcore.encode([5, 5, 15, 15], [0, 0, 10, 10])
        np.testing.assert_allclose(boxcore.decode(d, [0, 0, 10, 10], 100, 100), [5, 5, 15, 15], atol=1e-5)

    def test_decode_clips_at_boundary(self):
        out = boxcore.decode([2.0, 0.0, 0.0, 0.0], [0, 0, 10, 10], 15, 15)
        assert out[2] == 15.0
        assert out[0] >= 0.0

    def test_encode_rejects_degenerate_gt(self):
        with pytest.raises(ValueError):
            boxcore.encode([0, 0, 0, 10], [0, 0, 10, 10])

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_round_trip_property(self, data):
        # side ranges keep |log size ratio| under the decode clamp of 4
        f = st.floats(5.0, 95.0)
        side = st.floats(1.0, 40.0)
        x0 = data.draw(f)
        y0 = data.draw(f)
        w = data.draw(side)
        h = data.draw(side)
        gt = np.array([x0, y0, min(x0 + w, 140.0), min(y0 + h, 140.0)])
        ax0 = data.draw(f)
        ay0 = data.draw(f)
        aw = data.draw(side)
        ah = data.draw(side)
        anchor = np.array([ax0, ay0, ax0 + aw, ay0 + ah])
        got = boxcore.decode(boxcore.encode(gt, anchor), anchor, 150, 150)
        np.testing.assert_allclose(got, gt, atol=1e-5)


class TestNms:
    def test_duplicate_suppression(self):
        b = [0, 0, 10, 10]
        dets = [Detection(b, 1, 0.9), Detection(b, 1, 0.8)]
        out = boxcore.nms(dets, 0.5)
        assert len(out) == 1 and out[0].score == 0.9

    def test_disjoint_all_kept(self):
        dets = [
            Detection([0, 0, 5, 5], 1, 0.3),
            Detection([10, 10, 15, 15], 1, 0.9),
            Detection([20, 20, 25, 25], 1, 0.5),
        ]
        out = boxcore.nms(dets, 0.5)
        assert len(out) == 3
        assert [d.score for d in out] == [0.9, 0.5, 0.3]

    def test_different_classes_not_suppressed(self):
        b = [0, 0, 10, 10]
        out = boxcore.nms([Detection(b, 1, 0.9), Detection(b, 2, 0.8)], 0.5)
        assert len(out) == 2

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            n = int(rng.integers(1, 51))
            dets = [
                Detection(
                    random_box(rng, hi=40.0, min_side=2.0),
                    int(rng.integers(1, 4)),
                    float(np.round(rng.random(), 3)),
                )
                for _ in range(n)
            ]
            thr = float(rng.uniform(0.2, 0.8))
            got = boxcore.nms(dets, thr)
            want = [dets[i] for i in brute_force_nms(dets, thr)]
            assert got == want, f"trial {trial}"

    def test_output_subset_and_below_threshold(self):
        rng = np.random.default_rng(12)
        dets = [
            Detection(random_box(rng, hi=30.0, min_side=2.0), 1, float(rng.random()))
            for _ in range(40)
        ]
        out = boxcore.nms(dets, 0.4)
        assert all(d in dets for d in out)
        for i, a in enumerate(out):
            for b in out[i + 1 :]:
                assert boxcore.iou(a.box, b.box) < 0.4

    def test_empty_input(self):
        assert boxcore.nms([], 0.5) == []

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            boxcore.nms_indices(np.zeros((1, 4)), np.ones(1), 1.0)


class TestFlipBox:
    def test_hand_example_horizontal(self):
        np.testing.assert_allclose(
            boxcore.flip_box([10, 20, 30, 40], 100, 100, "horizontal"), [70, 20, 90, 40]
        )

    def test_centered_box_fixed_point(self):
        b = [40, 40, 60, 60]
        np.testing.assert_allclose(boxcore.flip_box(b, 100, 100, "horizontal"), b)
        np.testing.assert_allclose(boxcore.flip_box(b, 100, 100, "vertical"), b)

    @settings(max_examples=100, deadline=None)
    @given(
        x0=st.floats(0, 80),
        y0=st.floats(0, 80),
        w=st.floats(0.5, 20),
        h=st.floats(0.5, 20),
        axis=st.sampled_from(["horizontal", "vertical"]),
    )
    def test_involution(self, x0, y0, w, h, axis):
        b = np.array([x0, y0, x0 + w, y0 + h])
        out = boxcore.flip_box(boxcore.flip_box(b, 100, 100, axis), 100, 100, axis)
        np.testing.assert_allclose(out, b, atol=1e-12)

    def test_axes_commute(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            b = random_box(rng)
            hv = boxcore.flip_box(boxcore.flip_box(b, 100, 100, "horizontal"), 100, 100, "vertical")
            vh = boxcore.flip_box(boxcore.flip_box(b, 100, 100, "vertical"), 100, 100, "horizontal")
            np.testing.assert_allclose(hv, vh, atol=1e-12)

    def test_result_stays_inside(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            b = random_box(rng)
            out = boxcore.flip_box(b, 100, 100, "horizontal")
            assert boxcore.is_valid_box(out)
            assert out[0] >= 0 and out[2] <= 100
