import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudeye.core import (BoundingBox, Detection, Frame, GroundTruth, NoGroundTruthWarning, ScriptedModel,
                           ScriptedModelConfig, Source, average_precisions, evaluate_map, frame_diff,
                           greedy_iou_match, iou, read_annotations, scripted_detect, synthetic_extract,
                           write_annotations)

from conftest import make_frame

coords = st.integers(0, 20)


@st.composite
def int_boxes(draw):
    x0, y0 = draw(coords), draw(coords)
    return BoundingBox(x0, y0, x0 + draw(st.integers(1, 10)), y0 + draw(st.integers(1, 10)))


def raster_iou(a, b):
    grid = np.zeros((40, 40), dtype=np.uint8)
    grid[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] += 1
    grid[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] += 2
    inter = np.count_nonzero(grid == 3)
    union = np.count_nonzero(grid)
    return inter / union


class TestGeometry:
    def test_iou_examples(self):
        a = BoundingBox(0, 0, 2, 2)
        assert iou(a, a) == 1.0
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0
        assert iou(a, BoundingBox(1, 0, 3, 2)) == pytest.approx(1 / 3)

    @given(int_boxes(), int_boxes())
    def test_iou_matches_rasterization(self, a, b):
        assert iou(a, b) == pytest.approx(raster_iou(a, b))
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        assert (iou(a, b) == 1.0) == (a == b)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(1, 1, 1, 2)

    def test_clamp(self):
        assert BoundingBox(-5, -5, 10, 10).clamp(8, 8) == BoundingBox(0, 0, 8, 8)
        assert BoundingBox(10, 10, 12, 12).clamp(8, 8) is None

    def test_greedy_match_prefers_highest_iou(self):
        a = [BoundingBox(0, 0, 10, 10), BoundingBox(1, 0, 11, 10)]
        b = [BoundingBox(1, 0, 11, 10)]
        assert greedy_iou_match(a, b, 0.3) == [(1, 0)]


class TestFrames:
    def test_pixels_validated_and_frozen(self):
        f = make_frame()
        with pytest.raises(ValueError):
            f.pixels[0, 0, 0] = 1
        with pytest.raises(ValueError):
            Frame(0, 0.0, np.zeros((4, 4), dtype=np.uint8))

    def test_frame_diff_examples(self):
        black = Frame(0, 0, np.zeros((4, 4, 3), np.uint8))
        white = Frame(1, 0, np.full((4, 4, 3), 255, np.uint8))
        assert frame_diff(black, black) == 0.0
        assert frame_diff(black, white) == 1.0
        half = np.zeros((4, 4, 3), np.uint8)
        half[:2] = 255
        assert frame_diff(black, Frame(2, 0, half)) == 0.5

    def test_frame_diff_size_mismatch(self):
        with pytest.raises(ValueError):
            frame_diff(make_frame(h=4, w=4), make_frame(h=4, w=5))

    @given(st.integers(0, 2**31), st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_frame_diff_metric(self, s1, s2):
        a, b = make_frame(seed=s1, h=6, w=5), make_frame(seed=s2, h=6, w=5)
        d = frame_diff(a, b)
        assert d == frame_diff(b, a)
        assert 0.0 <= d <= 1.0
        assert (d == 0.0) == np.array_equal(a.pixels, b.pixels)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        gts = [GroundTruth(0, ((BoundingBox(1, 2, 3, 4), 1),)), GroundTruth(1, ())]
        write_annotations(tmp_path / "a.jsonl", gts)
        assert read_annotations(tmp_path / "a.jsonl") == gts
        line = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
        assert line == {"frame_id": 0, "boxes": [[1, 2, 3, 4, 1]]}

    def test_bad_line_reports_location(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"frame_id": 0, "boxes": []}\n{"frame_id": 1}\n')
        with pytest.raises(ValueError, match=":2:"):
            read_annotations(p)


class TestFeatures:
    def test_grid_shape_and_determinism(self):
        f = make_frame(h=50, w=70)
        a, b = synthetic_extract(f), synthetic_extract(f)
        for la, lb in zip(a.layers, b.layers):
            assert la.grid_h == -(-50 // la.stride) and la.grid_w == -(-70 // la.stride)
            assert np.array_equal(la.data, lb.data)
            assert np.isfinite(la.data).all()

    def test_strides_must_increase(self):
        with pytest.raises(ValueError):
            synthetic_extract(make_frame(), strides=(8, 4))

    @pytest.mark.parametrize("k", [1, 2])
    def test_shift_equivariance(self, k):
        s = 8
        big = make_frame(h=96, w=128, seed=3).pixels
        shifted = np.zeros_like(big)
        shifted[:, k * s:] = big[:, :-k * s]
        fa = synthetic_extract(Frame(0, 0, big), strides=(s,))
        fb = synthetic_extract(Frame(1, 0, shifted), strides=(s,))
        # interior cells whose patches avoid the zero-filled strip and frame edges
        a = fa.layers[0].data[2:-2, 2:-2 - k]
        b = fb.layers[0].data[2:-2, 2 + k:-2]
        assert np.array_equal(a, b)

    def test_uniform_frame_interior_constant(self):
        f = Frame(0, 0, np.full((64, 64, 3), 77, np.uint8))
        for layer in synthetic_extract(f, strides=(4, 8)).layers:
            inner = layer.data[2:-2, 2:-2].reshape(-1, layer.channels)
            assert np.allclose(inner, inner[0], atol=0, rtol=0)


def _gt(frame_id=0):
    return GroundTruth(frame_id, ((BoundingBox(10, 10, 20, 20), 0), (BoundingBox(30, 5, 80, 45), 1)))


class TestScriptedModels:
    def test_noiseless_identity(self):
        cfg = ScriptedModelConfig(miss_rate_small=0, miss_rate_large=0, box_jitter_sigma=0, confidence_noise_sigma=0)
        dets = scripted_detect(cfg, _gt(), make_frame(w=100, h=60))
        assert [(d.box, d.class_id, d.confidence) for d in dets] == [(b, c, 1.0) for b, c in _gt().boxes]

    def test_forced_small_drop(self):
        cfg = ScriptedModelConfig(miss_rate_small=1, miss_rate_large=0)
        dets = scripted_detect(cfg, _gt(), make_frame(w=100, h=60))
        assert [d.class_id for d in dets] == [1]

    def test_deterministic(self):
        cfg = ScriptedModelConfig(miss_rate_small=0.5, miss_rate_large=0.5, box_jitter_sigma=2, rng_seed=9)
        f = make_frame(w=100, h=60)
        assert scripted_detect(cfg, _gt(), f) == scripted_detect(cfg, _gt(), f)

    def test_frame_id_mismatch(self):
        with pytest.raises(ValueError):
            scripted_detect(ScriptedModelConfig(), _gt(1), make_frame(0))

    def test_regress_never_exceeds_proposals(self):
        cfg = ScriptedModelConfig(miss_rate_small=0, miss_rate_large=0)
        model = ScriptedModel(cfg, [_gt()])
        f = make_frame(w=100, h=60)
        fmap = model.extract(f)
        out = model.regress([BoundingBox(11, 11, 21, 21)], fmap)
        assert len(out) == 1 and out[0].class_id == 0
        assert model.regress([], fmap) == []

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScriptedModelConfig(miss_rate_small=1.5)
        with pytest.raises(ValueError):
            ScriptedModelConfig(box_jitter_sigma=-1)


def _det(box, conf, cls=0):
    return Detection(box, cls, conf, Source.EDGE)


def enumerate_ap(scored, n_gt):
    """Brute-force AP: list every PR point and integrate the interpolated envelope."""
    points = []
    tp = fp = 0
    for is_tp in scored:
        tp += is_tp
        fp += not is_tp
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        p_interp = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


class TestMap:
    def test_perfect_and_null(self):
        gts = [_gt()]
        perfect = [[_det(b, 1.0, c) for b, c in _gt().boxes]]
        assert evaluate_map(perfect, gts) == 1.0
        assert evaluate_map([[]], gts) == 0.0

    def test_hand_computed_example(self):
        gts = [GroundTruth(0, ((BoundingBox(0, 0, 10, 10), 0), (BoundingBox(20, 20, 30, 30), 0)))]
        dets = [[_det(BoundingBox(0, 0, 10, 10), 0.9), _det(BoundingBox(50, 50, 60, 60), 0.8)]]
        assert evaluate_map(dets, gts) == pytest.approx(0.5)
        assert enumerate_ap([True, False], 2) == pytest.approx(0.5)

    def test_no_ground_truth_warns(self):
        with pytest.warns(NoGroundTruthWarning):
            assert evaluate_map([[]], [GroundTruth(0)]) == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            evaluate_map([[]], [_gt()], 1.0)

    @given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 1.0)), min_size=1, max_size=8),
           st.integers(0, 3))
    @settings(max_examples=80)
    def test_matches_enumeration_oracle(self, spec, extra_gt):
        # one gt per true positive plus some never-detected gts, all disjoint
        gts_boxes, dets = [], []
        for i, (is_tp, conf) in enumerate(spec):
            if is_tp:
                b = BoundingBox(i * 20, 0, i * 20 + 10, 10)
                gts_boxes.append((b, 0))
                dets.append(_det(b, conf))
            else:
                dets.append(_det(BoundingBox(i * 20, 100, i * 20 + 10, 110), conf))
        for j in range(extra_gt):
            gts_boxes.append((BoundingBox(j * 20, 200, j * 20 + 10, 210), 0))
        if not gts_boxes:
            return
        order = sorted(range(len(spec)), key=lambda i: (-spec[i][1], i))
        expected = enumerate_ap([spec[i][0] for i in order], len(gts_boxes))
        got = average_precisions([dets], [GroundTruth(0, tuple(gts_boxes))])[0]
        assert got == pytest.approx(expected)

    def test_adding_confident_tp_never_lowers_ap(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = rng.integers(1, 6)
            gt_boxes = [(BoundingBox(i * 20, 0, i * 20 + 10, 10), 0) for i in range(n)]
            dets = [_det(BoundingBox(i * 20 + rng.integers(0, 8), 0, i * 20 + 10, 10), float(rng.uniform(0.1, 0.8)))
                    for i in range(n)]
            dets += [_det(BoundingBox(300, 300, 310, 310), float(rng.uniform(0.1, 0.8)))]
            gts = [GroundTruth(0, tuple(gt_boxes))]
            before = evaluate_map([dets], gts)
            missing = [b for b, _ in gt_boxes if all(iou(b, d.box) < 0.5 for d in dets)]
            if not missing:
                continue
            after = evaluate_map([dets + [_det(missing[0], 0.95)]], gts)
            assert after >= before
