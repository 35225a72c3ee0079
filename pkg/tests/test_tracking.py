import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudeye.core import BoundingBox, Detection, Frame, GroundTruth, ScriptedModel, ScriptedModelConfig, Source, iou
from cloudeye.tracking import (InferenceMode, Mode, Reason, Tracker, TrackerParams, box_to_z, choose_mode,
                               fast_infer, kf_predict, kf_update, measurement_cov, new_track, process_cov,
                               regress_proposals, x_to_box)

from conftest import make_frame

PARAMS = TrackerParams()


def det(box, cls=0, conf=1.0):
    return Detection(box, cls, conf, Source.EDGE)


def oracle_predict(x, P, Q):
    F = np.eye(7)
    for i in range(3):
        F[i, i + 4] = 1.0
    x = F @ x
    x[2] = max(x[2], 1.0)  # predicted area floor
    return x, F @ P @ F.T + Q


def oracle_update(x, P, z, R):
    H = np.zeros((4, 7))
    H[:4, :4] = np.eye(4)
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return x + K @ (z - H @ x), (np.eye(7) - K @ H) @ P


def random_psd(rng, scale=10.0):
    A = rng.normal(size=(7, 7)) * scale
    return A @ A.T


def reachable_covariances(rng, n_steps=30):
    """Covariances produced by the filter itself from a fresh track."""
    box = BoundingBox(50, 50, 70, 80)
    t = new_track(1, det(box), PARAMS)
    x, P = t.state, t.covariance
    out = []
    for _ in range(n_steps):
        x, P = kf_predict(x, P, process_cov(PARAMS, x[2]))
        out.append(P)
        if rng.random() < 0.7:
            z = box_to_z(x_to_box(x)) + rng.normal(0, 1, 4) * [2, 2, 20, 0.01]
            z[2] = max(z[2], 1.0)
            z[3] = max(z[3], 0.1)
            x, P = kf_update(x, P, z, measurement_cov(PARAMS, z[2]))
            out.append(P)
    return out


class TestKalmanMath:
    def test_predict_matches_oracle(self, rng):
        for _ in range(50):
            x = rng.normal(size=7) * 10
            x[2] = abs(x[2]) + 5
            P = random_psd(rng)
            Q = process_cov(PARAMS, x[2])
            xe, Pe = oracle_predict(x, P, Q)
            xg, Pg = kf_predict(x.copy(), P, Q)
            assert np.allclose(xg, xe) and np.allclose(Pg, Pe)

    def test_update_matches_oracle(self, rng):
        for _ in range(50):
            x = rng.normal(size=7) * 10
            x[2] = abs(x[2]) + 500
            x[3] = abs(x[3]) + 0.5
            P = random_psd(rng, 3.0) + np.eye(7)
            z = x[:4] + rng.normal(size=4)
            R = measurement_cov(PARAMS, x[2])
            xe, Pe = oracle_update(x, P, z, R)
            xg, Pg = kf_update(x.copy(), P, z, R)
            assert np.allclose(xg, xe)
            assert np.allclose(Pg, Pe, atol=1e-6 * np.abs(Pe).max())

    def test_predict_trace_increases_on_filter_covariances(self, rng):
        for P in reachable_covariances(rng):
            _, P2 = kf_predict(np.array([0, 0, 400, 1, 0, 0, 0.0]), P, process_cov(PARAMS, 400))
            assert np.trace(P2) > np.trace(P)

    def test_predict_trace_counterexample_for_arbitrary_psd(self):
        # strong negative position/velocity correlation: F P F^T shrinks the position variance
        P = np.zeros((7, 7))
        P[0, 0] = P[4, 4] = 1.0
        P[0, 4] = P[4, 0] = -1.0
        _, P2 = kf_predict(np.array([0, 0, 1, 1, 0, 0, 0.0]), P, process_cov(PARAMS, 1))
        assert np.trace(P2) < np.trace(P)

    def test_identity_measurement_update(self, rng):
        for P in reachable_covariances(rng, 10):
            x = np.array([100, 80, 400, 1.2, 1, -1, 0.5])
            z = x[:4].copy()
            x2, P2 = kf_update(x.copy(), P, z, measurement_cov(PARAMS, 400))
            assert np.allclose(x2[:4], z)
            assert np.allclose(x2, x)
            assert np.trace(P2) < np.trace(P)

    def test_gain_lies_between_prediction_and_measurement(self):
        tr = Tracker()
        tr.update([], [det(BoundingBox.from_center(0, 50, 20, 20))])
        tr.predict()
        tr.update([(1, det(BoundingBox.from_center(10, 50, 20, 20)))])
        cx = tr.tracks[0].state[0]
        assert 0 < cx < 10

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_psd_under_random_steps(self, seed):
        rng = np.random.default_rng(seed)
        for P in reachable_covariances(rng, 60):
            assert np.allclose(P, P.T)
            assert np.linalg.eigvalsh(P).min() >= -1e-9 * max(1.0, np.abs(P).max())

    def test_constant_velocity_error_decays(self):
        tr = Tracker()
        v = 4.0
        errs = []
        for k in range(25):
            truth = BoundingBox.from_center(20 + v * k, 40 + 0.5 * v * k, 24, 18)
            if k == 0:
                tr.update([], [det(truth)])
            else:
                tr.predict()
                tr.update([(1, det(truth))])
            errs.append(abs(tr.tracks[0].state[0] - truth.center[0]) + abs(tr.tracks[0].state[1] - truth.center[1]))
        diffs = np.diff(errs[3:])
        assert (diffs <= 1e-12).all()
        assert errs[-1] < 0.05 * errs[3]


class TestTracker:
    def test_zero_velocity_identity(self):
        tr = Tracker()
        b = BoundingBox(10, 20, 40, 60)
        tr.update([], [det(b)])
        (_, pb), = tr.predict()
        assert np.allclose(pb.as_tuple(), b.as_tuple())

    def test_linear_transition(self):
        t = new_track(1, det(BoundingBox.from_center(100, 50, 20, 20)), PARAMS)
        x = t.state.copy()
        x[4] = 10
        x2, _ = kf_predict(x, t.covariance, process_cov(PARAMS, x[2]))
        assert x2[0] == 110

    def test_expiry(self):
        p = TrackerParams(max_time_since_update=3)
        tr = Tracker(p)
        tr.update([], [det(BoundingBox(0, 0, 10, 10))])
        for _ in range(3):
            tr.predict()
            tr.update([])
        assert len(tr) == 1
        tr.predict()
        tr.update([])
        assert len(tr) == 0

    def test_duplicate_and_unknown_ids(self):
        tr = Tracker()
        tr.update([], [det(BoundingBox(0, 0, 10, 10))])
        d = det(BoundingBox(0, 0, 10, 10))
        with pytest.raises(ValueError):
            tr.update([(1, d), (1, d)])
        with pytest.raises(KeyError):
            tr.update([(99, d)])

    def test_births_get_fresh_ids_and_zero_velocity(self):
        tr = Tracker()
        tr.update([], [det(BoundingBox(0, 0, 10, 10)), det(BoundingBox(20, 0, 30, 10))])
        assert [t.id for t in tr.tracks] == [1, 2]
        assert all(np.all(t.state[4:] == 0) for t in tr.tracks)
        vel_var = np.diag(tr.tracks[0].covariance)[4:]
        pos_var = np.diag(tr.tracks[0].covariance)[:3]
        assert np.allclose(vel_var, 10 * pos_var)

    def test_snapshot_is_a_copy(self):
        tr = Tracker()
        tr.update([], [det(BoundingBox(0, 0, 10, 10))])
        snap = tr.snapshot()
        snap[0].state[0] = 999
        assert tr.tracks[0].state[0] != 999

    def test_param_validation(self):
        with pytest.raises(ValueError):
            TrackerParams(process_noise=(0, 1, 1, 1, 1, 1, 1))
        with pytest.raises(ValueError):
            InferenceMode(Mode.FAST, Reason.PIXEL_CHANGE)
        with pytest.raises(ValueError):
            InferenceMode(Mode.FULL)


class TestChooseMode:
    def test_fast(self):
        f = make_frame()
        assert choose_mode(f, f, [object()], 0, PARAMS) == InferenceMode(Mode.FAST)

    def test_pixel_change(self):
        a = Frame(0, 0, np.zeros((4, 4, 3), np.uint8))
        px = np.zeros((4, 4, 3), np.uint8)
        px[:2] = 255
        mode = choose_mode(a, Frame(1, 0, px), [object()], 0, TrackerParams(full_infer_pixel_threshold=0.3))
        assert mode == InferenceMode(Mode.FULL, Reason.PIXEL_CHANGE)

    def test_cloud_stale_and_no_tracks(self):
        f = make_frame()
        assert choose_mode(f, f, [object()], 61, PARAMS).reason is Reason.CLOUD_STALE
        assert choose_mode(f, f, [], 0, PARAMS).reason is Reason.NO_TRACKS


def moving_scene(n, v=5.0, size=30):
    gts = [GroundTruth(k, ((BoundingBox(20 + v * k, 40, 20 + v * k + size, 40 + size), 0),)) for k in range(n)]
    frames = [Frame(k, k / 30, np.zeros((160, 320, 3), np.uint8)) for k in range(n)]
    return frames, gts


class TestFastInfer:
    def test_tracks_moving_target_with_one_proposal(self):
        frames, gts = moving_scene(20)
        model = ScriptedModel(ScriptedModelConfig(miss_rate_small=0, miss_rate_large=0), gts)
        tr = Tracker()
        tr.update([], model.full_infer(frames[0]))
        for f in frames[1:]:
            res = fast_infer(f, tr, model)
            assert res.proposals == 1
        assert len(res.detections) == 1
        assert res.detections[0].source is Source.TRACKED
        assert iou(res.detections[0].box, gts[-1].boxes[0][0]) >= 0.9

    def test_requires_tracks(self):
        frames, gts = moving_scene(1)
        with pytest.raises(ValueError):
            fast_infer(frames[0], Tracker(), ScriptedModel(ScriptedModelConfig(), gts))

    def test_static_targets_proposal_count(self):
        boxes = tuple((BoundingBox(10 + 30 * i, 10, 30 + 30 * i, 30), 0) for i in range(10))
        gts = [GroundTruth(k, boxes) for k in range(100)]
        model = ScriptedModel(ScriptedModelConfig(miss_rate_small=0, miss_rate_large=0), gts)
        tr = Tracker()
        frame0 = Frame(0, 0, np.zeros((64, 320, 3), np.uint8))
        tr.update([], model.full_infer(frame0))
        for k in range(1, 100):
            res = fast_infer(Frame(k, k / 30, np.zeros((64, 320, 3), np.uint8)), tr, model)
            assert res.proposals == 10 == len(tr)

    def test_out_of_frame_regression_clamped(self):
        class Wild:
            def extract(self, frame):
                return None

            def regress(self, proposals, fmap):
                return [det(BoundingBox(-5, -5, 10, 10))]

        f = Frame(0, 0, np.zeros((20, 20, 3), np.uint8))
        res = regress_proposals(f, [(1, BoundingBox(0, 0, 10, 10))], Wild())
        assert res.clamped == 1
        assert res.detections[0].box == BoundingBox(0, 0, 10, 10)
