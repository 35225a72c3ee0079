import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudeye.core import BoundingBox, Frame, GroundTruth, ScriptedModelConfig, Source
from cloudeye.encode import RoiPlan, decode_frame, encode_frame
from cloudeye.netsim import (BandwidthTrace, FidelityParams, LinkSimulator, NetParams, TraceExhausted, UploadItem,
                             UploadQueue, box_psnr, cloud_infer, fidelity, maybe_send, send_probability,
                             simulate_upload, trace_from_rates)
from cloudeye.scenario import SyntheticSpec, generate


def item(fid, key=False, t=None, size=1000):
    return UploadItem(fid, key, float(fid if t is None else t), size)


class TestQueue:
    def test_keyframe_jumps_regulars(self):
        q = UploadQueue(8)
        for i in range(3):
            q.enqueue(item(i))
        q.enqueue(item(3, key=True))
        assert q.head.frame_id == 3
        assert [it.frame_id for it in q] == [3, 0, 1, 2]

    def test_full_of_keyframes_rejects_regular(self):
        q = UploadQueue(3)
        for i in range(3):
            q.enqueue(item(i, key=True))
        assert [e.frame_id for e in q.enqueue(item(9))] == [9]
        assert [it.frame_id for it in q] == [0, 1, 2]

    def test_full_evicts_oldest_regular(self):
        q = UploadQueue(3)
        q.enqueue(item(0, key=True))
        q.enqueue(item(1))
        q.enqueue(item(2))
        assert [e.frame_id for e in q.enqueue(item(3, key=True))] == [1]
        assert [it.frame_id for it in q] == [0, 3, 2]

    def test_fifo_among_equals(self):
        q = UploadQueue(10)
        for i in range(5):
            q.enqueue(item(i, t=1.0))
        assert [it.frame_id for it in q] == list(range(5))

    @given(st.lists(st.tuples(st.booleans(), st.floats(0, 100)), min_size=1, max_size=30), st.integers(1, 6))
    @settings(max_examples=100, deadline=None)
    def test_order_and_bound(self, spec, cap):
        q = UploadQueue(cap)
        seen = 0
        for i, (key, t) in enumerate(spec):
            evicted = q.enqueue(item(i, key=key, t=t))
            seen += 1 - len(evicted)
            assert len(q) <= cap and len(q) == seen
            keys = [(not it.is_keyframe, it.enqueue_time) for it in q]
            assert keys == sorted(keys)

    def test_item_validation(self):
        with pytest.raises(ValueError):
            UploadItem(0, False, 0.0, 0)
        with pytest.raises(ValueError):
            UploadQueue(0)


class TestSend:
    def test_probability_clamp(self):
        assert send_probability(item(0), 1e12) == 1.0
        assert send_probability(item(0, size=1000), 1000.0) == pytest.approx(0.5)
        assert send_probability(item(0, key=True, size=1000), 1000.0) == pytest.approx(1.0)

    def test_huge_estimate_always_sends(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = UploadQueue()
            q.enqueue(item(0))
            assert maybe_send(q, 1e15, rng)[0]

    def test_tiny_estimate_never_sends(self):
        rng = np.random.default_rng(0)
        q = UploadQueue()
        q.enqueue(item(0, size=10**9))
        assert not any(maybe_send(q, 1e-6, rng)[0] for _ in range(10_000))
        assert len(q) == 1

    def test_keyframe_rate_monte_carlo(self):
        def rate(key):
            rng = np.random.default_rng(42)
            hits = 0
            for _ in range(10_000):
                q = UploadQueue()
                q.enqueue(item(0, key=key, size=10_000))
                hits += maybe_send(q, 4_000.0, rng)[0]
            return hits / 10_000
        reg, key = rate(False), rate(True)
        assert key >= reg
        assert reg == pytest.approx(0.2, abs=0.02) and key == pytest.approx(0.4, abs=0.02)

    def test_empty_queue(self):
        with pytest.raises(ValueError):
            maybe_send(UploadQueue(), 1.0, np.random.default_rng(0))


class TestTrace:
    def test_constant_completion(self):
        end, done = simulate_upload(448_000, BandwidthTrace.constant(1e6), 0.0, 0.05, 0.1)
        assert end == pytest.approx(0.448) and done == pytest.approx(0.598)

    def test_rate_step(self):
        tr = BandwidthTrace((0.0, 0.1), (2e6, 1e6))
        assert tr.upload_end(300_000, 0.0) == pytest.approx(0.2)

    @given(st.lists(st.floats(1e3, 1e6), min_size=1, max_size=8), st.floats(1, 5e5), st.floats(0, 3))
    @settings(max_examples=150, deadline=None)
    def test_integral_oracle(self, rates, size, start):
        tr = BandwidthTrace(tuple(float(i) for i in range(len(rates))), tuple(rates))
        end = tr.upload_end(size, start)
        edges = list(range(len(rates))) + [math.inf]
        sent = sum(r * max(0.0, min(end, edges[i + 1]) - max(start, edges[i])) for i, r in enumerate(rates))
        assert sent == pytest.approx(size, rel=1e-9)
        assert tr.bytes_between(start, end) == pytest.approx(size, rel=1e-9)

    @given(st.floats(1, 1e6), st.floats(1, 1e6))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_size(self, a, b):
        tr = BandwidthTrace((0.0, 0.5, 1.0), (1e5, 3e4, 2e5))
        lo, hi = sorted((a, b))
        assert tr.upload_end(lo, 0.2) <= tr.upload_end(hi, 0.2)

    def test_exhausted(self):
        tr = trace_from_rates([1000.0, 1000.0])
        assert tr.upload_end(1500, 0.0) == pytest.approx(1.5)
        with pytest.raises(TraceExhausted):
            tr.upload_end(2500, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            BandwidthTrace((0.0, 0.0), (1.0, 1.0))
        with pytest.raises(ValueError):
            BandwidthTrace((0.0,), (0.0,))
        with pytest.raises(ValueError):
            BandwidthTrace.constant(1.0).upload_end(0, 0.0)

    def test_csv_round_trip(self, tmp_path):
        tr = BandwidthTrace((0.0, 1.0, 2.5), (1e6, 5e5, 2e6), 4.0)
        p = tmp_path / "t.csv"
        tr.to_csv(p)
        assert p.read_text().splitlines()[0] == "t_s,bytes_per_s"
        back = BandwidthTrace.from_csv(p)
        assert back.times == tr.times and back.rates == tr.rates
        assert back.horizon == pytest.approx(4.0)

    def test_csv_bad_header(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time,rate\n0,1\n")
        with pytest.raises(ValueError):
            BandwidthTrace.from_csv(p)


class TestLink:
    def _run(self, seed):
        tr = trace_from_rates([1e4, 2e4, 8e3, 1e4, 6e3, 3e4])
        sim = LinkSimulator(tr, NetParams(seed=seed, max_queue=3))
        for t in range(120):
            now = t / 30
            if t % 4 == 0:
                sim.offer(UploadItem(t, t % 24 == 0, now, 15_000 + 97 * t), now)
            sim.tick(now)
            sim.collect(now)
        return sim

    def test_event_log_deterministic(self, tmp_path):
        a, b = self._run(3), self._run(3)
        a.write_events(tmp_path / "a.jsonl")
        b.write_events(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert a.events != self._run(4).events

    def test_conservation(self):
        sim = self._run(1)
        rec = sim.reconcile()
        assert rec["balanced"] and rec["sent"] > 0

    def test_stall_at_horizon(self):
        sim = LinkSimulator(trace_from_rates([100.0]), NetParams())
        sim.offer(UploadItem(0, True, 0.0, 10_000), 0.0)
        assert sim.tick(0.0, force=True) is None
        assert sim.stalled is not None and sim.reconcile()["balanced"]
        assert sim.events[-1]["event"] == "stall"

    def test_results_delivered_after_completion(self):
        sim = LinkSimulator(BandwidthTrace.constant(1e6), NetParams(rtt=0.05, cloud_latency=0.1))
        sim.offer(UploadItem(7, True, 0.0, 448_000), 0.0)
        assert sim.tick(0.0, force=True).frame_id == 7
        assert sim.collect(0.5) == []
        res = sim.collect(0.6)
        assert len(res) == 1 and res[0].completion_time == pytest.approx(0.598)
        names = [e["event"] for e in sim.events]
        assert names == ["enqueue", "send_start", "send_done", "cloud_done", "deliver"]
        json.dumps(sim.events)


@pytest.fixture(scope="module")
def scene():
    frames, gts, _, _ = generate(SyntheticSpec(n_frames=1, n_targets=4, seed=7))
    return frames[0], gts[0]


class TestCloud:
    def test_fidelity_curve(self):
        fp = FidelityParams()
        assert fidelity(math.inf, fp) == 1.0 and fidelity(fp.psnr_full, fp) == 1.0
        assert fidelity(fp.psnr_mid, fp) == pytest.approx(0.5)
        assert fidelity(10, fp) < fidelity(20, fp) < fidelity(30, fp)

    def test_lossless_roi_full_recall(self, scene):
        frame, gt = scene
        rois = tuple((int(b.x_min), int(b.y_min), int(math.ceil(b.x_max) - int(b.x_min)),
                      int(math.ceil(b.y_max) - int(b.y_min))) for b, _ in gt.boxes)
        plan = RoiPlan(len(rois), rois, 100, 10)
        dec = decode_frame(encode_frame(frame, plan))
        for seed in range(10):
            dets = cloud_infer(dec, frame, gt, ScriptedModelConfig(rng_seed=seed))
            assert len(dets) == len(gt.boxes)
            assert all(d.source is Source.CLOUD for d in dets)

    def test_background_quality_lowers_recall(self, scene):
        frame, gt = scene

        def recall(q_bg):
            dec = decode_frame(encode_frame(frame, RoiPlan(0, (), q_bg, q_bg)))
            hits = sum(len(cloud_infer(dec, frame, gt, ScriptedModelConfig(rng_seed=s))) for s in range(200))
            return hits / (200 * len(gt.boxes))
        assert recall(5) < recall(50)

    def test_deterministic_and_bounded(self, scene):
        frame, gt = scene
        dec = decode_frame(encode_frame(frame, RoiPlan(0, (), 30, 30)))
        cfg = ScriptedModelConfig(rng_seed=5, box_jitter_sigma=4.0)
        a, b = cloud_infer(dec, frame, gt, cfg), cloud_infer(dec, frame, gt, cfg)
        assert a == b
        for d in a:
            assert 0 <= d.box.x_min <= d.box.x_max <= frame.width
            assert 0 <= d.box.y_min <= d.box.y_max <= frame.height

    def test_psnr(self, scene):
        frame, gt = scene
        box = gt.boxes[0][0]
        assert box_psnr(frame.pixels, frame.pixels, box) == math.inf
        with pytest.raises(ValueError):
            cloud_infer(Frame(0, 0.0, frame.pixels[:10]), frame, gt, ScriptedModelConfig())

    def test_empty_gt(self, scene):
        frame, _ = scene
        assert cloud_infer(frame, frame, GroundTruth(0, ()), ScriptedModelConfig()) == []
        assert BoundingBox(0, 0, 1, 1).area == 1
