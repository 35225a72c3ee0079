"""One virtual-clocked run of the edge pipeline against a simulated cloud."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import BoundingBox, Detection, Frame, GroundTruth, ScriptedModel, ScriptedModelConfig, evaluate_map, frame_diff
from .encode import ConfigEntry, decode_frame, encode_frame, plan_frame, uniform_plan
from .mining import (FrameCache, MiningParams, ReferenceEvicted, ReferenceFrame, chain_reference, mine_frame,
                     refresh_reference, staleness_threshold)
from .netsim import BandwidthTrace, FidelityParams, LinkSimulator, NetParams, UploadItem, cloud_infer
from .scheduler import BudgetParams, Fallback, PqIndex, embed, pq_build, query_configs, select_config
from .tracking import InferenceMode, Mode, Reason, Tracker, TrackerParams, choose_mode, regress_proposals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EdgeCostModel:
    """Synthetic edge latencies (seconds); full regression ~4x an 8-proposal fast pass."""

    extract_per_px_s: float = 4e-8
    regress_fixed_s: float = 4e-3
    regress_per_proposal_s: float = 1.2e-5
    full_proposals: int = 1000
    mine_per_round_s: float = 2e-4
    encode_per_px_s: float = 1e-8

    def extract(self, frame: Frame) -> float:
        return self.extract_per_px_s * frame.width * frame.height

    def regress(self, proposals: int) -> float:
        return self.regress_fixed_s + self.regress_per_proposal_s * proposals


@dataclass(frozen=True)
class PipelineConfig:
    tracker: TrackerParams = TrackerParams()
    mining: MiningParams = MiningParams()
    edge_model: ScriptedModelConfig = ScriptedModelConfig(miss_rate_small=0.3, miss_rate_large=0.05,
                                                          box_jitter_sigma=1.0, confidence_noise_sigma=0.2)
    cloud_model: ScriptedModelConfig = ScriptedModelConfig(miss_rate_small=0.0, miss_rate_large=0.0,
                                                           box_jitter_sigma=0.3, confidence_noise_sigma=0.02)
    fidelity: FidelityParams = FidelityParams()
    net: NetParams = NetParams()
    costs: EdgeCostModel = EdgeCostModel()
    strides: tuple[int, ...] = (4, 8, 16)
    channels: int = 32
    feature_seed: int = 0
    roi_padding: float = 16.0
    grid_g: int = 4
    latency_budget: float = 0.5
    fallback: Fallback = Fallback.SMALLEST_SIZE
    upload_interval: int = 15
    keyframe_threshold: float = 0.05
    uniform_quality: int = 90
    default_k: int = 2
    default_q: tuple[int, int] = (90, 20)
    top_n: int = 10
    cache_capacity: int = 64
    fps: float = 30.0
    fast_inference_on: bool = True
    mining_on: bool = True
    quality_encode_on: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _from_dict(cls, d)


_NESTED = {
    "tracker": TrackerParams, "mining": MiningParams, "edge_model": ScriptedModelConfig,
    "cloud_model": ScriptedModelConfig, "fidelity": FidelityParams, "net": NetParams, "costs": EdgeCostModel,
}


def _from_dict(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in d.items():
        if key not in names:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        if cls is PipelineConfig and key in _NESTED:
            val = _from_dict(_NESTED[key], val)
        elif key == "fallback":
            val = Fallback(val)
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


@dataclass
class FrameReport:
    frame_id: int
    mode: str
    reason: str
    proposals: int
    tracks: int
    latency: dict[str, float]
    detections: list[Detection]
    mined: int = 0
    uploaded: bool = False
    upload_frame_id: int | None = None
    bytes_sent: int = 0
    cloud_results_applied: int = 0
    reference_frame_id: int | None = None

    @property
    def edge_latency(self) -> float:
        return sum(v for k, v in self.latency.items() if k != "queue_wait")

    def to_json(self) -> dict:
        return {
            "frame": self.frame_id,
            "mode": self.mode,
            "reason": self.reason,
            "proposals": self.proposals,
            "tracks": self.tracks,
            "latency_s": {k: round(v, 9) for k, v in self.latency.items()},
            "detections": [d.to_json() for d in self.detections],
            "mined": self.mined,
            "uploaded": self.uploaded,
            "upload_frame_id": self.upload_frame_id,
            "bytes_sent": self.bytes_sent,
            "cloud_results_applied": self.cloud_results_applied,
            "reference_frame_id": self.reference_frame_id,
        }


@dataclass
class RunResult:
    reports: list[FrameReport]
    summary: dict
    events: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)


def _seeded(cfg: ScriptedModelConfig, seed: int, salt: int) -> ScriptedModelConfig:
    return replace(cfg, rng_seed=int(np.random.SeedSequence([seed, salt, cfg.rng_seed]).generate_state(1)[0]))


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    idx = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[idx - 1]


def summarize(reports: Sequence[FrameReport], gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> dict:
    if not reports:
        raise ValueError("no frame reports to summarize")
    by_id = {g.frame_id: g for g in gts}
    aligned = [by_id.get(r.frame_id, GroundTruth(r.frame_id)) for r in reports]
    lat = [r.edge_latency for r in reports]
    fast = [r for r in reports if r.mode == Mode.FAST.value]
    return {
        "frames": len(reports),
        "mAP": evaluate_map([r.detections for r in reports], aligned, iou_thresh),
        "latency_mean_s": float(np.mean(lat)),
        "latency_p50_s": nearest_rank(lat, 50),
        "latency_p95_s": nearest_rank(lat, 95),
        "regress_total_s": float(sum(r.latency["regress"] for r in reports)),
        "bytes_total": int(sum(r.bytes_sent for r in reports)),
        "proposals_per_frame": float(np.mean([r.proposals for r in reports])),
        "fast_frames": len(fast),
        "fast_proposals_per_frame": float(np.mean([r.proposals for r in fast])) if fast else 0.0,
        "upload_count": sum(1 for r in reports if r.uploaded),
        "mined_total": sum(r.mined for r in reports),
        "cloud_results": sum(r.cloud_results_applied for r in reports),
    }


class Pipeline:
    """Stateful per-frame driver. ``run_scenario`` is the usual entry point."""

    def __init__(self, gts: Sequence[GroundTruth], trace: BandwidthTrace, config: PipelineConfig,
                 config_set: Sequence[ConfigEntry] | None = None, index: PqIndex | None = None,
                 collect_traces: bool = False):
        self.cfg = config
        self.gts = {g.frame_id: g for g in gts}
        edge_cfg = _seeded(config.edge_model, config.seed, 1)
        self.cloud_cfg = _seeded(config.cloud_model, config.seed, 2)
        self.edge = ScriptedModel(edge_cfg, gts, config.strides, config.channels, config.feature_seed)
        self.tracker = Tracker(config.tracker)
        self.link = LinkSimulator(trace, replace(config.net, seed=config.seed))
        self.trace = trace
        self.cache = FrameCache(config.cache_capacity)
        self.reference: ReferenceFrame | None = None
        self.frames_since_cloud = 0
        self.prev: Frame | None = None
        self.originals: dict[int, Frame] = {}
        self.dropped_results = 0
        self.index = index
        if index is None and config_set:
            self.index = pq_build(list(config_set), seed=config.seed)
        self.collect_traces = collect_traces
        self.traces: list[dict] = []

    # -- stages ---------------------------------------------------------------

    def _mode(self, frame: Frame) -> InferenceMode:
        if not self.cfg.fast_inference_on:
            return InferenceMode(Mode.FULL, Reason.DISABLED)
        return choose_mode(self.prev, frame, self.tracker.tracks, self.frames_since_cloud, self.cfg.tracker)

    def _threshold(self) -> int:
        tracks = self.tracker.tracks
        return staleness_threshold([t.box for t in tracks], [t.speed for t in tracks],
                                   self.cfg.mining.reference_staleness_threshold, self.cfg.cache_capacity)

    def _select(self, frame: Frame, boxes: list[BoundingBox], now: float):
        """(K, q_roi, q_bg) for an upload, or None to skip it."""
        if not self.cfg.quality_encode_on:
            q = self.cfg.uniform_quality
            return 0, q, q
        k, (q_roi, q_bg) = self.cfg.default_k, self.cfg.default_q
        if self.index is not None and boxes:
            query = embed(boxes, frame.width, frame.height, self.cfg.grid_g)
            cands = query_configs(self.index, query, self.cfg.top_n)
            sel = select_config(cands, BudgetParams(self.link.estimate(now), self.cfg.latency_budget,
                                                    self.cfg.fallback))
            if sel.entry is None:
                return None
            k, q_roi, q_bg = sel.entry.k, sel.entry.q_roi, sel.entry.q_bg
        return k, q_roi, q_bg

    def _encode(self, frame: Frame, boxes: list[BoundingBox], choice):
        k, q_roi, q_bg = choice
        if not self.cfg.quality_encode_on:
            plan = uniform_plan(q_roi)
        else:
            plan = plan_frame(boxes, k, self.cfg.roi_padding, frame.width, frame.height, q_roi, q_bg)
        enc = encode_frame(frame, plan)
        cost = self.cfg.costs.encode_per_px_s * (frame.width * frame.height + plan.roi_pixels())
        return enc, cost

    def _apply_cloud(self, frame: Frame) -> int:
        applied = 0
        for res in self.link.collect(frame.timestamp):
            enc = res.item.payload
            original = self.originals.get(res.frame_id)
            if original is None:
                self.dropped_results += 1
                continue
            decoded = decode_frame(enc, self.cfg.fps)
            dets = cloud_infer(decoded, original, self.gts.get(res.frame_id, GroundTruth(res.frame_id)),
                               self.cloud_cfg, self.cfg.fidelity)
            try:
                self.reference = refresh_reference(self.cache, res.frame_id, dets, frame.id,
                                                   self._threshold(), self.cfg.mining)
            except ReferenceEvicted:
                self.dropped_results += 1
                continue
            self.frames_since_cloud = 0
            applied += 1
        return applied

    def step(self, frame: Frame) -> FrameReport:
        cfg = self.cfg
        now = frame.timestamp
        self.originals[frame.id] = frame
        mode = self._mode(frame)
        predictions = self.tracker.predict()
        fmap = self.edge.extract(frame)
        latency = {"extract": cfg.costs.extract(frame), "regress": 0.0, "mine": 0.0, "encode": 0.0,
                   "queue_wait": 0.0}
        if mode.mode is Mode.FAST:
            dets = regress_proposals(frame, predictions, self.edge, fmap).detections
            proposals = len(predictions)
        else:
            dets = self.edge.full_infer(frame)
            proposals = cfg.costs.full_proposals
        latency["regress"] = cfg.costs.regress(proposals)

        mined = []
        if cfg.mining_on and self.reference is not None:
            threshold = self._threshold()
            newest = self.cache.newest
            if newest is not None and frame.id - self.reference.frame_id > threshold and newest > self.reference.frame_id:
                self.reference = chain_reference(self.reference, self.cache, newest, threshold, cfg.mining)
            preds = [(tid, box, t.class_id) for (tid, box), t in zip(predictions, self.tracker.tracks)]
            res = mine_frame(fmap, dets, preds, self.reference, cfg.mining)
            mined = res.mined
            latency["mine"] = cfg.costs.mine_per_round_s * sum(t["rounds"] for t in res.traces)
            if self.collect_traces:
                self.traces.extend(res.traces)
        union = list(dets) + mined
        self.tracker.associate_and_update(predictions, union)
        self.cache.put(frame.id, fmap, union)

        is_key = self.prev is not None and frame_diff(self.prev, frame) > cfg.keyframe_threshold
        regular = cfg.upload_interval > 0 and frame.id % cfg.upload_interval == 0
        if is_key or regular:
            boxes = [d.box for d in union]
            choice = self._select(frame, boxes, now)
            if choice is not None:
                enc, cost = self._encode(frame, boxes, choice)
                latency["encode"] = cost
                was_empty = len(self.link.queue) == 0
                self.link.offer(UploadItem(frame.id, is_key, now, enc.size, choice, enc), now)
                sent = self.link.tick(now, force=is_key and was_empty)
            else:
                sent = self.link.tick(now)
        else:
            sent = self.link.tick(now)
        if sent is not None:
            latency["queue_wait"] = now - sent.enqueue_time

        applied = self._apply_cloud(frame)
        if applied == 0:
            self.frames_since_cloud += 1
        self.prev = frame
        # frames older than the cache cannot anchor a reference any more
        for fid in [f for f in self.originals if f < frame.id - cfg.cache_capacity]:
            del self.originals[fid]
        return FrameReport(
            frame.id, mode.mode.value, mode.reason.value, proposals, len(self.tracker.tracks), latency,
            union, len(mined), sent is not None, sent.frame_id if sent else None,
            sent.size if sent else 0, applied,
            self.reference.frame_id if self.reference else None,
        )


def run_scenario(frames: Sequence[Frame], gts: Sequence[GroundTruth], trace: BandwidthTrace,
                 config: PipelineConfig, config_set: Sequence[ConfigEntry] | None = None,
                 index: PqIndex | None = None, collect_traces: bool = False) -> RunResult:
    pipe = Pipeline(gts, trace, config, config_set, index, collect_traces)
    reports = []
    for frame in frames:
        if frame.timestamp >= trace.horizon:
            log.warning("bandwidth trace ends at %.3fs; run truncated at frame %d", trace.horizon, frame.id)
            break
        reports.append(pipe.step(frame))
    summary = summarize(reports, gts)
    summary["dropped_cloud_results"] = pipe.dropped_results
    summary["link"] = pipe.link.reconcile()
    return RunResult(reports, summary, pipe.link.events, pipe.traces)


def write_outputs(result: RunResult, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "reports.jsonl", "w") as fh:
        for r in result.reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w") as fh:
        fh.write("frame,mode,reason,proposals,tracks,detections,mined,extract_s,regress_s,mine_s,encode_s,"
                 "queue_wait_s,edge_latency_s,uploaded,bytes_sent,cloud_results_applied\n")
        for r in result.reports:
            lat = r.latency
            fh.write(f"{r.frame_id},{r.mode},{r.reason},{r.proposals},{r.tracks},{len(r.detections)},{r.mined},"
                     f"{lat['extract']:.9f},{lat['regress']:.9f},{lat['mine']:.9f},{lat['encode']:.9f},"
                     f"{lat['queue_wait']:.9f},{r.edge_latency:.9f},{int(r.uploaded)},{r.bytes_sent},"
                     f"{r.cloud_results_applied}\n")
    with open(out / "events.jsonl", "w") as fh:
        for ev in result.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    if result.traces:
        with open(out / "mining_trace.jsonl", "w") as fh:
            for t in result.traces:
                fh.write(json.dumps(t, sort_keys=True) + "\n")
