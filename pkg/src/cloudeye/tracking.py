"""Kalman-guided fast inference.

The tracker keeps a SORT-style constant-velocity state per target,
``[cx, cy, s, r, vcx, vcy, vs]`` with ``s`` the box area and ``r`` the
aspect ratio (no velocity on ``r``). In fast mode its predictions are the
only proposals handed to the edge model's regression stage.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import BoundingBox, Detection, Frame, ModelInterface, Source, frame_diff, greedy_iou_match

log = logging.getLogger(__name__)

DIM_X, DIM_Z = 7, 4
S_FLOOR = 1.0
R_FLOOR = 1e-3

TRANSITION = np.eye(DIM_X)
TRANSITION[0, 4] = TRANSITION[1, 5] = TRANSITION[2, 6] = 1.0
OBSERVATION = np.eye(DIM_Z, DIM_X)


@dataclass(frozen=True)
class TrackerParams:
    process_noise: tuple[float, ...] = (1.0, 1.0, 1.0, 1e-2, 1e-1, 1e-1, 1e-4)
    measurement_noise: tuple[float, ...] = (1.0, 1.0, 10.0, 1e-2)
    noise_sigma_frac: float = 0.05  # sigma = frac * sqrt(area)
    max_time_since_update: int = 5
    min_hits: int = 1
    full_infer_pixel_threshold: float = 0.12
    cloud_staleness_limit: int = 60
    association_iou: float = 0.3
    birth_velocity_inflation: float = 10.0

    def __post_init__(self):
        if len(self.process_noise) != DIM_X or len(self.measurement_noise) != DIM_Z:
            raise ValueError("noise vectors must have 7 and 4 entries")
        if min(self.process_noise) <= 0 or min(self.measurement_noise) <= 0 or self.noise_sigma_frac <= 0:
            raise ValueError("noise scales must be positive")
        if self.full_infer_pixel_threshold <= 0 or self.cloud_staleness_limit <= 0:
            raise ValueError("thresholds must be positive")


class Mode(str, enum.Enum):
    FAST = "fast"
    FULL = "full"


class Reason(str, enum.Enum):
    NONE = "none"
    PIXEL_CHANGE = "pixel_change"
    CLOUD_STALE = "cloud_stale"
    NO_TRACKS = "no_tracks"
    DISABLED = "disabled"


@dataclass(frozen=True)
class InferenceMode:
    mode: Mode
    reason: Reason = Reason.NONE

    def __post_init__(self):
        if (self.reason is Reason.NONE) != (self.mode is Mode.FAST):
            raise ValueError("reason must be NONE exactly when mode is FAST")


def box_to_z(box: BoundingBox) -> np.ndarray:
    cx, cy = box.center
    return np.array([cx, cy, box.area, box.width / box.height])


def x_to_box(x: np.ndarray) -> BoundingBox:
    s = max(float(x[2]), S_FLOOR)
    r = max(float(x[3]), R_FLOOR)
    w = math.sqrt(s * r)
    h = s / w
    return BoundingBox.from_center(float(x[0]), float(x[1]), w, h)


def _sigma2(params: TrackerParams, area: float) -> float:
    return (params.noise_sigma_frac * math.sqrt(max(area, S_FLOOR))) ** 2


def process_cov(params: TrackerParams, area: float) -> np.ndarray:
    return np.diag(np.asarray(params.process_noise) * _sigma2(params, area))


def measurement_cov(params: TrackerParams, area: float) -> np.ndarray:
    return np.diag(np.asarray(params.measurement_noise) * _sigma2(params, area))


def kf_predict(x: np.ndarray, P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = TRANSITION @ x
    if x[2] < S_FLOOR:
        x[2] = S_FLOOR
    P = TRANSITION @ P @ TRANSITION.T + Q
    return x, 0.5 * (P + P.T)


def kf_update(x: np.ndarray, P: np.ndarray, z: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H = OBSERVATION
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T  # P H^T S^-1 with S, P symmetric
    x = x + K @ (z - H @ x)
    IKH = np.eye(DIM_X) - K @ H
    P = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form keeps P PSD
    x[2] = max(x[2], S_FLOOR)
    x[3] = max(x[3], R_FLOOR)
    return x, 0.5 * (P + P.T)


@dataclass(frozen=True)
class KalmanTrack:
    id: int
    state: np.ndarray
    covariance: np.ndarray
    class_id: int
    age: int = 0
    hits: int = 1
    time_since_update: int = 0

    @property
    def box(self) -> BoundingBox:
        return x_to_box(self.state)

    @property
    def speed(self) -> float:
        return float(math.hypot(self.state[4], self.state[5]))


def new_track(track_id: int, det: Detection, params: TrackerParams) -> KalmanTrack:
    z = box_to_z(det.box)
    x = np.zeros(DIM_X)
    x[:DIM_Z] = z
    r_diag = np.diag(measurement_cov(params, det.box.area))
    p_diag = np.concatenate([r_diag, params.birth_velocity_inflation * r_diag[:3]])
    return KalmanTrack(track_id, x, np.diag(p_diag), det.class_id)


class Tracker:
    """Owns the live tracks and the id counter; not thread-safe by design."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.tracks: list[KalmanTrack] = []
        self._next_id = 1
        self.rejected = 0

    def __len__(self):
        return len(self.tracks)

    def snapshot(self) -> list[KalmanTrack]:
        return [replace(t, state=t.state.copy(), covariance=t.covariance.copy()) for t in self.tracks]

    def predict(self) -> list[tuple[int, BoundingBox]]:
        out, advanced = [], []
        for t in self.tracks:
            x, P = kf_predict(t.state, t.covariance, process_cov(self.params, t.state[2]))
            nt = replace(t, state=x, covariance=P, age=t.age + 1)
            advanced.append(nt)
            out.append((nt.id, nt.box))
        self.tracks = advanced
        return out

    def update(self, matched: Sequence[tuple[int, Detection]],
               new_detections: Sequence[Detection] = ()) -> list[KalmanTrack]:
        by_id = {}
        for tid, det in matched:
            if tid in by_id:
                raise ValueError(f"track {tid} matched twice")
            by_id[tid] = det
        kept = []
        for t in self.tracks:
            det = by_id.pop(t.id, None)
            if det is not None and det.box.area > 0:
                x, P = kf_update(t.state, t.covariance, box_to_z(det.box),
                                 measurement_cov(self.params, det.box.area))
                kept.append(replace(t, state=x, covariance=P, hits=t.hits + 1, time_since_update=0))
                continue
            t = replace(t, time_since_update=t.time_since_update + 1)
            if t.time_since_update <= self.params.max_time_since_update:
                kept.append(t)
        if by_id:
            raise KeyError(f"unknown track ids {sorted(by_id)}")
        for det in new_detections:
            if det.box.area <= 0:
                self.rejected += 1
                log.warning("rejected detection with non-positive area: %s", det.box)
                continue
            kept.append(new_track(self._next_id, det, self.params))
            self._next_id += 1
        self.tracks = kept
        return self.snapshot()

    def associate_and_update(self, predictions: Sequence[tuple[int, BoundingBox]],
                             detections: Sequence[Detection]) -> list[tuple[int, int]]:
        """Greedy-IoU association of detections to predictions, then update.

        Returns the (prediction index, detection index) pairs that were matched.
        """
        pairs = greedy_iou_match([b for _, b in predictions], [d.box for d in detections],
                                 self.params.association_iou)
        matched_dets = {j for _, j in pairs}
        self.update([(predictions[i][0], detections[j]) for i, j in pairs],
                    [d for j, d in enumerate(detections) if j not in matched_dets])
        return pairs


def choose_mode(prev: Frame | None, cur: Frame, tracks: Sequence, frames_since_cloud: int,
                params: TrackerParams) -> InferenceMode:
    if prev is not None and frame_diff(prev, cur) > params.full_infer_pixel_threshold:
        return InferenceMode(Mode.FULL, Reason.PIXEL_CHANGE)
    if frames_since_cloud > params.cloud_staleness_limit:
        return InferenceMode(Mode.FULL, Reason.CLOUD_STALE)
    if len(tracks) == 0:
        return InferenceMode(Mode.FULL, Reason.NO_TRACKS)
    return InferenceMode(Mode.FAST)


@dataclass
class FastResult:
    detections: list[Detection]
    proposals: int
    clamped: int = 0
    pairs: list[tuple[int, int]] = field(default_factory=list)


def regress_proposals(frame: Frame, predictions: Sequence[tuple[int, BoundingBox]],
                      edge_model: ModelInterface, fmap=None) -> FastResult:
    """Fast-path detection: regress only the tracker's predicted boxes."""
    if not predictions:
        raise ValueError("fast inference needs live tracks; run the full path instead")
    proposals = [b for _, b in predictions]
    if fmap is None:
        fmap = edge_model.extract(frame)
    raw = edge_model.regress(proposals, fmap)
    if len(raw) > len(proposals):
        raise RuntimeError("regression returned more detections than proposals")
    dets, clamped = [], 0
    for d in raw:
        if not d.box.inside(frame.width, frame.height):
            clamped += 1
            box = d.box.clamp(frame.width, frame.height)
            if box is None:
                continue
            d = replace(d, box=box)
        dets.append(d)
    pairs = greedy_iou_match(proposals, [d.box for d in dets], 0.3)
    tracked = {j for _, j in pairs}
    dets = [replace(d, source=Source.TRACKED if j in tracked else Source.EDGE) for j, d in enumerate(dets)]
    return FastResult(dets, len(proposals), clamped, pairs)


def fast_infer(frame: Frame, tracker: Tracker, edge_model: ModelInterface) -> FastResult:
    """Predict, regress on the predictions, and fold the results back into the tracker."""
    if not tracker.tracks:
        raise ValueError("fast inference needs live tracks; run the full path instead")
    predictions = tracker.predict()
    res = regress_proposals(frame, predictions, edge_model)
    tracker.associate_and_update(predictions, res.detections)
    return res
