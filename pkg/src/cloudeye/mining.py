"""Feature mining: recover targets the edge model missed.

Five descriptors (box center plus the four quadrant centers) are sampled from
a cloud-annotated reference frame and searched for in the current frame's
feature map, inside a region built from the reference box and the tracker's
prediction. A penalty grid pushes repeated searches away from failed matches;
if the group never fits, the box keeps the reference scale around the best
center match.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .core import SMALL_AREA_THRESHOLD, BoundingBox, Detection, FeatureMap, Source, iou

log = logging.getLogger(__name__)

SCALE_MIN, SCALE_MAX = 1.0 / 3.0, 3.0
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class MiningParams:
    l_padding: float = 16.0
    depth: int = 3
    epsilon: float = 3.0
    occlusion_threshold: float = 4.5
    penalty_weight: float = 0.5
    reference_staleness_threshold: int = 5
    conf_scale_small: float = 0.5
    conf_scale_large: float = 0.8
    conf_offset_small: float = 0.0
    conf_offset_large: float = 0.0
    small_area: float = SMALL_AREA_THRESHOLD
    duplicate_iou: float = 0.5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.epsilon <= 0 or self.penalty_weight <= 0:
            raise ValueError("epsilon and penalty_weight must be positive")
        if self.conf_offset_small >= 1 or self.conf_offset_large >= 1:
            raise ValueError("confidence offsets must stay below 1")


@dataclass(frozen=True)
class MatchTransform:
    scale: tuple[float, float]
    translation: tuple[float, float]


@dataclass(frozen=True)
class SearchRegion:
    box: BoundingBox | None
    source_track_id: int | None
    layer: int


@dataclass(frozen=True)
class SamplePoints:
    box: BoundingBox
    class_id: int
    layer: int
    points: tuple[tuple[float, float], ...]  # p0..p4 in pixels
    cells: tuple[tuple[int, int], ...]  # (row, col) per point
    descriptors: np.ndarray  # (5, channels)
    degenerate: bool = False


@dataclass
class MatchResult:
    detection: Detection | None
    confidence: float
    rounds: int = 0
    group_loss: float = math.inf
    conservative: bool = False
    reason: str = "ok"
    cells: tuple[tuple[int, int], ...] = ()
    transform: MatchTransform | None = None

    def trace(self, frame_id: int, target: int) -> dict:
        return {
            "frame": frame_id,
            "target": target,
            "rounds": self.rounds,
            "group_loss": None if math.isinf(self.group_loss) else round(self.group_loss, 6),
            "conservative": self.conservative,
            "confidence": round(self.confidence, 6),
            "reason": self.reason,
        }


def select_layer(box: BoundingBox, fmap: FeatureMap) -> int:
    """Layer whose stride is closest to ``sqrt(area) / 4``; ties go to the finer layer."""
    if not fmap.layers:
        raise ValueError("empty feature map")
    want = math.sqrt(box.area) / 4.0
    best, best_gap = 0, math.inf
    for i, layer in enumerate(fmap.layers):
        gap = abs(layer.stride - want)
        if gap < best_gap:
            best, best_gap = i, gap
    return best


def search_region(o_pre: BoundingBox, o_ref: BoundingBox, l_padding: float, width: float,
                  height: float, layer: int = 0, track_id: int | None = None) -> SearchRegion:
    combined = BoundingBox(
        min(o_pre.x_min, o_ref.x_min) - l_padding,
        min(o_pre.y_min, o_ref.y_min) - l_padding,
        max(o_pre.x_max, o_ref.x_max) + l_padding,
        max(o_pre.y_max, o_ref.y_max) + l_padding,
    )
    return SearchRegion(combined.clamp(width, height), track_id, layer)


def sample_points(box: BoundingBox) -> tuple[tuple[float, float], ...]:
    x0, y0, w, h = box.x_min, box.y_min, box.width, box.height
    return (
        box.center,
        (x0 + w / 4, y0 + h / 4),          # top-left
        (x0 + 3 * w / 4, y0 + h / 4),      # top-right
        (x0 + w / 4, y0 + 3 * h / 4),      # bottom-left
        (x0 + 3 * w / 4, y0 + 3 * h / 4),  # bottom-right
    )


def sample_descriptors(det: Detection | BoundingBox, fmap: FeatureMap, class_id: int = 0,
                       layer: int | None = None) -> SamplePoints:
    box = det.box if isinstance(det, Detection) else det
    if isinstance(det, Detection):
        class_id = det.class_id
    if layer is None:
        layer = select_layer(box, fmap)
    fl = fmap.layers[layer]
    pts = sample_points(box)
    degenerate = box.width < 2 * fl.stride or box.height < 2 * fl.stride
    if degenerate:
        pts = (pts[0],) * 5
    cells = tuple(fl.cell_of(x, y) for x, y in pts)
    desc = np.stack([fl.data[r, c] for r, c in cells]).astype(np.float64)
    return SamplePoints(box, class_id, layer, pts, cells, desc, degenerate)


def channel_inv_var(fmap: FeatureMap, layer: int) -> np.ndarray:
    """Inverse per-channel variance of a layer (the diagonal Mahalanobis weights)."""
    data = fmap.layers[layer].data
    var = data.reshape(-1, data.shape[2]).var(axis=0)
    return 1.0 / np.maximum(var, VAR_FLOOR)


def region_cells(region: BoundingBox, stride: int, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Half-open (row0, row1, col0, col1) of cells whose centers fall inside ``region``."""
    c0 = max(0, math.ceil(region.x_min / stride))
    c1 = min(grid_w - 1, math.floor(region.x_max / stride))
    r0 = max(0, math.ceil(region.y_min / stride))
    r1 = min(grid_h - 1, math.floor(region.y_max / stride))
    if c0 > c1 or r0 > r1:
        cx, cy = region.center
        c = min(max(int(math.floor(cx / stride + 0.5)), 0), grid_w - 1)
        r = min(max(int(math.floor(cy / stride + 0.5)), 0), grid_h - 1)
        return r, r + 1, c, c + 1
    return r0, r1 + 1, c0, c1 + 1


def _quadrant_masks(h: int, w: int, r0: int, c0: int) -> list[np.ndarray]:
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    up, down = rows <= r0, rows >= r0
    left, right = cols <= c0, cols >= c0
    return [up & left, up & right, down & left, down & right]


def penalty_field(h: int, w: int, cell: tuple[int, int], stride: int, weight: float) -> np.ndarray:
    """Penalty added around a failed match: ``weight / (1 + pixel distance)``."""
    rr, cc = np.mgrid[0:h, 0:w]
    return weight / (1.0 + stride * np.hypot(rr - cell[0], cc - cell[1]))


def _masked_argmin(cost: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    masked = np.where(mask, cost, np.inf)
    flat = int(np.argmin(masked))  # first minimum in row-major order
    return divmod(flat, cost.shape[1])


def confidence(mean_loss: float, area: float, params: MiningParams) -> float:
    """Size-bucketed confidence, strictly decreasing in ``mean_loss`` and capped at 1."""
    if area < params.small_area:
        num, tau = params.conf_scale_small, params.conf_offset_small
    else:
        num, tau = params.conf_scale_large, params.conf_offset_large
    return min(1.0, num / (math.exp(mean_loss) - tau))


def _scale(ref_a, ref_b, got_a, got_b) -> float:
    den = math.dist(*ref_a) + math.dist(*ref_b)
    if den == 0:
        return 1.0
    return min(SCALE_MAX, max(SCALE_MIN, (math.dist(*got_a) + math.dist(*got_b)) / den))


def match_target(ref: SamplePoints, cur_fmap: FeatureMap, region: SearchRegion, params: MiningParams,
                 inv_var: np.ndarray | None = None) -> MatchResult:
    if region.box is None:
        return MatchResult(None, 0.0, reason="degenerate")
    fl = cur_fmap.layers[ref.layer]
    s = fl.stride
    y0, y1, x0, x1 = region_cells(region.box, s, fl.grid_h, fl.grid_w)
    if inv_var is None:
        inv_var = np.ones(fl.channels)
    norm = math.sqrt(fl.channels)
    dists = [kernels.region_distances(fl.data, ref.descriptors[i], inv_var, y0, y1, x0, x1) / norm
             for i in range(5)]
    h, w = y1 - y0, x1 - x0
    penalty = np.zeros((5, h, w))

    conservative = False
    best_loss, best_found = math.inf, None
    rounds = 0
    for rnd in range(params.depth):
        rounds = rnd + 1
        found = [_masked_argmin(dists[0] + penalty[0], np.ones((h, w), dtype=bool))]
        masks = _quadrant_masks(h, w, *found[0])
        for i in range(1, 5):
            found.append(_masked_argmin(dists[i] + penalty[i], masks[i - 1]))
        loss = float(sum(dists[i][found[i]] for i in range(5)))
        if loss < best_loss:
            best_loss, best_found = loss, found
        if loss < params.epsilon:
            break
        if rnd < params.depth - 1:
            for i, cell in enumerate(found):
                penalty[i] += penalty_field(h, w, cell, s, params.penalty_weight)
        else:
            # fall back to the best round seen; penalties may have pushed later rounds off target
            conservative = True
            loss, found = best_loss, best_found

    if loss > params.occlusion_threshold:
        return MatchResult(None, 0.0, rounds, loss, conservative, "occluded")

    cells = tuple((r + y0, c + x0) for r, c in found)
    px = [fl.cell_center(r, c) for r, c in cells]
    ref_px = [fl.cell_center(r, c) for r, c in ref.cells]
    tx = px[0][0] - ref_px[0][0]
    ty = px[0][1] - ref_px[0][1]
    if conservative or ref.degenerate:
        sx = sy = 1.0
    else:
        # p1-p2 / p3-p4 span the width, p1-p3 / p2-p4 the height
        sx = _scale((ref_px[1], ref_px[2]), (ref_px[3], ref_px[4]), (px[1], px[2]), (px[3], px[4]))
        sy = _scale((ref_px[1], ref_px[3]), (ref_px[2], ref_px[4]), (px[1], px[3]), (px[2], px[4]))
    cx, cy = ref.box.center
    box = BoundingBox.from_center(cx + tx, cy + ty, ref.box.width * sx, ref.box.height * sy)
    box = box.clamp(cur_fmap.width or math.inf, cur_fmap.height or math.inf)
    if box is None:
        return MatchResult(None, 0.0, rounds, loss, conservative, "degenerate")
    conf = confidence(loss / 5.0, box.area, params)
    det = Detection(box, ref.class_id, conf, Source.MINED)
    return MatchResult(det, conf, rounds, loss, conservative, "ok", cells, MatchTransform((sx, sy), (tx, ty)))


# -- reference frames ---------------------------------------------------------

@dataclass(frozen=True)
class ReferenceFrame:
    frame_id: int
    detections: tuple[Detection, ...]
    features: FeatureMap
    samples: tuple[SamplePoints, ...]
    inv_var: dict[int, np.ndarray] = field(default_factory=dict)
    chained: bool = False


def build_reference(frame_id: int, fmap: FeatureMap, detections: Sequence[Detection],
                    chained: bool = False) -> ReferenceFrame:
    samples = tuple(sample_descriptors(d, fmap) for d in detections)
    inv_var = {layer: channel_inv_var(fmap, layer) for layer in {s.layer for s in samples}}
    return ReferenceFrame(frame_id, tuple(detections), fmap, samples, inv_var, chained)


def _link_prediction(ref_box: BoundingBox, class_id: int, predictions, radius: float):
    best, best_d = None, math.inf
    cx, cy = ref_box.center
    for tid, box, cls in predictions:
        if cls != class_id:
            continue
        d = math.dist((cx, cy), box.center)
        if d <= radius and d < best_d:
            best, best_d = (tid, box), d
    return best


@dataclass
class MineResult:
    detections: list[Detection]
    mined: list[Detection]
    traces: list[dict]


def mine_frame(cur_fmap: FeatureMap, edge_dets: Sequence[Detection],
               predictions: Sequence[tuple[int, BoundingBox, int]], ref: ReferenceFrame | None,
               params: MiningParams) -> MineResult:
    """Append mined detections for reference targets the edge model did not report.

    ``predictions`` holds ``(track_id, predicted_box, class_id)`` for live tracks.
    A reference target counts as already found when an edge detection of the
    same class overlaps it (IoU >= ``duplicate_iou``) at the reference
    position or at the matched position.
    """
    out = list(edge_dets)
    if ref is None or not ref.detections:
        return MineResult(out, [], [])
    mined, traces = [], []
    for idx, (det, sample) in enumerate(zip(ref.detections, ref.samples)):
        if _covered(det.box, det.class_id, edge_dets, params.duplicate_iou):
            continue
        radius = math.hypot(det.box.width, det.box.height) + 2 * params.l_padding
        link = _link_prediction(det.box, det.class_id, predictions, radius)
        o_pre, tid = (link[1], link[0]) if link else (det.box, None)
        region = search_region(o_pre, det.box, params.l_padding, cur_fmap.width, cur_fmap.height,
                               sample.layer, tid)
        res = match_target(sample, cur_fmap, region, params, ref.inv_var.get(sample.layer))
        traces.append(res.trace(cur_fmap.frame_id, idx))
        got = res.detection
        if got is None:
            continue
        if _covered(got.box, got.class_id, edge_dets, params.duplicate_iou):
            continue
        if _covered(got.box, got.class_id, mined, params.duplicate_iou):
            continue
        mined.append(got)
    return MineResult(out + mined, mined, traces)


def _covered(box: BoundingBox, class_id: int, dets: Sequence[Detection], thresh: float) -> bool:
    return any(d.class_id == class_id and iou(d.box, box) >= thresh for d in dets)


class ReferenceEvicted(LookupError):
    """Cloud result names a frame that is no longer in the edge cache."""


class FrameCache:
    """Ring of recent edge frames: ``frame_id -> (features, detections)``."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: OrderedDict[int, tuple[FeatureMap, tuple[Detection, ...]]] = OrderedDict()

    def __contains__(self, frame_id):
        return frame_id in self._items

    def __len__(self):
        return len(self._items)

    def put(self, frame_id: int, fmap: FeatureMap, dets: Sequence[Detection]) -> None:
        self._items[frame_id] = (fmap, tuple(dets))
        self._items.move_to_end(frame_id)
        while len(self._items) > self.capacity:
            self._items.popitem(last=False)

    def get(self, frame_id: int):
        return self._items[frame_id]

    def ids(self) -> list[int]:
        return list(self._items)

    @property
    def newest(self) -> int | None:
        return next(reversed(self._items)) if self._items else None


def staleness_threshold(boxes: Sequence[BoundingBox], speeds: Sequence[float], fallback: int,
                        cap: int) -> int:
    """Frames a reference stays usable: mean box diagonal over mean speed (px/frame)."""
    if not boxes or not speeds:
        return fallback
    diag = float(np.mean([math.hypot(b.width, b.height) for b in boxes]))
    speed = float(np.mean(speeds))
    if speed <= 1e-9:
        return cap
    return int(max(1, min(cap, math.floor(diag / speed))))


def chain_reference(ref: ReferenceFrame, cache: FrameCache, target_id: int, hop: int,
                    params: MiningParams) -> ReferenceFrame:
    """Carry reference boxes forward through cached frames, ``hop`` frames at a time.

    Every hop matches the original reference descriptors; only the box
    positions move forward, so appearance errors do not compound. The result
    is a fresh reference sampled at the last hop.
    """
    hop = max(1, hop)
    ids = [i for i in cache.ids() if ref.frame_id < i <= target_id]
    if not ids:
        return ref
    steps = ids[hop - 1::hop]
    if steps[-1] != ids[-1]:
        steps.append(ids[-1])
    boxes = [d.box for d in ref.detections]
    found = [False] * len(boxes)
    fmap = None
    for fid in steps:
        fmap, _ = cache.get(fid)
        for i, sample in enumerate(ref.samples):
            box = boxes[i]
            pad = params.l_padding + math.hypot(box.width, box.height)
            region = search_region(box, box, pad, fmap.width, fmap.height, sample.layer)
            res = match_target(sample, fmap, region, params, ref.inv_var.get(sample.layer))
            # a missed hop keeps the last position; only the final hop decides survival
            found[i] = res.detection is not None
            if found[i]:
                boxes[i] = res.detection.box
    carried = [replace(d, box=b) for d, b, ok in zip(ref.detections, boxes, found) if ok]
    return build_reference(steps[-1], fmap, carried, chained=True)


def refresh_reference(cache: FrameCache, cloud_frame_id: int, cloud_dets: Sequence[Detection],
                      current_id: int, threshold: int, params: MiningParams) -> ReferenceFrame:
    """Reference for ``current_id`` built from a cloud result on ``cloud_frame_id``.

    Raises ``ReferenceEvicted`` if the cloud frame fell out of the cache.
    """
    if cloud_frame_id not in cache:
        raise ReferenceEvicted(cloud_frame_id)
    fmap, _ = cache.get(cloud_frame_id)
    ref = build_reference(cloud_frame_id, fmap, cloud_dets)
    if current_id - cloud_frame_id <= threshold:
        return ref
    return chain_reference(ref, cache, current_id, threshold, params)
