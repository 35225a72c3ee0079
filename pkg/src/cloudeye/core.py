"""Domain types, box geometry, synthetic models, and the mAP metric."""

from __future__ import annotations

import enum
import json
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

SMALL_AREA_THRESHOLD = 32 * 32


class Source(str, enum.Enum):
    EDGE = "edge"
    CLOUD = "cloud"
    MINED = "mined"
    TRACKED = "tracked"


class NoGroundTruthWarning(UserWarning):
    """mAP requested over a set with no ground-truth boxes."""


@dataclass(frozen=True)
class Frame:
    id: int
    timestamp: float
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("pixels must be an (H, W, 3) uint8 array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("frame must be at least 1x1")
        px.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def expand(self, pad: float) -> "BoundingBox":
        return BoundingBox(self.x_min - pad, self.y_min - pad, self.x_max + pad, self.y_max + pad)

    def clamp(self, width: float, height: float) -> "BoundingBox | None":
        """Clip to ``[0, width] x [0, height]``; None if nothing is left."""
        x0, y0 = max(0.0, self.x_min), max(0.0, self.y_min)
        x1, y1 = min(float(width), self.x_max), min(float(height), self.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    source: Source

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "box": [round(v, 4) for v in self.box.as_tuple()],
            "class_id": self.class_id,
            "confidence": round(self.confidence, 6),
            "source": self.source.value,
        }


@dataclass(frozen=True)
class GroundTruth:
    frame_id: int
    boxes: tuple[tuple[BoundingBox, int], ...] = ()

    def to_json_line(self) -> str:
        rows = [[*box.as_tuple(), cls] for box, cls in self.boxes]
        return json.dumps({"frame_id": self.frame_id, "boxes": rows})

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        boxes = []
        for row in obj["boxes"]:
            x0, y0, x1, y1, c = row
            boxes.append((BoundingBox(float(x0), float(y0), float(x1), float(y1)), int(c)))
        return cls(int(obj["frame_id"]), tuple(boxes))


def write_annotations(path, gts: Iterable[GroundTruth]) -> None:
    with open(path, "w") as fh:
        for gt in gts:
            fh.write(gt.to_json_line() + "\n")


def read_annotations(path) -> list[GroundTruth]:
    gts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                gts.append(GroundTruth.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad annotation line: {exc}") from exc
    return gts


def read_frames(directory, fps: float = 30.0) -> list[Frame]:
    """Load numbered PNG files (sorted by the integer in the stem)."""
    from PIL import Image

    paths = sorted(Path(directory).glob("*.png"), key=lambda p: int("".join(ch for ch in p.stem if ch.isdigit()) or 0))
    frames = []
    for p in paths:
        idx = int("".join(ch for ch in p.stem if ch.isdigit()))
        with Image.open(p) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        frames.append(Frame(idx, idx / fps, px))
    return frames


# -- geometry -----------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def frame_diff(a: Frame, b: Frame) -> float:
    """Mean absolute per-channel difference, scaled to [0, 1]."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"frame size mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    total = kernels.abs_diff_sum(a.pixels, b.pixels)
    return total / (255.0 * a.pixels.size)


def greedy_iou_match(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox],
                     threshold: float) -> list[tuple[int, int]]:
    """Greedy max-IoU pairing; ties broken by (index_a, index_b)."""
    pairs = []
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            v = iou(a, b)
            if v >= threshold:
                pairs.append((-v, i, j))
    pairs.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    return sorted(out)


# -- features -----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureLayer:
    stride: int
    data: np.ndarray  # (grid_h, grid_w, channels)

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell whose receptive-field center is nearest (x, y)."""
        col = int(math.floor(x / self.stride + 0.5))
        row = int(math.floor(y / self.stride + 0.5))
        return min(max(row, 0), self.grid_h - 1), min(max(col, 0), self.grid_w - 1)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return float(col * self.stride), float(row * self.stride)


@dataclass(frozen=True)
class FeatureMap:
    layers: tuple[FeatureLayer, ...]
    frame_id: int = -1
    width: int = 0
    height: int = 0

    def __post_init__(self):
        strides = [layer.stride for layer in self.layers]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError("strides must strictly increase")


_PROJECTIONS: dict[tuple, np.ndarray] = {}


def _projection(seed: int, layer: int, in_dim: int, channels: int) -> np.ndarray:
    key = (seed, layer, in_dim, channels)
    mat = _PROJECTIONS.get(key)
    if mat is None:
        rng = np.random.default_rng([seed, layer, in_dim, channels])
        mat = rng.standard_normal((in_dim, channels)) / math.sqrt(in_dim)
        _PROJECTIONS[key] = mat
    return mat


def _window(side: int, sigma: float) -> np.ndarray:
    ax = np.arange(side) - (side - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    return np.outer(g, g)


def _weighted_projection(seed: int, layer: int, side: int, sigma: float, channels: int) -> np.ndarray:
    """Projection rows pre-multiplied by the Gaussian window (channel-major patch layout)."""
    key = ("w", seed, layer, side, sigma, channels)
    mat = _PROJECTIONS.get(key)
    if mat is None:
        weights = np.broadcast_to(_window(side, float(sigma)), (3, side, side)).reshape(-1)
        mat = _projection(seed, layer, 3 * side * side, channels) * weights[:, None]
        _PROJECTIONS[key] = mat
    return mat


def synthetic_extract(frame: Frame, strides: Sequence[int] = (4, 8, 16), channels: int = 32,
                      seed: int = 0, rf_scale: int = 2) -> FeatureMap:
    """Seeded random projection of the pixel patch around each grid cell.

    Cell (row, col) of a stride-``s`` layer sees the ``rf_scale*s`` square
    patch centered on pixel ``(col*s, row*s)``, weighted by a Gaussian of
    width ``s`` so features change smoothly under sub-stride motion. The frame
    is zero-padded outside its bounds.
    """
    strides = list(strides)
    if any(b <= a for a, b in zip(strides, strides[1:])) or strides[0] < 1:
        raise ValueError("strides must be positive and strictly increasing")
    img = frame.pixels.astype(np.float64) / 255.0 - 0.5
    h, w = frame.height, frame.width
    layers = []
    for li, s in enumerate(strides):
        gh, gw = -(-h // s), -(-w // s)
        side = rf_scale * s
        half = side // 2
        padded = np.zeros((gh * s + side, gw * s + side, 3))
        padded[half:half + h, half:half + w] = img
        # patch for cell (r, c) spans padded rows [r*s, r*s + side)
        win = np.lib.stride_tricks.sliding_window_view(padded, (side, side), axis=(0, 1))
        win = win[::s, ::s][:gh, :gw]  # (gh, gw, 3, side, side)
        flat = win.reshape(gh * gw, -1)
        data = (flat @ _weighted_projection(seed, li, side, s, channels)).reshape(gh, gw, channels)
        data.setflags(write=False)
        data.setflags(write=False)
        layers.append(FeatureLayer(s, data))
    return FeatureMap(tuple(layers), frame.id, w, h)


# -- pluggable models ---------------------------------------------------------

class ModelInterface(ABC):
    """What the pipeline needs from an edge or cloud detector."""

    @abstractmethod
    def extract(self, frame: Frame) -> FeatureMap: ...

    @abstractmethod
    def regress(self, proposals: Sequence[BoundingBox], fmap: FeatureMap) -> list[Detection]: ...

    @abstractmethod
    def full_infer(self, frame: Frame) -> list[Detection]: ...


@dataclass(frozen=True)
class ScriptedModelConfig:
    miss_rate_small: float = 0.0
    miss_rate_large: float = 0.0
    small_area_threshold: float = SMALL_AREA_THRESHOLD
    box_jitter_sigma: float = 0.0
    confidence_noise_sigma: float = 0.0
    latency_s: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for p in (self.miss_rate_small, self.miss_rate_large):
            if not 0.0 <= p <= 1.0:
                raise ValueError("miss rates must lie in [0, 1]")
        if self.box_jitter_sigma < 0 or self.confidence_noise_sigma < 0:
            raise ValueError("sigmas must be non-negative")


@dataclass(frozen=True)
class _Draw:
    keep_u: float
    jitter: np.ndarray
    conf_noise: float


def _draws(cfg: ScriptedModelConfig, frame_id: int, n: int, salt: int = 0) -> list[_Draw]:
    rng = np.random.default_rng([cfg.rng_seed, frame_id, salt])
    out = []
    for _ in range(n):
        u = float(rng.random())
        jit = rng.standard_normal(4)
        cn = float(rng.standard_normal())
        out.append(_Draw(u, jit, cn))
    return out


def _miss_rate(cfg: ScriptedModelConfig, box: BoundingBox) -> float:
    return cfg.miss_rate_small if box.area < cfg.small_area_threshold else cfg.miss_rate_large


def _emit(cfg, box, cls, draw, source, width, height, recall_scale=1.0, conf_scale=1.0):
    keep_p = (1.0 - _miss_rate(cfg, box)) * recall_scale
    if not draw.keep_u < keep_p:
        return None
    jb = box
    if cfg.box_jitter_sigma > 0:
        d = draw.jitter * cfg.box_jitter_sigma
        x0, y0, x1, y1 = box.x_min + d[0], box.y_min + d[1], box.x_max + d[2], box.y_max + d[3]
        if x1 - x0 < 1.0:
            x0, x1 = box.x_min, box.x_max
        if y1 - y0 < 1.0:
            y0, y1 = box.y_min, box.y_max
        jb = BoundingBox(x0, y0, x1, y1)
    if width and height:
        jb = jb.clamp(width, height) or box
    conf = 1.0 - abs(draw.conf_noise * cfg.confidence_noise_sigma)
    conf = min(1.0, max(0.0, conf * conf_scale))
    return Detection(jb, cls, conf, source)


def scripted_detect(cfg: ScriptedModelConfig, gt: GroundTruth, frame: Frame,
                    source: Source = Source.EDGE) -> list[Detection]:
    """Drop, jitter and score ground-truth boxes; a pure function of (cfg, gt, frame id)."""
    if gt.frame_id != frame.id:
        raise ValueError(f"ground truth for frame {gt.frame_id} given with frame {frame.id}")
    draws = _draws(cfg, frame.id, len(gt.boxes))
    out = []
    for (box, cls), draw in zip(gt.boxes, draws):
        det = _emit(cfg, box, cls, draw, source, frame.width, frame.height)
        if det is not None:
            out.append(det)
    return out


class ScriptedModel(ModelInterface):
    """Detector stand-in driven by ground truth.

    ``regress`` snaps each proposal onto the best-overlapping ground-truth box
    (IoU >= ``regress_iou``) and then applies the same per-box keep/jitter draws
    as ``full_infer``, so the two paths agree on which targets are missed.
    """

    def __init__(self, cfg: ScriptedModelConfig, gts: Iterable[GroundTruth],
                 strides: Sequence[int] = (4, 8, 16), channels: int = 32,
                 feature_seed: int = 0, regress_iou: float = 0.1):
        self.cfg = cfg
        self.gts = {gt.frame_id: gt for gt in gts}
        self.strides = tuple(strides)
        self.channels = channels
        self.feature_seed = feature_seed
        self.regress_iou = regress_iou

    def _gt(self, frame_id: int) -> GroundTruth:
        return self.gts.get(frame_id, GroundTruth(frame_id))

    def extract(self, frame: Frame) -> FeatureMap:
        return synthetic_extract(frame, self.strides, self.channels, self.feature_seed)

    def full_infer(self, frame: Frame) -> list[Detection]:
        return scripted_detect(self.cfg, self._gt(frame.id), frame)

    def regress(self, proposals: Sequence[BoundingBox], fmap: FeatureMap) -> list[Detection]:
        gt = self._gt(fmap.frame_id)
        gt_boxes = [b for b, _ in gt.boxes]
        draws = _draws(self.cfg, fmap.frame_id, len(gt.boxes))
        out = []
        for pi, gi in greedy_iou_match(list(proposals), gt_boxes, self.regress_iou):
            box, cls = gt.boxes[gi]
            det = _emit(self.cfg, box, cls, draws[gi], Source.EDGE, fmap.width, fmap.height)
            if det is not None:
                out.append(det)
        return out


# -- evaluation ---------------------------------------------------------------

def _voc_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precisions(dets: Sequence[Sequence[Detection]], gts: Sequence[GroundTruth],
                       iou_thresh: float = 0.5) -> dict[int, float]:
    """Per-class VOC AP (all-point interpolation) over aligned frame lists."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must be aligned per frame")
    classes = sorted({cls for gt in gts for _, cls in gt.boxes})
    aps = {}
    for cls in classes:
        gt_boxes = [[b for b, c in gt.boxes if c == cls] for gt in gts]
        n_gt = sum(len(g) for g in gt_boxes)
        cand = []
        for fi, frame_dets in enumerate(dets):
            for di, d in enumerate(frame_dets):
                if d.class_id == cls:
                    cand.append((-d.confidence, fi, di, d.box))
        cand.sort(key=lambda t: (t[0], t[1], t[2]))
        used = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
        tp = np.zeros(len(cand))
        for k, (_, fi, _, box) in enumerate(cand):
            best, best_j = 0.0, -1
            for j, g in enumerate(gt_boxes[fi]):
                v = iou(box, g)
                if v > best:
                    best, best_j = v, j
            if best_j >= 0 and best >= iou_thresh and not used[fi][best_j]:
                used[fi][best_j] = True
                tp[k] = 1.0
        aps[cls] = _voc_ap(tp, n_gt)
    return aps


def evaluate_map(dets: Sequence[Sequence[Detection]], gts: Sequence[GroundTruth],
                 iou_thresh: float = 0.5) -> float:
    aps = average_precisions(dets, gts, iou_thresh)
    if not aps:
        warnings.warn("no ground-truth boxes; mAP defined as 0", NoGroundTruthWarning, stacklevel=2)
        return 0.0
    return float(np.mean(list(aps.values())))
