"""ROI clustering and differentiated-quality JPEG encoding.

Wire format (little-endian)::

    "CEYE" u8 version u32 frame_id u16 width u16 height u8 K u8 q_roi u8 q_bg
    u16 roi_count { u16 x u16 y u16 w u16 h u32 len <len bytes JPEG> } * roi_count
    u32 bg_len <bg_len bytes JPEG>
    u32 crc32 (of every preceding byte)
"""

from __future__ import annotations

import io
import json
import math
import statistics
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .core import BoundingBox, Detection, Frame, GroundTruth, evaluate_map

MAGIC = b"CEYE"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHBBBH")
_ROI = struct.Struct("<HHHHI")
_U32 = struct.Struct("<I")
HEADER_SIZE = _HEADER.size

EXACT_SPLIT_LIMIT = 256


# -- weighted bisecting k-means -----------------------------------------------

def weighted_wcss(points: np.ndarray, weights: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    wsum = weights.sum()
    centroid = (weights[:, None] * points).sum(axis=0) / wsum
    return float((weights * ((points - centroid) ** 2).sum(axis=1)).sum())


def _split_directions(points: np.ndarray) -> np.ndarray:
    """Unit directions that realise every line-separable ordering of ``points``."""
    n = len(points)
    iu, ju = np.triu_indices(n, 1)
    d = points[ju] - points[iu]
    keep = np.any(d != 0, axis=1)
    ang = np.arctan2(d[keep, 1], d[keep, 0]) + np.pi / 2
    eps = 1e-7
    angles = np.concatenate([[0.0, np.pi / 2], ang - eps, ang + eps])
    return np.stack([np.cos(angles), np.sin(angles)])  # (2, D)


def exact_two_means(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Optimal weighted 2-partition; returns a boolean side mask.

    The optimal split is separated by a line (the bisector of the two
    centroids), so sweeping every combinatorially distinct projection order
    and every prefix cut covers it.
    """
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points to split")
    dirs = _split_directions(points)
    proj = points @ dirs  # (n, D)
    order = np.argsort(proj, axis=0, kind="stable")
    w = weights[order]  # (n, D)
    px = points[:, 0][order]
    py = points[:, 1][order]
    cw = np.cumsum(w, axis=0)
    cx = np.cumsum(w * px, axis=0)
    cy = np.cumsum(w * py, axis=0)
    cq = np.cumsum(w * (px * px + py * py), axis=0)
    tw, tx, ty, tq = cw[-1], cx[-1], cy[-1], cq[-1]
    lw, lx, ly, lq = cw[:-1], cx[:-1], cy[:-1], cq[:-1]
    rw, rx, ry, rq = tw - lw, tx - lx, ty - ly, tq - lq
    cost = (lq - (lx * lx + ly * ly) / lw) + (rq - (rx * rx + ry * ry) / rw)
    # re-score the few near-best candidates exactly to avoid cumsum round-off
    flat = np.argsort(cost, axis=None, kind="stable")[:32]
    best_mask, best_cost = None, math.inf
    for f in flat:
        k, di = divmod(int(f), cost.shape[1])
        mask = np.zeros(n, dtype=bool)
        mask[order[: k + 1, di]] = True
        c = weighted_wcss(points[mask], weights[mask]) + weighted_wcss(points[~mask], weights[~mask])
        if c < best_cost - 1e-12 or (abs(c - best_cost) <= 1e-12 and _canon(mask) < _canon(best_mask)):
            best_mask, best_cost = mask, c
    return _orient(best_mask)


def _canon(mask):
    if mask is None:
        return (math.inf,)
    return tuple(np.flatnonzero(_orient(mask)))


def _orient(mask: np.ndarray) -> np.ndarray:
    # side containing the first point is reported as True
    return mask if mask[0] else ~mask


def lloyd_two_means(points: np.ndarray, weights: np.ndarray, iters: int = 100) -> np.ndarray:
    """Weighted 2-means seeded with the two farthest-apart points."""
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    centers = np.stack([points[i], points[j]]).astype(np.float64)
    mask = None
    for _ in range(iters):
        dist = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist[:, 0] <= dist[:, 1]
        if new.all() or not new.any():
            new = np.zeros(len(points), dtype=bool)
            new[i] = True
        if mask is not None and np.array_equal(new, mask):
            break
        mask = new
        for side, m in enumerate((mask, ~mask)):
            centers[side] = (weights[m, None] * points[m]).sum(axis=0) / weights[m].sum()
    return _orient(mask)


def bisect(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if len(points) <= EXACT_SPLIT_LIMIT:
        return exact_two_means(points, weights)
    return lloyd_two_means(points, weights)


def box_points(boxes: Sequence[BoundingBox]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([b.center for b in boxes], dtype=np.float64).reshape(-1, 2)
    w = np.array([b.area for b in boxes], dtype=np.float64)
    return pts, w


def weighted_bikmeans(boxes: Sequence[BoundingBox], k: int, history: list | None = None) -> list[list[int]]:
    """Bisecting k-means over box centers, weighted by box area.

    Each round splits the cluster with the largest weighted within-cluster sum
    of squares. If ``history`` is given, the total WCSS after every round is
    appended to it.
    """
    n = len(boxes)
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must lie in [1, {n}]; cap K at the number of boxes")
    pts, w = box_points(boxes)
    clusters = [list(range(n))]
    scores = [weighted_wcss(pts, w)]
    if history is not None:
        history.append(sum(scores))
    while len(clusters) < k:
        splittable = [i for i, c in enumerate(clusters) if len(c) >= 2]
        target = max(splittable, key=lambda i: (scores[i], len(clusters[i]), -i))
        idx = np.array(clusters[target])
        mask = bisect(pts[idx], w[idx])
        a, b = sorted(idx[mask].tolist()), sorted(idx[~mask].tolist())
        clusters[target:target + 1] = [a, b]
        scores[target:target + 1] = [weighted_wcss(pts[a], w[a]), weighted_wcss(pts[b], w[b])]
        if history is not None:
            history.append(sum(scores))
    order = sorted(range(len(clusters)), key=lambda i: clusters[i][0])
    return [clusters[i] for i in order]


# -- ROI planning -------------------------------------------------------------

@dataclass(frozen=True)
class RoiPlan:
    k: int
    rois: tuple[tuple[int, int, int, int], ...]  # (x, y, w, h) in pixels
    q_roi: int = 90
    q_bg: int = 20

    def __post_init__(self):
        if not (1 <= self.q_bg <= 100 and 1 <= self.q_roi <= 100):
            raise ValueError("qualities must lie in [1, 100]")
        if self.q_roi < self.q_bg:
            raise ValueError("q_roi must be >= q_bg")

    def roi_pixels(self) -> int:
        return sum(w * h for _, _, w, h in self.rois)


def _overlap(a, b) -> bool:
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def merge_rects(rects: list[tuple[float, float, float, float]]) -> list[tuple[float, float, float, float]]:
    """Union overlapping corner-form rectangles until none overlap."""
    rects = list(rects)
    changed = True
    while changed:
        changed = False
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                if _overlap(rects[i], rects[j]):
                    a, b = rects[i], rects[j]
                    rects[i] = (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))
                    del rects[j]
                    changed = True
                    break
            if changed:
                break
    return sorted(rects)


def plan_rois(boxes: Sequence[BoundingBox], clusters: Sequence[Sequence[int]], padding: float,
              width: int, height: int, q_roi: int = 90, q_bg: int = 20) -> RoiPlan:
    rects = []
    for members in clusters:
        if not members:
            continue
        x0 = min(boxes[i].x_min for i in members) - padding
        y0 = min(boxes[i].y_min for i in members) - padding
        x1 = max(boxes[i].x_max for i in members) + padding
        y1 = max(boxes[i].y_max for i in members) + padding
        x0, y0 = max(0, math.floor(x0)), max(0, math.floor(y0))
        x1, y1 = min(width, math.ceil(x1)), min(height, math.ceil(y1))
        if x1 > x0 and y1 > y0:
            rects.append((x0, y0, x1, y1))
    merged = merge_rects(rects)
    rois = tuple((int(a), int(b), int(c - a), int(d - b)) for a, b, c, d in merged)
    return RoiPlan(len(clusters), rois, q_roi, q_bg)


def plan_frame(boxes: Sequence[BoundingBox], k: int, padding: float, width: int, height: int,
               q_roi: int, q_bg: int) -> RoiPlan:
    """Cluster then plan; ``k`` is capped at the box count, zero boxes gives no ROIs."""
    if not boxes:
        return RoiPlan(0, (), q_roi, q_bg)
    k = max(1, min(k, len(boxes)))
    return plan_rois(boxes, weighted_bikmeans(boxes, k), padding, width, height, q_roi, q_bg)


# -- codec --------------------------------------------------------------------

class WireFormatError(ValueError):
    """Malformed or corrupted encoded frame; ``section`` names where parsing failed."""

    def __init__(self, section: str, detail: str):
        super().__init__(f"{section}: {detail}")
        self.section = section
        self.detail = detail


class CodecError(RuntimeError):
    def __init__(self, region: int, detail: str):
        super().__init__(f"region {region}: {detail}")
        self.region = region


def jpeg_bytes(pixels: np.ndarray, quality: int) -> bytes:
    buf = io.BytesIO()
    # 4:4:4 chroma at the top qualities, 4:2:0 elsewhere
    Image.fromarray(pixels, "RGB").save(buf, "JPEG", quality=int(quality),
                                        subsampling=0 if quality >= 95 else 2, optimize=False)
    return buf.getvalue()


def jpeg_decode(data: bytes, width: int, height: int, section: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "JPEG":
                raise WireFormatError(section, f"payload is {im.format}, not JPEG")
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except WireFormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on bad input
        raise WireFormatError(section, f"JPEG decode failed: {exc}") from exc
    if arr.shape != (height, width, 3):
        raise WireFormatError(section, f"decoded size {arr.shape[1]}x{arr.shape[0]} != {width}x{height}")
    return arr


@dataclass(frozen=True)
class EncodedFrame:
    frame_id: int
    width: int
    height: int
    k: int
    q_roi: int
    q_bg: int
    regions: tuple[tuple[tuple[int, int, int, int], bytes], ...]
    background: bytes

    def header_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.frame_id, self.width, self.height,
                            self.k, self.q_roi, self.q_bg, len(self.regions))

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes()]
        for (x, y, w, h), data in self.regions:
            parts.append(_ROI.pack(x, y, w, h, len(data)))
            parts.append(data)
        parts.append(_U32.pack(len(self.background)))
        parts.append(self.background)
        body = b"".join(parts)
        return body + _U32.pack(zlib.crc32(body))

    @property
    def size(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncodedFrame":
        blob = bytes(blob)
        if len(blob) < _HEADER.size + 2 * _U32.size:
            raise WireFormatError("header", f"truncated: {len(blob)} bytes")
        if blob[:4] != MAGIC:
            raise WireFormatError("header", f"bad magic {blob[:4]!r}")
        body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
        if zlib.crc32(body) != crc:
            raise WireFormatError("checksum", "crc32 mismatch")
        magic, ver, fid, w, h, k, q_roi, q_bg, n = _HEADER.unpack_from(body, 0)
        if ver != VERSION:
            raise WireFormatError("header", f"unsupported version {ver}")
        if w < 1 or h < 1:
            raise WireFormatError("header", "zero frame dimension")
        off = _HEADER.size
        regions = []
        for i in range(n):
            if off + _ROI.size > len(body):
                raise WireFormatError(f"roi[{i}]", "truncated rect")
            x, y, rw, rh, ln = _ROI.unpack_from(body, off)
            off += _ROI.size
            if rw < 1 or rh < 1 or x + rw > w or y + rh > h:
                raise WireFormatError(f"roi[{i}]", f"rect {(x, y, rw, rh)} outside {w}x{h}")
            if ln == 0 or off + ln > len(body):
                raise WireFormatError(f"roi[{i}]", "truncated payload")
            regions.append(((x, y, rw, rh), body[off:off + ln]))
            off += ln
        if off + _U32.size > len(body):
            raise WireFormatError("background", "truncated length")
        (bg_len,) = _U32.unpack_from(body, off)
        off += _U32.size
        if bg_len == 0 or off + bg_len != len(body):
            raise WireFormatError("background", f"length {bg_len} does not match remaining {len(body) - off}")
        return cls(fid, w, h, k, q_roi, q_bg, tuple(regions), body[off:])


def encode_frame(frame: Frame, plan: RoiPlan) -> EncodedFrame:
    for x, y, w, h in plan.rois:
        if x < 0 or y < 0 or x + w > frame.width or y + h > frame.height or w < 1 or h < 1:
            raise ValueError(f"ROI {(x, y, w, h)} outside {frame.width}x{frame.height}")
    try:
        bg = jpeg_bytes(frame.pixels, plan.q_bg)
    except Exception as exc:
        raise CodecError(-1, str(exc)) from exc
    regions = []
    for i, (x, y, w, h) in enumerate(plan.rois):
        try:
            data = jpeg_bytes(np.ascontiguousarray(frame.pixels[y:y + h, x:x + w]), plan.q_roi)
        except Exception as exc:
            raise CodecError(i, str(exc)) from exc
        regions.append(((x, y, w, h), data))
    return EncodedFrame(frame.id, frame.width, frame.height, min(plan.k, 255), plan.q_roi, plan.q_bg,
                        tuple(regions), bg)


def decode_frame(enc: EncodedFrame | bytes, fps: float = 30.0) -> Frame:
    if not isinstance(enc, EncodedFrame):
        enc = EncodedFrame.from_bytes(enc)
    canvas = jpeg_decode(enc.background, enc.width, enc.height, "background").copy()
    for i, ((x, y, w, h), data) in enumerate(enc.regions):
        canvas[y:y + h, x:x + w] = jpeg_decode(data, w, h, f"roi[{i}]")
    return Frame(enc.frame_id, enc.frame_id / fps, canvas)


def uniform_plan(q: int) -> RoiPlan:
    return RoiPlan(0, (), q, q)


# -- offline configuration set ------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Deterministic stand-in for wall-clock stage timings (seconds)."""

    cluster_fixed_s: float = 2e-4
    cluster_per_box_k_s: float = 5e-5
    encode_per_px_s: float = 1e-8

    def t_cluster(self, n_boxes: int, k: int) -> float:
        if n_boxes == 0:
            return 0.0
        return self.cluster_fixed_s + self.cluster_per_box_k_s * n_boxes * k

    def t_encode(self, width: int, height: int, plan: RoiPlan) -> float:
        return self.encode_per_px_s * (width * height + plan.roi_pixels())


@dataclass(frozen=True)
class ConfigEntry:
    frame_id: int
    embedding: tuple[float, ...]
    k: int
    q_roi: int
    q_bg: int
    accuracy: float
    payload_size: int
    t_cluster: float
    t_encode: float

    @property
    def q(self) -> tuple[int, int]:
        return (self.q_roi, self.q_bg)

    def to_json_line(self) -> str:
        d = asdict(self)
        d["embedding"] = [round(v, 8) for v in self.embedding]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "ConfigEntry":
        obj = dict(obj)
        obj["embedding"] = tuple(float(v) for v in obj["embedding"])
        return cls(**obj)


def save_config_set(path, entries: Iterable[ConfigEntry]) -> int:
    n = 0
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json_line() + "\n")
            n += 1
    return n


def load_config_set(path) -> list[ConfigEntry]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(ConfigEntry.from_json(json.loads(line)))
                except (ValueError, TypeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad config entry: {exc}") from exc
    return out


@dataclass
class ProfileReport:
    entries: list[ConfigEntry] = field(default_factory=list)
    skipped: int = 0


def _median_time(fn: Callable, repeats: int):
    times, result = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), result


def build_config_set(frames: Sequence[Frame], gts: Sequence[GroundTruth], k_range: Sequence[int],
                     q_range: Sequence[tuple[int, int]], cloud_model: Callable, embedder: Callable,
                     padding: float = 16.0, timing: str = "model", cost: CostModel | None = None,
                     repeats: int = 5) -> ProfileReport:
    """Profile every (frame, K, Q) combination.

    ``cloud_model(decoded, original, gt)`` returns detections on a decoded
    frame; ``embedder(boxes, width, height)`` returns a vector-like object with
    an ``as_vector()`` method. ``timing="wall"`` records medians of
    ``repeats`` wall-clock runs; ``"model"`` uses ``cost`` so the set is
    reproducible byte for byte.
    """
    if timing not in ("model", "wall"):
        raise ValueError("timing must be 'model' or 'wall'")
    cost = cost or CostModel()
    by_id = {gt.frame_id: gt for gt in gts}
    report = ProfileReport()
    for frame in frames:
        gt = by_id.get(frame.id, GroundTruth(frame.id))
        boxes = [b for b, _ in gt.boxes]
        emb = tuple(float(v) for v in embedder(boxes, frame.width, frame.height).as_vector())
        for k in k_range:
            if k > len(boxes) or k < 1:
                report.skipped += len(q_range)
                continue
            if timing == "wall":
                t_cluster, clusters = _median_time(lambda: weighted_bikmeans(boxes, k), repeats)
            else:
                clusters = weighted_bikmeans(boxes, k)
                t_cluster = cost.t_cluster(len(boxes), k)
            for q_roi, q_bg in q_range:
                plan = plan_rois(boxes, clusters, padding, frame.width, frame.height, q_roi, q_bg)
                if timing == "wall":
                    t_encode, enc = _median_time(lambda: encode_frame(frame, plan), repeats)
                else:
                    enc = encode_frame(frame, plan)
                    t_encode = cost.t_encode(frame.width, frame.height, plan)
                decoded = decode_frame(enc)
                dets = cloud_model(decoded, frame, gt)
                acc = evaluate_map([dets], [gt])
                report.entries.append(ConfigEntry(frame.id, emb, k, q_roi, q_bg, acc, enc.size,
                                                  t_cluster, t_encode))
    return report


def detections_boxes(dets: Sequence[Detection]) -> list[BoundingBox]:
    return [d.box for d in dets]
