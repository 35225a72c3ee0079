"""Virtual-clock model of the edge-to-cloud link and the cloud detector.

Nothing in here reads the wall clock: every time is supplied by the caller
or derived from the bandwidth trace, so identical inputs give identical
event logs.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import Detection, Frame, GroundTruth, ScriptedModelConfig, Source, _draws, _emit

EVENTS = ("enqueue", "evict", "send_start", "send_done", "cloud_done", "deliver", "stall")


class TraceExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class BandwidthTrace:
    """Step-wise rate: ``rates[i]`` holds on ``[times[i], times[i+1])``, the last one until ``horizon``."""

    times: tuple[float, ...]
    rates: tuple[float, ...]
    horizon: float = math.inf

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.rates):
            raise ValueError("trace needs matching, non-empty time and rate lists")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trace times must strictly increase")
        if min(self.rates) <= 0:
            raise ValueError("trace rates must be positive")
        if self.horizon <= self.times[-1]:
            raise ValueError("horizon must lie after the last sample")

    @classmethod
    def constant(cls, rate: float, horizon: float = math.inf) -> "BandwidthTrace":
        return cls((0.0,), (float(rate),), horizon)

    @classmethod
    def from_csv(cls, path) -> "BandwidthTrace":
        times, rates = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t_s", "bytes_per_s"]:
                raise ValueError(f"{path}: header must be 't_s,bytes_per_s'")
            for row in reader:
                times.append(float(row["t_s"]))
                rates.append(float(row["bytes_per_s"]))
        if not times:
            raise ValueError(f"{path}: empty trace")
        # the last sample lasts as long as the one before it (1 s for a single sample)
        step = times[-1] - times[-2] if len(times) > 1 else 1.0
        return cls(tuple(times), tuple(rates), times[-1] + step)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t_s,bytes_per_s\n")
            for t, r in zip(self.times, self.rates):
                fh.write(f"{t!r},{r!r}\n")

    def rate_at(self, t: float) -> float:
        i = bisect.bisect_right(self.times, t) - 1
        return self.rates[max(i, 0)]

    def bytes_between(self, t0: float, t1: float) -> float:
        if t1 <= t0:
            return 0.0
        total = 0.0
        t = t0
        while t < t1:
            i = max(bisect.bisect_right(self.times, t) - 1, 0)
            nxt = self.times[i + 1] if i + 1 < len(self.times) else math.inf
            seg_end = min(nxt, t1)
            total += self.rates[i] * (seg_end - t)
            t = seg_end
        return total

    def mean_rate(self, now: float, window: float = 1.0) -> float:
        """Trailing mean rate over ``[now - window, now]`` (the link estimate)."""
        t0 = max(self.times[0], now - window)
        if now <= t0:
            return self.rate_at(now)
        return self.bytes_between(t0, now) / (now - t0)

    def upload_end(self, size: float, start: float) -> float:
        """Time at which ``size`` bytes started at ``start`` have been sent."""
        if size <= 0:
            raise ValueError("payload size must be positive")
        remaining = float(size)
        t = max(start, self.times[0])
        i = max(bisect.bisect_right(self.times, t) - 1, 0)
        while True:
            seg_end = self.times[i + 1] if i + 1 < len(self.times) else self.horizon
            cap = self.rates[i] * (seg_end - t)
            if cap >= remaining:
                end = t + remaining / self.rates[i]
                if end > self.horizon:
                    raise TraceExhausted(f"upload of {size} bytes from t={start} runs past the trace")
                return end
            if math.isinf(seg_end) or seg_end >= self.horizon:
                raise TraceExhausted(f"upload of {size} bytes from t={start} runs past the trace")
            remaining -= cap
            t = seg_end
            i += 1


def simulate_upload(size: float, trace: BandwidthTrace, start_t: float, rtt: float,
                    cloud_latency: float) -> tuple[float, float]:
    """(upload end, result completion) for one payload; the result itself costs no bytes."""
    end = trace.upload_end(size, start_t)
    return end, end + rtt + cloud_latency


@dataclass
class UploadItem:
    frame_id: int
    is_keyframe: bool
    enqueue_time: float
    size: int
    config: tuple[int, int, int] = (0, 0, 0)  # (K, q_roi, q_bg)
    payload: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("upload size must be positive")


class UploadQueue:
    """Keyframes first, then FIFO by enqueue time; bounded at ``max_queue``."""

    def __init__(self, max_queue: int = 8):
        if max_queue < 1:
            raise ValueError("max_queue must be positive")
        self.max_queue = max_queue
        self._items: list[tuple[tuple, UploadItem]] = []
        self._seq = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return (item for _, item in self._items)

    @property
    def head(self) -> UploadItem | None:
        return self._items[0][1] if self._items else None

    def pop_head(self) -> UploadItem:
        return self._items.pop(0)[1]

    def enqueue(self, item: UploadItem) -> list[UploadItem]:
        """Insert ``item``; returns whatever was evicted (possibly ``item`` itself)."""
        key = (not item.is_keyframe, item.enqueue_time, self._seq)
        self._seq += 1
        evicted = []
        if len(self._items) >= self.max_queue:
            regulars = [i for i, (_, it) in enumerate(self._items) if not it.is_keyframe]
            if regulars:
                oldest = min(regulars, key=lambda i: self._items[i][0][1:])
                evicted.append(self._items.pop(oldest)[1])
            elif not item.is_keyframe:
                return [item]
            else:
                evicted.append(self._items.pop(0)[1])
        bisect.insort(self._items, (key, item), key=lambda t: t[0])
        return evicted


def send_probability(item: UploadItem, bw_estimate: float, window: float = 0.5) -> float:
    p = min(1.0, bw_estimate * window / item.size)
    if item.is_keyframe:
        p = min(1.0, 2.0 * p)
    return p


def maybe_send(queue: UploadQueue, bw_estimate: float, rng: np.random.Generator,
               window: float = 0.5) -> tuple[bool, UploadItem | None]:
    """Bernoulli gate on the queue head; the draw is always consumed."""
    head = queue.head
    if head is None:
        raise ValueError("queue is empty")
    u = float(rng.random())
    if u < send_probability(head, bw_estimate, window):
        return True, queue.pop_head()
    return False, None


@dataclass(frozen=True)
class NetParams:
    rtt: float = 0.05
    cloud_latency: float = 0.1
    max_queue: int = 8
    send_window: float = 0.5
    estimate_window: float = 1.0
    seed: int = 0


@dataclass
class InFlight:
    item: UploadItem
    start: float
    upload_end: float
    completion: float
    logged_done: bool = False


@dataclass
class CloudResult:
    frame_id: int
    completion_time: float
    item: UploadItem
    detections: list[Detection] = field(default_factory=list)


class LinkSimulator:
    """Single uplink with at most one transfer in flight; results return for free."""

    def __init__(self, trace: BandwidthTrace, params: NetParams | None = None):
        self.trace = trace
        self.params = params or NetParams()
        self.queue = UploadQueue(self.params.max_queue)
        self.rng = np.random.default_rng([self.params.seed, 0x5E4D])
        self.inflight: list[InFlight] = []
        self.busy_until = -math.inf
        self.stalled: UploadItem | None = None
        self.events: list[dict] = []
        self.counts = {e: 0 for e in EVENTS}

    def _log(self, event: str, t: float, frame_id: int, **extra) -> None:
        rec = {"event": event, "t": round(t, 9), "frame_id": frame_id}
        rec.update(extra)
        self.events.append(rec)
        self.counts[event] += 1

    def estimate(self, now: float) -> float:
        return self.trace.mean_rate(now, self.params.estimate_window)

    def offer(self, item: UploadItem, now: float) -> list[UploadItem]:
        self._log("enqueue", now, item.frame_id, keyframe=item.is_keyframe, size=item.size)
        evicted = self.queue.enqueue(item)
        for ev in evicted:
            self._log("evict", now, ev.frame_id, keyframe=ev.is_keyframe)
        return evicted

    def idle(self, now: float) -> bool:
        return self.busy_until <= now and self.stalled is None

    def tick(self, now: float, force: bool = False) -> UploadItem | None:
        """Possibly start sending the queue head; returns the item put on the wire."""
        self._flush_done(now)
        if not self.idle(now) or not len(self.queue):
            return None
        if force:
            item = self.queue.pop_head()
        else:
            ok, item = maybe_send(self.queue, self.estimate(now), self.rng, self.params.send_window)
            if not ok:
                return None
        try:
            end, done = simulate_upload(item.size, self.trace, now, self.params.rtt, self.params.cloud_latency)
        except TraceExhausted:
            self.stalled = item
            self._log("stall", now, item.frame_id, size=item.size)
            return None
        self._log("send_start", now, item.frame_id, size=item.size, queue_wait=round(now - item.enqueue_time, 9))
        self.inflight.append(InFlight(item, now, end, done))
        self.busy_until = end
        return item

    def _flush_done(self, now: float) -> None:
        for f in self.inflight:
            if not f.logged_done and f.upload_end <= now:
                self._log("send_done", f.upload_end, f.item.frame_id)
                self._log("cloud_done", f.completion, f.item.frame_id)
                f.logged_done = True

    def collect(self, now: float) -> list[CloudResult]:
        """Results whose completion time has passed, in completion order."""
        self._flush_done(now)
        ready = [f for f in self.inflight if f.completion <= now]
        self.inflight = [f for f in self.inflight if f.completion > now]
        out = []
        for f in sorted(ready, key=lambda f: (f.completion, f.item.frame_id)):
            self._log("deliver", now, f.item.frame_id, completion=round(f.completion, 9))
            out.append(CloudResult(f.item.frame_id, f.completion, f.item))
        return out

    def reconcile(self) -> dict:
        """Every enqueued item is sent, evicted, stalled, or still pending."""
        pending = len(self.queue)
        return {
            "enqueued": self.counts["enqueue"],
            "sent": self.counts["send_start"],
            "evicted": self.counts["evict"],
            "stalled": self.counts["stall"],
            "pending": pending,
            "balanced": self.counts["enqueue"] == (self.counts["send_start"] + self.counts["evict"]
                                                    + self.counts["stall"] + pending),
        }

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


# -- cloud detector -----------------------------------------------------------

@dataclass(frozen=True)
class FidelityParams:
    """Logistic map from box PSNR (dB) to detector fidelity, saturating at ``psnr_full``."""

    psnr_mid: float = 24.0
    psnr_scale: float = 2.0
    psnr_full: float = 40.0


def box_psnr(decoded: np.ndarray, original: np.ndarray, box) -> float:
    h, w = original.shape[:2]
    x0, y0 = max(0, int(math.floor(box.x_min))), max(0, int(math.floor(box.y_min)))
    x1, y1 = min(w, int(math.ceil(box.x_max))), min(h, int(math.ceil(box.y_max)))
    if x1 <= x0 or y1 <= y0:
        return math.inf
    a = decoded[y0:y1, x0:x1].astype(np.float64)
    b = original[y0:y1, x0:x1].astype(np.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def fidelity(psnr: float, fp: FidelityParams) -> float:
    if psnr >= fp.psnr_full:
        return 1.0
    return 1.0 / (1.0 + math.exp(-(psnr - fp.psnr_mid) / fp.psnr_scale))


def cloud_infer(decoded: Frame, original: Frame, gt: GroundTruth, cfg: ScriptedModelConfig,
                fp: FidelityParams = FidelityParams()) -> list[Detection]:
    """Scripted high-accuracy detector whose recall and confidence follow box fidelity."""
    if decoded.pixels.shape != original.pixels.shape:
        raise ValueError("decoded and original frames differ in size")
    draws = _draws(cfg, gt.frame_id, len(gt.boxes), salt=1)
    out = []
    for (box, cls), draw in zip(gt.boxes, draws):
        f = fidelity(box_psnr(decoded.pixels, original.pixels, box), fp)
        det = _emit(cfg, box, cls, draw, Source.CLOUD, decoded.width, decoded.height,
                    recall_scale=f, conf_scale=f)
        if det is not None:
            out.append(det)
    return out


def make_cloud_model(cfg: ScriptedModelConfig, fp: FidelityParams = FidelityParams()):
    def model(decoded: Frame, original: Frame, gt: GroundTruth) -> list[Detection]:
        return cloud_infer(decoded, original, gt, cfg, fp)
    return model


def trace_from_rates(rates: Sequence[float], step: float = 1.0) -> BandwidthTrace:
    times = tuple(i * step for i in range(len(rates)))
    return BandwidthTrace(times, tuple(float(r) for r in rates), times[-1] + step)
