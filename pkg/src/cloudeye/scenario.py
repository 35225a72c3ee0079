"""Synthetic moving-rectangle sequences with ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoundingBox, Frame, GroundTruth, write_annotations
from .netsim import BandwidthTrace


@dataclass(frozen=True)
class SyntheticSpec:
    n_frames: int = 60
    n_targets: int = 5
    width: int = 320
    height: int = 240
    min_size: int = 16
    max_size: int = 28
    min_speed: float = 0.5
    max_speed: float = 2.0
    n_classes: int = 2
    fps: float = 30.0
    noise: float = 3.0
    texture_cells: int = 3
    bandwidth: tuple[float, float] = (0.5e6, 2.0e6)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_targets < 0 or self.min_size < 2 or self.max_size < self.min_size:
            raise ValueError("bad target spec")
        if self.max_size >= min(self.width, self.height):
            raise ValueError("targets must fit inside the frame")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "bandwidth" in d:
            d["bandwidth"] = tuple(d["bandwidth"])
        return cls(**d)


@dataclass
class Target:
    x0: float
    y0: float
    vx: float
    vy: float
    w: int
    h: int
    class_id: int
    texture: np.ndarray = field(repr=False)

    def box(self, t: int) -> BoundingBox:
        x, y = self.x0 + self.vx * t, self.y0 + self.vy * t
        return BoundingBox(x, y, x + self.w, y + self.h)


def _smooth_noise(rng, h, w, cells, lo=0, hi=255):
    """Bilinear upsample of a coarse random grid to (h, w, 3)."""
    gh, gw = max(2, cells[0]), max(2, cells[1])
    coarse = rng.uniform(lo, hi, size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _fit_velocity(lo_pos, hi_pos, v, steps):
    """Shrink ``v`` until a start in [lo_pos, hi_pos] keeps the whole path inside."""
    span = hi_pos - lo_pos
    if steps > 0 and abs(v) * steps > span:
        v = math.copysign(span / steps, v)
    return v


def make_targets(spec: SyntheticSpec, rng: np.random.Generator) -> list[Target]:
    targets = []
    steps = spec.n_frames - 1
    for i in range(spec.n_targets):
        w = int(rng.integers(spec.min_size, spec.max_size + 1))
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        speed = float(rng.uniform(spec.min_speed, spec.max_speed))
        ang = float(rng.uniform(0, 2 * math.pi))
        vx = _fit_velocity(0, spec.width - w, speed * math.cos(ang), steps)
        vy = _fit_velocity(0, spec.height - h, speed * math.sin(ang), steps)
        lo_x, hi_x = max(0.0, -vx * steps), min(spec.width - w, spec.width - w - vx * steps)
        lo_y, hi_y = max(0.0, -vy * steps), min(spec.height - h, spec.height - h - vy * steps)
        x0 = float(rng.uniform(lo_x, max(lo_x, hi_x)))
        y0 = float(rng.uniform(lo_y, max(lo_y, hi_y)))
        tex = _smooth_noise(rng, h, w, (spec.texture_cells, spec.texture_cells), 0, 255)
        targets.append(Target(x0, y0, vx, vy, w, h, i % max(1, spec.n_classes), tex.astype(np.uint8)))
    return targets


def render(spec: SyntheticSpec, targets: list[Target], background: np.ndarray, t: int) -> np.ndarray:
    img = background.copy()
    for tg in targets:
        b = tg.box(t)
        x, y = int(round(b.x_min)), int(round(b.y_min))
        xs0, ys0 = max(0, x), max(0, y)
        xs1, ys1 = min(spec.width, x + tg.w), min(spec.height, y + tg.h)
        if xs1 <= xs0 or ys1 <= ys0:
            continue
        img[ys0:ys1, xs0:xs1] = tg.texture[ys0 - y:ys1 - y, xs0 - x:xs1 - x]
    return img


def generate(spec: SyntheticSpec) -> tuple[list[Frame], list[GroundTruth], BandwidthTrace, list[Target]]:
    rng = np.random.default_rng(spec.seed)
    bg = _smooth_noise(rng, spec.height, spec.width, (spec.height // 40, spec.width // 40), 40, 200)
    bg = bg + rng.normal(0, spec.noise, size=bg.shape)
    background = np.clip(bg, 0, 255).astype(np.uint8)
    targets = make_targets(spec, rng)
    frames, gts = [], []
    for t in range(spec.n_frames):
        frames.append(Frame(t, t / spec.fps, render(spec, targets, background, t)))
        boxes = []
        for tg in targets:
            b = tg.box(t)
            if b.inside(spec.width, spec.height):
                boxes.append((b, tg.class_id))
        gts.append(GroundTruth(t, tuple(boxes)))
    duration = spec.n_frames / spec.fps
    n_steps = int(math.ceil(duration)) + 2
    lo, hi = spec.bandwidth
    rates = rng.uniform(lo, hi, size=n_steps) if hi > lo else np.full(n_steps, lo)
    trace = BandwidthTrace(tuple(float(i) for i in range(n_steps)), tuple(float(r) for r in rates),
                           float(n_steps))
    return frames, gts, trace, targets


def write_scenario(spec: SyntheticSpec, out_dir, config: dict | None = None) -> Path:
    """Write PNG frames, annotations.jsonl, trace.csv and a scenario.json pointing at them."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames, gts, trace, _ = generate(spec)
    for f in frames:
        Image.fromarray(f.pixels, "RGB").save(out / "frames" / f"{f.id:06d}.png", optimize=False)
    write_annotations(out / "annotations.jsonl", gts)
    trace.to_csv(out / "trace.csv")
    scenario = {
        "frames": "frames",
        "annotations": "annotations.jsonl",
        "trace": "trace.csv",
        "fps": spec.fps,
        "config": config or {},
        "seed": spec.seed,
    }
    path = out / "scenario.json"
    path.write_text(json.dumps(scenario, indent=2) + "\n")
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    return path
