"""Command-line entry points: run, profile, encode, decode, gen-scenario, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoundingBox, Frame, ScriptedModelConfig, read_annotations, read_frames
from .encode import (WireFormatError, build_config_set, decode_frame, encode_frame, load_config_set,
                     plan_frame, save_config_set)
from .netsim import BandwidthTrace, FidelityParams, make_cloud_model
from .pipeline import PipelineConfig, run_scenario, write_outputs
from .scenario import SyntheticSpec, generate, write_scenario
from .scheduler import embed, pq_build

log = logging.getLogger("cloudeye")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRACE = 3

TOGGLES = {"fast": "fast_inference_on", "mine": "mining_on", "qe": "quality_encode_on"}
DEMO_SCENARIO = Path(__file__).parent / "data" / "demo_scenario.json"


class ScenarioError(Exception):
    """Invalid scenario file; the message is already ``path:line:col: ...``."""


class TraceMissing(Exception):
    pass


def _key_line(text: str, key: str) -> int:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return 1


def _fail(path, text, key, msg):
    raise ScenarioError(f"{path}:{_key_line(text, key) if key else 1}:1: {msg}")


def load_scenario(path, seed: int | None = None, trace_override=None):
    """Resolve a scenario file into (frames, gts, trace, config, config_set)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}:1:1: cannot read scenario: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        _fail(path, text, None, "scenario must be a JSON object")
    known = {"frames", "annotations", "trace", "fps", "config", "seed", "config_set"}
    for key in doc:
        if key not in known:
            _fail(path, text, key, f"unknown key {key!r}")
    if "frames" not in doc:
        _fail(path, text, None, "missing required key 'frames'")
    base = path.parent
    fps = doc.get("fps", 30.0)
    if not isinstance(fps, (int, float)) or fps <= 0:
        _fail(path, text, "fps", "fps must be a positive number")
    run_seed = doc.get("seed", 0) if seed is None else seed
    if not isinstance(run_seed, int):
        _fail(path, text, "seed", "seed must be an integer")

    try:
        config = PipelineConfig.from_dict({**doc.get("config", {}), "seed": run_seed, "fps": float(fps)})
    except (TypeError, ValueError) as exc:
        _fail(path, text, "config", f"bad config: {exc}")

    trace = None
    frames_spec = doc["frames"]
    if isinstance(frames_spec, dict):
        try:
            spec = SyntheticSpec.from_dict({"seed": run_seed, "fps": float(fps), **frames_spec})
        except (TypeError, ValueError) as exc:
            _fail(path, text, "frames", f"bad synthetic spec: {exc}")
        frames, gts, trace, _ = generate(spec)
    elif isinstance(frames_spec, str):
        frames = read_frames(base / frames_spec, fps)
        if not frames:
            _fail(path, text, "frames", f"no PNG frames in {frames_spec}")
        if "annotations" not in doc:
            _fail(path, text, None, "missing required key 'annotations'")
        try:
            gts = read_annotations(base / doc["annotations"])
        except OSError as exc:
            _fail(path, text, "annotations", f"cannot read annotations: {exc.strerror}")
        except ValueError as exc:
            _fail(path, text, "annotations", str(exc))
    else:
        _fail(path, text, "frames", "'frames' must be a directory path or a synthetic spec object")

    trace_path = trace_override or (base / doc["trace"] if "trace" in doc else None)
    if trace_path is not None:
        if not Path(trace_path).is_file():
            raise TraceMissing(f"{trace_path}: bandwidth trace not found")
        try:
            trace = BandwidthTrace.from_csv(trace_path)
        except ValueError as exc:
            raise ScenarioError(f"{trace_path}:1:1: {exc}") from exc
    if trace is None:
        raise TraceMissing(f"{path}: scenario has no 'trace'")

    config_set = None
    if "config_set" in doc:
        try:
            config_set = load_config_set(base / doc["config_set"])
        except OSError as exc:
            _fail(path, text, "config_set", f"cannot read config set: {exc.strerror}")
        except ValueError as exc:
            _fail(path, text, "config_set", str(exc))
    return frames, gts, trace, config, config_set


def _apply_toggles(config: PipelineConfig, toggles) -> PipelineConfig:
    for item in toggles or ():
        name, _, value = item.partition("=")
        if name not in TOGGLES or value not in ("on", "off"):
            raise ValueError(f"bad --toggle {item!r}; expected fast|mine|qe=on|off")
        config = replace(config, **{TOGGLES[name]: value == "on"})
    return config


# -- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    frames, gts, trace, config, config_set = load_scenario(args.scenario, args.seed, args.trace)
    config = _apply_toggles(config, args.toggle)
    result = run_scenario(frames, gts, trace, config, config_set, collect_traces=True)
    write_outputs(result, args.out)
    print(json.dumps({"mAP": result.summary["mAP"], "frames": result.summary["frames"],
                      "bytes_total": result.summary["bytes_total"]}))
    return EXIT_OK


def _parse_q_list(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        roi, _, bg = part.partition(":")
        q_roi = int(roi)
        q_bg = int(bg) if bg else 20
        out.append((q_roi, q_bg))
    return out


def _load_corpus(path, fps: float = 30.0):
    path = Path(path)
    if path.is_file():
        frames, gts, _, _, _ = load_scenario(path)
        return frames, gts
    frames = read_frames(path / "frames", fps) if (path / "frames").is_dir() else []
    ann = path / "annotations.jsonl"
    gts = read_annotations(ann) if ann.is_file() else []
    return frames, gts


def cmd_profile(args) -> int:
    frames, gts = _load_corpus(args.corpus)
    if args.frames:
        frames = frames[:args.frames]
    if not frames or not any(g.boxes for g in gts):
        print(f"error: corpus {args.corpus} has no annotated frames", file=sys.stderr)
        return EXIT_USAGE
    cloud_cfg = ScriptedModelConfig(miss_rate_small=0.0, miss_rate_large=0.0, box_jitter_sigma=0.3,
                                    confidence_noise_sigma=0.02, rng_seed=args.seed)
    report = build_config_set(frames, gts, args.k_list, args.q_list, make_cloud_model(cloud_cfg, FidelityParams()),
                              embed, timing=args.timing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = save_config_set(out, report.entries)
    if report.entries:
        Path(str(out) + ".pq").write_bytes(pq_build(report.entries, seed=args.seed).to_bytes())
    print(f"{count} entries written to {out} ({report.skipped} skipped)")
    return EXIT_OK


def _boxes_from(args, frame_id: int) -> list[BoundingBox]:
    if args.boxes:
        boxes = []
        for part in args.boxes.split(";"):
            x0, y0, x1, y1 = (float(v) for v in part.split(","))
            boxes.append(BoundingBox(x0, y0, x1, y1))
        return boxes
    if args.annotations:
        for gt in read_annotations(args.annotations):
            if gt.frame_id == frame_id:
                return [b for b, _ in gt.boxes]
    return []


def cmd_encode(args) -> int:
    with Image.open(args.input) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    frame = Frame(args.frame_id, 0.0, px)
    boxes = _boxes_from(args, args.frame_id)
    q_roi, q_bg = _parse_q_list(args.q)[0]
    plan = plan_frame(boxes, args.k, args.padding, frame.width, frame.height, q_roi, q_bg)
    blob = encode_frame(frame, plan).to_bytes()
    Path(args.out).write_bytes(blob)
    print(f"{len(blob)} bytes, {len(plan.rois)} ROIs")
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        frame = decode_frame(Path(args.input).read_bytes())
    except WireFormatError as exc:
        print(f"error: {args.input}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    Image.fromarray(frame.pixels, "RGB").save(args.out)
    print(f"frame {frame.id} {frame.width}x{frame.height}")
    return EXIT_OK


def cmd_gen_scenario(args) -> int:
    if args.frames < 1:
        print("error: --frames must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = SyntheticSpec(n_frames=args.frames, n_targets=args.targets, width=args.width, height=args.height,
                             min_size=args.min_size, max_size=args.max_size, min_speed=args.min_speed,
                             max_speed=args.max_speed, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    path = write_scenario(spec, args.out)
    print(path)
    return EXIT_OK


def _sweep_job(job):
    """Run one sweep cell in its own output directory; returns long-format rows."""
    run_id, scenario, seed, toggles, bw_scale, out = job
    frames, gts, trace, config, config_set = load_scenario(scenario, seed)
    config = replace(config, **{TOGGLES[k]: v for k, v in toggles.items()})
    trace = BandwidthTrace(trace.times, tuple(r * bw_scale for r in trace.rates), trace.horizon)
    result = run_scenario(frames, gts, trace, config, config_set)
    write_outputs(result, Path(out) / run_id)
    keys = ("mAP", "latency_mean_s", "latency_p95_s", "bytes_total", "proposals_per_frame", "upload_count",
            "mined_total")
    base = [run_id, int(toggles["fast"]), int(toggles["mine"]), int(toggles["qe"]), bw_scale]
    return [base + [k, result.summary[k]] for k in keys]


def cmd_sweep(args) -> int:
    # validate once up front so a bad scenario fails before any worker starts
    load_scenario(args.scenario, args.seed, None)
    fixed = {}
    for item in args.toggle or ():
        name, _, value = item.partition("=")
        if name not in TOGGLES or value not in ("on", "off"):
            raise ValueError(f"bad --toggle {item!r}; expected fast|mine|qe=on|off")
        fixed[name] = value == "on"
    axes = [[fixed[n]] if n in fixed else [True, False] for n in TOGGLES]
    jobs = []
    for combo in itertools.product(*axes):
        toggles = dict(zip(TOGGLES, combo))
        for bw in args.bw_scale:
            run_id = "fast{}_mine{}_qe{}_bw{:g}".format(*(int(v) for v in combo), bw)
            jobs.append((run_id, str(args.scenario), args.seed, toggles, bw, str(args.out)))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    with open(Path(args.out) / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "fast", "mine", "qe", "bw_scale", "metric", "value"])
        for rows in results:
            writer.writerows(rows)
    print(f"{len(jobs)} runs written to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudeye", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario through the pipeline")
    run.add_argument("--scenario", default=str(DEMO_SCENARIO))
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--trace", help="override the scenario's bandwidth trace CSV")
    run.add_argument("--toggle", action="append", metavar="NAME=on|off")
    run.set_defaults(func=cmd_run)

    prof = sub.add_parser("profile", help="build a configuration set from an annotated corpus")
    prof.add_argument("--corpus", required=True, help="scenario.json or a directory with frames/ and annotations.jsonl")
    prof.add_argument("--k-list", type=_int_list, default=[1, 2, 3, 4])
    prof.add_argument("--q-list", type=_parse_q_list, default=[(90, 20), (70, 20), (90, 40), (50, 10)],
                      help="comma list of q_roi:q_bg pairs")
    prof.add_argument("--out", required=True)
    prof.add_argument("--frames", type=int, help="profile only the first N frames")
    prof.add_argument("--seed", type=int, default=0)
    prof.add_argument("--timing", choices=["model", "wall"], default="model")
    prof.set_defaults(func=cmd_profile)

    enc = sub.add_parser("encode", help="encode one PNG with ROI-differentiated quality")
    enc.add_argument("--in", dest="input", required=True)
    enc.add_argument("--out", required=True)
    enc.add_argument("--boxes", help="semicolon list of x0,y0,x1,y1")
    enc.add_argument("--annotations", help="annotations.jsonl to take boxes from")
    enc.add_argument("--frame-id", type=int, default=0)
    enc.add_argument("--k", type=int, default=2)
    enc.add_argument("--q", default="90:20", help="q_roi:q_bg")
    enc.add_argument("--padding", type=float, default=16.0)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="decode a wire-format payload to PNG")
    dec.add_argument("--in", dest="input", required=True)
    dec.add_argument("--out", required=True)
    dec.set_defaults(func=cmd_decode)

    gen = sub.add_parser("gen-scenario", help="write a synthetic moving-target scenario")
    gen.add_argument("--out", required=True)
    gen.add_argument("--frames", type=int, default=60)
    gen.add_argument("--targets", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--width", type=int, default=320)
    gen.add_argument("--height", type=int, default=240)
    gen.add_argument("--min-size", type=int, default=16)
    gen.add_argument("--max-size", type=int, default=28)
    gen.add_argument("--min-speed", type=float, default=0.5)
    gen.add_argument("--max-speed", type=float, default=2.0)
    gen.set_defaults(func=cmd_gen_scenario)

    sw = sub.add_parser("sweep", help="ablation grid over toggles and bandwidth scales")
    sw.add_argument("--scenario", default=str(DEMO_SCENARIO))
    sw.add_argument("--out", required=True)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--toggle", action="append", metavar="NAME=on|off", help="pin a toggle instead of sweeping it")
    sw.add_argument("--bw-scale", type=_float_list, default=[1.0])
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)
    return p


def _setup_logging():
    level = os.environ.get("CLOUDEYE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
