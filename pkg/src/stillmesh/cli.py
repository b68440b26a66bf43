"""Command-line entry point: ``stillmesh gen | run | eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .bodymodel import ModelError
from .geometry import CameraIntrinsics, GeometryError
from .metrics import MetricsError, evaluate, write_per_frame_csv
from .pipeline import PRESETS, PipelineError, run_pipeline
from .rigidfit import RigidFitConfig, RigidFitError
from .stabilize import StabilizeError, StabilizerConfig
from .synthgen import ScenarioSpec, generate_scenario, make_procedural_body, standard_noise, write_bundle

log = logging.getLogger("stillmesh")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# loading helpers

def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def load_intrinsics(bundle: Path, override=None) -> CameraIntrinsics:
    src = override if override is not None else bundle / "scenario.json"
    data = _load_json(src)
    try:
        if override is not None:
            return CameraIntrinsics.from_dict(data)
        if "intrinsics" in data:
            return CameraIntrinsics.from_dict(data["intrinsics"])
        return ScenarioSpec.from_dict(data).intrinsics()
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{src}: bad camera intrinsics ({exc})") from None


def load_masks(frames, base: Path, subdir: str | None = None):
    """One mask per frame; ``None`` where the record names no mask.

    With ``subdir`` the record's own path is ignored and
    ``subdir/NNNNNN.pgm`` is read instead.
    """
    masks = []
    for f in frames:
        if subdir is not None:
            path = base / subdir / f"{f.index:06d}.pgm"
        elif f.mask:
            path = base / f.mask
        else:
            masks.append(None)
            continue
        if not path.exists():
            raise InputError(f"frame {f.index}: mask file {path} not found")
        masks.append(io.read_pgm(path))
    return masks


def _split_config(path):
    if path is None:
        return StabilizerConfig(), RigidFitConfig()
    data = io.load_config(path)
    try:
        return StabilizerConfig.from_dict(data), RigidFitConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    if args.spec:
        spec = ScenarioSpec.from_dict(_load_json(args.spec))
    else:
        spec = ScenarioSpec()
        if args.noise == "standard":
            spec.noise = standard_noise(spec.n_frames)
    if args.seed is not None:
        spec.seed = args.seed
    if args.frames is not None:
        spec.n_frames = args.frames
        if not args.spec and args.noise == "standard":
            spec.noise = standard_noise(spec.n_frames)
    model = make_procedural_body()
    t0 = time.time()
    bundle = generate_scenario(spec, model)
    out = write_bundle(bundle, model, args.out)
    counts: dict[str, int] = {}
    for entry in bundle.injection_log:
        for kind in entry["types"]:
            counts[kind] = counts.get(kind, 0) + 1
    print(f"bundle {out}: {spec.n_frames} frames, {spec.width}x{spec.height}, seed {spec.seed}")
    print("corruptions: " + (", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none"))
    log.info("generated in %.1fs", time.time() - t0)
    return EXIT_OK


def cmd_run(args) -> int:
    bundle = Path(args.bundle)
    frames_path = Path(args.frames) if args.frames else bundle / "pred_frames.jsonl"
    model = io.load_model(args.model or bundle / "model.json")
    K = load_intrinsics(bundle, args.intrinsics)
    frames = io.read_frames(frames_path)
    masks = load_masks(frames, frames_path.parent)
    stab_cfg, fit_cfg = _split_config(args.config)
    t0 = time.time()
    batches = None
    if args.batch:
        n = len(frames)
        batches = [min(args.batch, n - s) for s in range(0, n, args.batch)]
    corrected, diag = run_pipeline(frames, masks, model, K, args.preset, stab_cfg, fit_cfg, batches)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_frames(out / "corrected_frames.jsonl", corrected)
    report = diag.to_dict()
    report["runtime_s"] = round(time.time() - t0, 3)
    (out / "fit_report.json").write_text(json.dumps(report, indent=1) + "\n")
    raw = [v for v in report["raw_iou"] if v is not None]
    print(f"preset {args.preset}: {len(corrected)} frames, raw mean IoU "
          f"{np.mean(raw) if raw else float('nan'):.3f}, {report['n_fallback']} fallback frames")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = Path(args.bundle)
    model = io.load_model(bundle / "model.json")
    K = load_intrinsics(bundle)
    frames = io.read_frames(args.corrected)
    subdir = "gt_masks" if args.masks == "gt" else "masks"
    masks = load_masks(frames, bundle, subdir)
    gt_vertices = None
    vpath = bundle / "gt_vertices.f32"
    if vpath.exists():
        gt_vertices = io.read_vertices(vpath)
        if gt_vertices.shape[0] != len(frames):
            raise InputError(f"{vpath}: {gt_vertices.shape[0]} frames, corrected has {len(frames)}")
    report, table = evaluate(frames, masks, model, K, args.lag, gt_vertices)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    write_per_frame_csv(out / "per_frame.csv", table)
    summary = {k: v for k, v in report.to_dict().items() if k != "per_frame_iou"}
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stillmesh", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic orbit bundle")
    g.add_argument("spec", nargs="?", help="scenario JSON (defaults to the built-in orbit)")
    g.add_argument("--noise", choices=("clean", "standard"), default="standard",
                   help="corruption recipe when no spec file is given")
    g.add_argument("--seed", type=int)
    g.add_argument("--frames", type=int, help="override the frame count")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="correct a prediction sequence")
    r.add_argument("bundle", help="bundle directory")
    r.add_argument("--preset", choices=PRESETS, default="F")
    r.add_argument("--config", help="JSON of stabilizer and rigid-fit settings")
    r.add_argument("--frames", help="prediction JSONL (default: BUNDLE/pred_frames.jsonl)")
    r.add_argument("--model", help="body model JSON (default: BUNDLE/model.json)")
    r.add_argument("--intrinsics", help="camera JSON with fx, fy, cx, cy, width, height")
    r.add_argument("--batch", type=int, help="feed the stabilizer in batches of this size")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a corrected sequence against a bundle")
    e.add_argument("corrected", help="corrected_frames.jsonl")
    e.add_argument("bundle", help="bundle directory")
    e.add_argument("--lag", type=int, default=20)
    e.add_argument("--masks", choices=("gt", "observed"), default="gt",
                   help="score against ground-truth or observed masks")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


INPUT_ERRORS = (InputError, io.FormatError, ModelError, PipelineError, FileNotFoundError,
                KeyError, TypeError)
NUMERIC_ERRORS = (RigidFitError, StabilizeError, GeometryError, MetricsError,
                  FloatingPointError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # remaining validation failures (bad spec fields, config values)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
