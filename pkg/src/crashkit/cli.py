"""Command-line entry point: ``crashkit <subcommand> ...``.

Exit codes: 0 success, 1 domain violations (``validate`` only), 2 input errors.
Options can come from a JSON config file (``--config`` or ``$CRASHKIT_CONFIG``);
flags given on the command line win over config values.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._io import InputError, atomic_write, list_images, read_image
from .annotation import (
    AnnotationError, CrashType, VideoMetadata, parse_annotation, serialize_annotation,
    validate_annotation,
)
from .conditioning import (
    NUM_FRAMES, PREDICTION_PREFIXES, ConditionSet, CurriculumState, apply_mask, plan_for_task,
    sample_mask_plan,
)
from .curation import FrameLabels, UpsizingFilter, segment_clips, to_grayscale
from .diffusion.guidance import GuidanceSchedule
from .diffusion.sampler import SamplerConfig, run_manifest, sample, trajectory_csv
from .diffusion.schedule import make_schedule
from .diffusion.toy import GaussianMixtureDenoiser
from .fusion import FusionConfig, fuse, read_detections, read_masks
from .metrics import video_metric
from .raster import DEFAULT_SIZE, rasterize_sequence, write_pngs

logger = logging.getLogger("crashkit")

CONFIG_ENV = "CRASHKIT_CONFIG"
EXIT_OK, EXIT_VIOLATIONS, EXIT_INPUT = 0, 1, 2
# positional inputs that may instead come from the config file
REQUIRED_INPUT = {"filter-quality": "frames", "fuse-tracks": "detections", "rasterize": "annotation"}

METRICS_EPILOG = """\
Evaluation protocols for distribution-level video metrics (computed by
external tools, not here):

  condition-aligned  each generated clip is compared with the real clip
                     whose first frame, boxes and crash type it was
                     conditioned on, so both sets share their conditions.
  random-gt          generated clips are compared with an equally sized,
                     randomly drawn set of real clips, ignoring which
                     conditions produced each generated clip.

This command reports per-frame PSNR or SSIM between two frame directories
paired by sorted filename, plus the video mean. Identical frames give an
infinite PSNR; they are written as "inf" and left out of the mean.
"""


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(str(exc), path) from None
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON config ({exc.msg})", path, exc.lineno) from None
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object", path)
    return cfg


def _setting(args, cfg, name, default=None):
    """Flag value if given, else config value (top-level or under the subcommand), else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    section = cfg.get(args.command, {})
    if isinstance(section, dict) and name in section:
        return section[name]
    return cfg.get(name, default)


def _write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_annotation(path, validate=True):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(str(exc), path) from None
    return parse_annotation(data, validate=validate)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# --- subcommands ----------------------------------------------------------------

def cmd_filter_quality(args, cfg):
    frames_dir = _setting(args, cfg, "frames")
    threshold = _setting(args, cfg, "threshold")
    paths = list_images(frames_dir)
    if not paths:
        logger.warning("no images found in %s", frames_dir)
    filt = UpsizingFilter(threshold=threshold)

    def score(p):
        return filt.report(to_grayscale(read_image(p)))

    reports = _map(score, paths, args.workers)
    rows = ["frame,high_freq_energy,normalized_energy,radius,factor,pass"]
    for p, r in zip(paths, reports):
        ok = threshold is None or r.factor >= threshold
        rows.append(f"{p.name},{r.high_freq_energy!r},{r.normalized_energy!r},{r.radius},{r.factor!r},{int(ok)}")
    text = "\n".join(rows) + "\n"
    if args.output:
        atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fuse_tracks(args, cfg):
    detections = read_detections(_setting(args, cfg, "detections"))
    masks_path = _setting(args, cfg, "masks")
    masks = read_masks(masks_path) if masks_path else []
    try:
        fcfg = FusionConfig(**{**cfg.get("fusion", {}), **cfg.get("fuse-tracks", {}).get("fusion", {})})
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad fusion config: {exc}") from None
    num_frames = _setting(args, cfg, "num_frames")
    meta = VideoMetadata(bool(_setting(args, cfg, "ego_involved", False)), _setting(args, cfg, "accident_type"))
    try:
        ann = fuse(detections, masks, fcfg, video_source=_setting(args, cfg, "video_source", "video.mp4"),
                   metadata=meta, num_frames=num_frames)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    violations = validate_annotation(ann)
    if violations:  # fusion output must always be valid
        raise RuntimeError(f"fused annotation failed validation: {violations[0]}")
    atomic_write(args.output, serialize_annotation(ann))
    _write_json(str(args.output) + ".manifest.json", {
        "command": "fuse-tracks", "seed": args.seed, "fusion": fcfg.to_dict(),
        "detections": len(detections), "masks": len(masks), "frames": len(ann),
        "version": __version__,
    })
    logger.info("wrote %d frames to %s", len(ann), args.output)
    return EXIT_OK


def cmd_rasterize(args, cfg):
    ann = _read_annotation(_setting(args, cfg, "annotation"))
    width = int(_setting(args, cfg, "width", DEFAULT_SIZE[0]))
    height = int(_setting(args, cfg, "height", DEFAULT_SIZE[1]))
    frames = rasterize_sequence(ann, width, height)
    paths = write_pngs(frames, args.out_dir, ann.stem)
    logger.info("wrote %d control frames to %s", len(paths), args.out_dir)
    return EXIT_OK


def cmd_segment(args, cfg):
    total = _setting(args, cfg, "total_frames")
    if total is None:
        raise InputError("--total-frames is required")
    labels = None
    path = _setting(args, cfg, "labels")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                labels = FrameLabels.from_dict(json.load(fh))
        except OSError as exc:
            raise InputError(str(exc), path) from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"bad labels file ({exc})", path) from None
    try:
        clips = segment_clips(int(total), labels)
    except ValueError as exc:
        raise InputError(str(exc), path) from None
    text = "".join(c.to_json() + "\n" for c in clips)
    if args.output:
        atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_mask_plan(args, cfg):
    rng = np.random.default_rng(args.seed)
    curr = CurriculumState(float(_setting(args, cfg, "progress", 1.0)))
    n = int(_setting(args, cfg, "count", 1))
    text = "".join(sample_mask_plan(rng, NUM_FRAMES, curr).to_json() + "\n" for _ in range(n))
    if args.output:
        atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def toy_models(schedule, spread=2.0, sigma=0.4):
    """Base and conditioned 2-D mixture denoisers, one mode per crash type.

    The base model ignores every condition. The conditioned model puts 80% of
    its mass on the mode of the requested crash type and follows box
    centroids.
    """
    angles = 2 * np.pi * np.arange(len(CrashType)) / len(CrashType)
    means = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    k = len(CrashType)
    uniform = np.full(k, 1.0 / k)
    crash_weights = {}
    for c in CrashType:
        w = np.full(k, 0.2 / (k - 1))
        w[int(c)] = 0.8
        crash_weights[int(c)] = w
    covs = np.full(k, sigma ** 2)
    base = GaussianMixtureDenoiser(uniform, means, covs, schedule)
    cond = GaussianMixtureDenoiser(uniform, means, covs, schedule, crash_weights, box_gain=2.0)
    return cond, base


def cmd_sample(args, cfg):
    mode = _setting(args, cfg, "mode", "reconstruction")
    prefix = _setting(args, cfg, "prefix")
    crash_types = _setting(args, cfg, "crash_type") or [int(CrashType.VEHICLE_VEHICLE)]
    if isinstance(crash_types, int):
        crash_types = [crash_types]
    try:
        plan = plan_for_task(mode, None if prefix is None else int(prefix))
        crash_types = [CrashType(int(c)) for c in crash_types]
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if mode == "counterfactual" and len(crash_types) < 2:
        logger.warning("counterfactual mode with a single crash type")

    ann_path = _setting(args, cfg, "annotation")
    if ann_path:
        ann = _read_annotation(ann_path)
        if len(ann) < NUM_FRAMES:
            raise InputError(f"annotation has {len(ann)} frames, need {NUM_FRAMES}", ann_path)
        boxes = [fr.labels for fr in ann.data[:NUM_FRAMES]]
    else:
        boxes = [()] * NUM_FRAMES

    sched = make_schedule(_setting(args, cfg, "schedule", "linear"), int(_setting(args, cfg, "T", 1000)))
    gb = _setting(args, cfg, "gamma_b", [1.0, 3.0])
    gt = _setting(args, cfg, "gamma_t", [6.0, 12.0])
    scfg = SamplerConfig(
        num_steps=int(_setting(args, cfg, "steps", 30)),
        eta=float(_setting(args, cfg, "eta", 0.0)),
        schedule=sched,
        guidance=GuidanceSchedule(tuple(gb), tuple(gt)),
        spacing=_setting(args, cfg, "spacing", "uniform"),
    )
    n = int(_setting(args, cfg, "n_samples", 16))
    cond_model, base_model = toy_models(sched)
    out_dir = Path(args.out_dir)
    runs = []
    for ct in crash_types:
        cond = apply_mask(ConditionSet.full("image", boxes, ct), plan)
        # fresh generator per run: identical x_T across crash types
        result = sample(cond_model, base_model, cond, scfg, np.random.default_rng(args.seed), n)
        name = f"trajectory_type{int(ct)}.csv"
        atomic_write(out_dir / name, trajectory_csv(result))
        runs.append({"crash_type": int(ct), "trajectory": name,
                     "mean_sample": result.samples.mean(axis=0).tolist()})
        base_manifest = run_manifest(scfg, args.seed, result)
    manifest = {**base_manifest, "command": "sample", "mode": mode, "box_prefix": plan.k,
                "runs": runs, "version": __version__}
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK


def cmd_metrics(args, cfg):
    pa, pb = list_images(args.frames_a), list_images(args.frames_b)
    if len(pa) != len(pb):
        raise InputError(f"frame count mismatch: {len(pa)} vs {len(pb)}")
    fa = _map(read_image, pa, args.workers)
    fb = _map(read_image, pb, args.workers)
    try:
        report = video_metric(fa, fb, _setting(args, cfg, "metric", "psnr"))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    text = report.to_csv()
    if args.output:
        atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args, cfg):
    ann = _read_annotation(args.annotation, validate=False)
    violations = validate_annotation(ann)
    for v in violations:
        print(v)
    if violations:
        print(f"{len(violations)} violation(s)")
        return EXIT_VIOLATIONS
    print("ok")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _crash_type_arg(s):
    v = int(s)
    if v not in range(len(CrashType)):
        raise argparse.ArgumentTypeError(f"crash type must be 0..{len(CrashType) - 1}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="64-bit seed recorded in manifests")
    common.add_argument("--workers", type=int, default=1, help="worker threads for per-frame work")
    common.add_argument("--config", default=None,
                        help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="crashkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("filter-quality", parents=[common], help="upsizing-factor table for a frame directory")
    s.add_argument("frames", nargs="?")
    s.add_argument("--threshold", type=float, help="pass when factor >= threshold; omit to only report")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_filter_quality)

    s = sub.add_parser("fuse-tracks", parents=[common], help="fuse detections and masks into an annotation")
    s.add_argument("detections", nargs="?")
    s.add_argument("--masks")
    s.add_argument("--num-frames", dest="num_frames", type=int)
    s.add_argument("--video-source", dest="video_source")
    s.add_argument("--accident-type", dest="accident_type", type=int)
    s.add_argument("--ego-involved", dest="ego_involved", action="store_true", default=None)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_fuse_tracks)

    s = sub.add_parser("rasterize", parents=[common], help="render control frames as PNGs")
    s.add_argument("annotation", nargs="?")
    s.add_argument("out_dir")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("segment", parents=[common], help="choose 25-frame clip windows")
    s.add_argument("--labels", help="JSON with accident_frame, abnormal_start, abnormal_end")
    s.add_argument("--total-frames", dest="total_frames", type=int)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("mask-plan", parents=[common], help="draw training-time mask plans as JSON lines")
    s.add_argument("--count", type=int)
    s.add_argument("--progress", type=float, help="curriculum progress in [0, 1]")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_mask_plan)

    s = sub.add_parser("sample", parents=[common], help="guided DDIM sampling with toy denoisers")
    s.add_argument("out_dir")
    s.add_argument("--mode", choices=("reconstruction", "prediction", "counterfactual"))
    s.add_argument("--prefix", type=int, choices=PREDICTION_PREFIXES, help="box frames kept")
    s.add_argument("--crash-type", dest="crash_type", type=_crash_type_arg, action="append",
                   help="repeat to sample several crash types from the same noise")
    s.add_argument("--annotation", help="annotation supplying the box frames")
    s.add_argument("--steps", type=int)
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--spacing", choices=("uniform", "angle"))
    s.add_argument("--schedule", choices=("linear", "cosine"))
    s.add_argument("--gamma-b", dest="gamma_b", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--gamma-t", dest="gamma_t", type=float, nargs=2, metavar=("LO", "HI"))
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("metrics", parents=[common], help="per-frame PSNR/SSIM between two frame directories",
                       epilog=METRICS_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("frames_a")
    s.add_argument("frames_b")
    s.add_argument("--metric", choices=("psnr", "ssim"))
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("validate", parents=[common], help="check an annotation file")
    s.add_argument("annotation")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config or os.environ.get(CONFIG_ENV))
        req = REQUIRED_INPUT.get(args.command)
        if req and _setting(args, cfg, req) is None:
            raise InputError(f"missing required input '{req}'")
        return args.func(args, cfg)
    except (InputError, AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
