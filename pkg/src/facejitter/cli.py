"""Command-line entry point: ``facejitter <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags or unreadable inputs),
2 batch-level failure (every record of a ``jitter`` batch failed).
Every output file gets a ``<name>.meta.json`` sidecar with the seed, the
config hash and the input ids needed to regenerate it.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import (BatchFailure, DatasetManifest, augment_batch, build_training_schedule,
                      generate_jitters, load_output_manifest)
from .config import ConfigError, RunConfig
from .fitting import FitError, FitResult, fit, fit_independent, load_landmarks
from .imaging import montage, read_png, write_float_png, write_png
from .modelio import ModelFormatError, load_model, model_to_json, save_model
from .population import build_synthetic_model
from .relight import EmptyFieldError, LightingSpec, relight
from .render import PoseSpec, render_pose, write_depth

log = logging.getLogger("facejitter")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str, n: int) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _size(text: str) -> tuple[int, int]:
    try:
        parts = [int(x) for x in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or WxH, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"size must be N or WxH, got {text!r}")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    # shared options are accepted before or after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config (strict keys)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="worker processes (default: FACEJITTER_WORKERS or CPU count)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    p = _Parser(prog="facejitter", description=__doc__.split("\n")[0], parents=[common])
    p.add_argument("--version", action="version", version=f"facejitter {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    s = sub.add_parser("synth-model", help="build a model from a procedural head population")
    s.add_argument("--count", type=int, default=200, help="subject heads")
    s.add_argument("--expression-count", type=int, default=60)
    s.add_argument("--rank-subject", type=int, default=50)
    s.add_argument("--rank-expression", type=int, default=20)
    s.add_argument("--json", action="store_true", help="also write a JSON text export")
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit", help="fit shape and cameras to landmark files")
    s.add_argument("--model", required=True)
    s.add_argument("--landmarks", required=True, help="JSON landmark file (one record per image)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--joint", dest="joint", action="store_true", default=True)
    g.add_argument("--independent", dest="joint", action="store_false")
    s.add_argument("--out", required=True, help="fit JSON (independent mode: one file per image, suffixed)")

    for name, helptext in (("render-pose", "render the fitted head at a new pose"),
                           ("relight", "relight the face with a directional light"),
                           ("preview", "montage of the original and its jitters")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--image", required=True)
        s.add_argument("--fit", required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--image-id", help="image within a multi-image fit (default: the first)")
        s.add_argument("--out", required=True)
        if name == "render-pose":
            s.add_argument("--yaw", type=float, default=0.0, help="degrees")
            s.add_argument("--pitch", type=float, default=0.0, help="degrees")
            s.add_argument("--roll", type=float, default=0.0, help="degrees")
            s.add_argument("--absolute", action="store_true", help="angles are absolute, not deltas")
            s.add_argument("--size", type=_size, help="output N or WxH (default: source size)")
            s.add_argument("--emit-layers", action="store_true", help="also write face/alpha/background/depth")
        elif name == "relight":
            s.add_argument("--light-dir", type=lambda t: _floats(t, 3), default=(0.0, 0.0, -1.0),
                           help="travel direction x,y,z in camera space (z < 0 faces the camera)")
            s.add_argument("--ambient", type=float, default=0.5)
            s.add_argument("--directional", type=float, default=0.5)
            s.add_argument("--emit-modulation", action="store_true")

    s = sub.add_parser("jitter", help="batch-render pose and lighting jitters for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("schedule", help="training schedule from a jitter output manifest")
    s.add_argument("--manifest", required=True, help="variants.jsonl written by `jitter`")
    s.add_argument("--strategy", choices=("random", "dual"), required=True)
    s.add_argument("--p", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--out", required=True)
    return p


def _meta(path: Path, cfg: RunConfig, command: str, inputs: dict, **extra) -> None:
    meta = {"command": command, "version": __version__, "seed": cfg.seed,
            "config_hash": cfg.digest(), "config": cfg.to_dict(), "inputs": inputs, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _out(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_fit_image(args):
    model = load_model(args.model)
    fit_result = FitResult.load(args.fit)
    image = read_png(args.image)
    idx = fit_result.image(args.image_id)[0] if args.image_id else 0
    if fit_result.images[idx].camera is None:
        raise UsageError(f"{args.fit}: image {fit_result.images[idx].image_id!r} has no camera")
    return model, fit_result, image, idx


def _cmd_synth_model(args, cfg):
    model = build_synthetic_model(cfg.seed, args.count, args.expression_count,
                                  args.rank_subject, args.rank_expression)
    out = _out(args.out)
    save_model(model, out)
    _meta(out, cfg, "synth-model", {}, counts=[args.count, args.expression_count],
          ranks=[args.rank_subject, args.rank_expression])
    if args.json:
        Path(str(out) + ".json").write_text(model_to_json(model))
    return 0


def _cmd_fit(args, cfg):
    model = load_model(args.model)
    sets = load_landmarks(args.landmarks)
    ids = [s.image_id for s in sets]
    out = _out(args.out)
    if args.joint:
        result = fit(sets, model, cfg.fit)
        result.save(out)
        _meta(out, cfg, "fit", {"landmarks": args.landmarks, "images": ids}, joint=True,
              converged=result.converged)
        if not result.converged:
            log.warning("fit did not converge within %d iterations", cfg.fit.max_iterations)
    else:
        for ls, result in zip(sets, fit_independent(sets, model, cfg.fit)):
            path = out.with_name(f"{out.stem}.{ls.image_id}{out.suffix}")
            result.save(path)
            _meta(path, cfg, "fit", {"landmarks": args.landmarks, "images": [ls.image_id]},
                  joint=False, converged=result.converged)
    return 0


def _cmd_render_pose(args, cfg):
    model, fit_result, image, idx = _load_fit_image(args)
    cam = fit_result.images[idx].camera
    W, H = args.size or (image.shape[1], image.shape[0])
    angles = [math.radians(a) for a in (args.yaw, args.pitch, args.roll)]
    pose = (PoseSpec(*angles, W, H) if args.absolute else PoseSpec.from_source(cam, W, H, *angles))
    layers = render_pose(image, fit_result, model, pose, idx, layers=True)
    out = _out(args.out)
    write_png(out, layers.image)
    inputs = {"image": args.image, "fit": args.fit, "image_id": fit_result.images[idx].image_id}
    _meta(out, cfg, "render-pose", inputs, pose=pose.to_dict())
    if args.emit_layers:
        stem = out.with_suffix("")
        write_png(f"{stem}.face.png", layers.face)
        write_png(f"{stem}.alpha.png", layers.alpha)
        write_png(f"{stem}.background.png", layers.background)
        np.save(f"{stem}.alpha.npy", layers.alpha)
        write_depth(f"{stem}.depth.fjd", layers.pixel_map.depth)
        for suffix in (".face.png", ".alpha.png", ".background.png", ".alpha.npy", ".depth.fjd"):
            _meta(Path(f"{stem}{suffix}"), cfg, "render-pose", inputs, pose=pose.to_dict())
    return 0


def _cmd_relight(args, cfg):
    model, fit_result, image, idx = _load_fit_image(args)
    try:
        light = LightingSpec.toward(args.light_dir, args.ambient, args.directional)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fields: list = []
    result = relight(image, fit_result, model, light, idx, field_out=fields)
    out = _out(args.out)
    write_png(out, result)
    inputs = {"image": args.image, "fit": args.fit, "image_id": fit_result.images[idx].image_id}
    _meta(out, cfg, "relight", inputs, lighting=light.to_dict())
    if args.emit_modulation:
        stem = out.with_suffix("")
        np.save(f"{stem}.modulation.npy", fields[0].values)
        write_float_png(f"{stem}.modulation.png", fields[0].values)
        for suffix in (".modulation.npy", ".modulation.png"):
            _meta(Path(f"{stem}{suffix}"), cfg, "relight", inputs, lighting=light.to_dict())
    return 0


def _cmd_preview(args, cfg):
    model, fit_result, image, idx = _load_fit_image(args)
    rid = fit_result.images[idx].image_id
    jit = generate_jitters(rid, image, fit_result, model, cfg.jitter, cfg.seed, idx)
    if jit.failed:
        raise UsageError(f"cannot render jitters: {jit.reason}")
    out = _out(args.out)
    write_png(out, montage([image] + [v.image for v in jit.variants], columns=1 + cfg.jitter.n_pose))
    _meta(out, cfg, "preview", {"image": args.image, "fit": args.fit, "image_id": rid},
          variants=[v.metadata() for v in jit.variants])
    return 0


def _cmd_jitter(args, cfg):
    model = load_model(args.model)
    manifest = DatasetManifest.load(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_inputs = {"manifest": args.manifest, "records": [r.record_id for r in manifest.records]}
    try:
        results = augment_batch(manifest, model, cfg.jitter, cfg.seed, out_dir, cfg.workers, cfg.fit)
    except BatchFailure as exc:
        _meta(out_dir / "variants.jsonl", cfg, "jitter", meta_inputs, status="failed")
        print(f"facejitter jitter: {exc}", file=sys.stderr)
        return 2
    _meta(out_dir / "variants.jsonl", cfg, "jitter", meta_inputs, status="ok")
    for r in results:
        if r.failed:
            print(f"facejitter jitter: record {r.record_id}: {r.reason}", file=sys.stderr)
    return 0


def _cmd_schedule(args, cfg):
    try:
        records = load_output_manifest(args.manifest)
        schedule = build_training_schedule(records, args.strategy, args.p, args.epochs, cfg.seed)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"schedule: {exc}") from None
    out = _out(args.out)
    schedule.save(out)
    _meta(out, cfg, "schedule", {"manifest": args.manifest}, schedule=schedule.metadata())
    return 0


_COMMANDS = {"synth-model": _cmd_synth_model, "fit": _cmd_fit, "render-pose": _cmd_render_pose,
             "relight": _cmd_relight, "preview": _cmd_preview, "jitter": _cmd_jitter,
             "schedule": _cmd_schedule}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\n{parser.format_usage().strip()}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        config = getattr(args, "config", None)
        cfg = RunConfig.load(config) if config else RunConfig()
        cfg = cfg.override(seed=getattr(args, "seed", None), workers=getattr(args, "workers", None))
        verbose = getattr(args, "verbose", 0)
        level = ["WARNING", "INFO", "DEBUG"][min(verbose, 2)] if verbose else cfg.log_level
        logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ModelFormatError, FitError, EmptyFieldError) as exc:
        print(f"facejitter {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"facejitter {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
