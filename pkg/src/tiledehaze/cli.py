"""Command-line surface: synth, train, infer, attribute, eval, profile.

Exit codes: 0 success, 1 user error (bad flag/key/path), 2 runtime
failure (OOM, I/O) with stage diagnostics. Every run appends a
machine-readable record (resolved config hash, seeds, versions) to the
run log.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__
from .errors import ConfigError, DataError, TileDehazeError

DEVICE_ENV = "TILEDEHAZE_DEVICE"


def _device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def _resolved_config(args):
    from .config import resolve_model_config

    return resolve_model_config(getattr(args, "config", None), getattr(args, "set", None))


def _append_run_log(args, config_flat: dict, extra: dict | None = None) -> None:
    import torch

    payload = json.dumps(config_flat, sort_keys=True).encode()
    record = {
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "command": args.command,
        "config_hash": hashlib.sha256(payload).hexdigest(),
        "config": config_flat,
        "seed": getattr(args, "seed", None),
        "versions": {"tiledehaze": __version__, "torch": torch.__version__,
                     "python": sys.version.split()[0]},
        "device": _device(),
    }
    record.update(extra or {})
    with open(args.log_file, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _parse_region(text: str):
    from .attribution import AttributionRegion

    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--region expects x,y,l, got {text!r}")
    try:
        x, y, l = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--region components must be integers: {text!r}") from exc
    return AttributionRegion(x=x, y=y, l=l)


def _cmd_synth(args) -> int:
    from .haze import build_dataset_manifest

    manifest = build_dataset_manifest(
        args.clear_dir, args.out_dir, split_ratio=args.split, seed=args.seed,
        coverage_range=tuple(args.coverage), intensity_range=tuple(args.intensity))
    _append_run_log(args, {"clear_dir": args.clear_dir, "out_dir": args.out_dir},
                    {"manifest": str(manifest)})
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    from .config import check_keys, from_flat, parse_overrides, to_flat, valid_keys, format_value
    from .model import DehazeModel
    from .training import TrainConfig, train

    config = _resolved_config(args)
    train_flat = parse_overrides(args.train_set)
    check_keys(train_flat, valid_keys(TrainConfig))
    tcfg = from_flat(TrainConfig, train_flat, defaults=TrainConfig(seed=args.seed))

    model = DehazeModel(config).to(_device())
    result = train(model, args.manifest, tcfg, args.out_dir)
    flat = {k: format_value(v) for k, v in to_flat(config).items()}
    flat.update({f"train.{k}": format_value(v) for k, v in to_flat(tcfg).items()})
    _append_run_log(args, flat, {"last": result.last_checkpoint, "best": result.best_checkpoint})
    print(result.best_checkpoint)
    return 0


def _load_model(args):
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint, map_location=_device())
    return model


def _cmd_infer(args) -> int:
    from .config import format_value, to_flat
    from .image import load_image, save_image
    from .model import dehaze

    model = _load_model(args)
    image = load_image(args.input)
    out = dehaze(image, model, mini_batch_size=args.mini_batch,
                 precision="fp16" if args.fp16 else None)
    save_image(out, args.output, bit_depth=args.bit_depth)
    flat = {k: format_value(v) for k, v in to_flat(model.config).items()}
    _append_run_log(args, flat, {"input": args.input, "output": args.output})
    print(args.output)
    return 0


def _cmd_attribute(args) -> int:
    from .attribution import DamConfig, compute_dam, render_heatmap, save_attribution
    from .config import format_value, to_flat
    from .image import load_image

    model = _load_model(args)
    hazy = load_image(args.input)
    baseline = load_image(args.baseline)
    region = _parse_region(args.region)
    cfg = DamConfig(steps=args.steps, step_weighting=args.step_weighting)
    attribution = compute_dam(model, hazy, baseline, region, cfg)
    paths = save_attribution(attribution, args.out_prefix)
    heat_path = args.out_prefix + "_heatmap.png"
    render_heatmap(attribution, hazy, heat_path)
    paths["heatmap"] = heat_path
    flat = {k: format_value(v) for k, v in to_flat(model.config).items()}
    _append_run_log(args, flat, {"outputs": paths, "region": args.region, "steps": args.steps})
    print(json.dumps(paths, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    from .config import format_value, to_flat
    from .haze import read_manifest
    from .image import load_image
    from .metrics import evaluate_pairs

    records = read_manifest(args.pairs)
    if args.split:
        records = [r for r in records if r.get("split") == args.split]
    pairs = ((r["hazy"], load_image(r["hazy"]), load_image(r["clear"])) for r in records)
    model = _load_model(args) if args.checkpoint else None
    report = evaluate_pairs(pairs, model=model, mini_batch_size=args.mini_batch)
    print(report.to_text())
    if args.csv:
        report.to_csv(args.csv)
    flat = {} if model is None else {k: format_value(v) for k, v in to_flat(model.config).items()}
    _append_run_log(args, flat, {"pairs": args.pairs, "mean_psnr_db": report.mean_psnr_db,
                                 "mean_ssim": report.mean_ssim})
    return 0


def _cmd_profile(args) -> int:
    from .config import format_value, to_flat
    from .model import DehazeModel
    from .profiling import profile_run

    if args.checkpoint:
        model = _load_model(args)
    else:
        model = DehazeModel(_resolved_config(args)).to(_device())
    sizes = []
    for token in args.sizes.split(","):
        token = token.strip()
        if "x" in token:
            h, w = token.split("x", 1)
            sizes.append((int(h), int(w)))
        else:
            sizes.append((int(token), int(token)))
    report = profile_run(model, sizes, precision=args.precision, mini_batch_size=args.mini_batch,
                         seed=args.seed)
    print(report.to_text())
    if args.csv:
        report.to_csv(args.csv)
    flat = {k: format_value(v) for k, v in to_flat(model.config).items()}
    _append_run_log(args, flat, {"sizes": args.sizes, "precision": args.precision})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiledehaze",
                                     description="Memory-bounded tiled haze removal toolkit")
    parser.add_argument("--log-file", default="run_log.jsonl", help="run log (JSONL, appended)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate paired hazy data from clear images")
    p.add_argument("--clear-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coverage", type=float, nargs=2, default=(0.3, 1.0))
    p.add_argument("--intensity", type=float, nargs=2, default=(0.3, 1.0))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a synthesized manifest")
    p.add_argument("--config", default=None, help="model config file")
    p.add_argument("--set", action="append", default=[], help="model config override key=value")
    p.add_argument("--train-set", action="append", default=[], help="training config override key=value")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="dehaze one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--mini-batch", type=int, default=None)
    p.add_argument("--fp16", action="store_true")
    p.add_argument("--bit-depth", type=int, default=8, choices=(8, 16))
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("attribute", help="attribution map for a dehazed region")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="hazy image")
    p.add_argument("--baseline", required=True, help="clear baseline image")
    p.add_argument("--region", required=True, help="x,y,l in pixels, top-left origin")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-weighting", default="riemann", choices=("riemann", "as-printed"))
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("eval", help="PSNR/SSIM over manifest pairs")
    p.add_argument("--pairs", required=True, help="manifest path")
    p.add_argument("--checkpoint", default=None, help="dehaze before scoring")
    p.add_argument("--split", default=None, choices=(None, "train", "test"))
    p.add_argument("--mini-batch", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("profile", help="per-stage peak memory and timing")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--sizes", required=True, help="e.g. 1024,2048 or 1024x768")
    p.add_argument("--precision", default="fp32", choices=("fp32", "fp16"))
    p.add_argument("--mini-batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TileDehazeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
