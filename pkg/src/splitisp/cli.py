"""Command-line entry points.

Subcommands cover the full pipeline lifecycle: synth (build a synthetic
dataset), train-codec (stage 1), train-diffusion (stage 2), infer, eval.
Progress goes to stderr; machine-consumable results (paths, aggregates) go
to stdout.  Exit codes: 0 success, 2 bad input or configuration, 3 numeric
abort during training, 4 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import metrics, synthesis, training
from .errors import (
    CheckpointError,
    ConfigurationError,
    NumericError,
    OrderingError,
    ShapeError,
    ValidationError,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4


def _status(msg):
    print(msg, file=sys.stderr)


def _config_help() -> str:
    lines = ["config keys (flat `key = value` file; all overridable with --override):"]
    for f in dataclasses.fields(training.RunConfig):
        type_name = f.type if isinstance(f.type, str) else f.type.__name__
        lines.append(f"  {f.name} ({type_name}, default {f.default!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitisp",
        description="Decoupled RAW-to-sRGB pipeline: codec, detail diffusion, recolorization.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--out-dir", required=True, help="directory for all outputs")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint to load")

    p = sub.add_parser("synth", help="degrade sRGB sources into RAW/sRGB pairs + manifest")
    common(p)

    p = sub.add_parser("train-codec", help="stage 1: fit the latent codec")
    common(p)
    p.add_argument("--resume", default=None, help="stage-1 checkpoint to continue from")

    p = sub.add_parser("train-diffusion",
                       help="stage 2: fit noise predictor + colorizer over a frozen codec")
    common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint providing the codec")
    p.add_argument("--resume", default=None, help="stage-2 checkpoint to continue from")
    p.add_argument("--no-tel", action="store_true",
                   help="disable the texture term (lambda_tel = 0)")
    p.add_argument("--no-ccl", action="store_true",
                   help="disable the histogram term (lambda_ccl = 0)")

    p = sub.add_parser("infer", help="render sRGB images from RAW mosaics")
    common(p, checkpoint=True)
    p.add_argument("inputs", nargs="+", help="RAW PNG paths")
    p.add_argument("--gt", action="append", default=[],
                   help="ground-truth sRGB PNG per input (repeatable, positional match)")

    p = sub.add_parser("eval", help="score a checkpoint over the manifest's val split")
    common(p, checkpoint=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--montage", action="store_true",
                   help="also write a rendered/target/error grid PNG")
    return parser


def _load_config(args) -> training.RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return training.load_config(args.config, overrides)


def _pair_stem(path) -> str:
    """Pair identity of a RAW file: basename without extension or _raw tag."""
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem[:-4] if stem.endswith("_raw") else stem


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if not cfg.source_dir:
        raise ConfigurationError("synth requires source_dir in the config")
    if not os.path.isdir(cfg.source_dir):
        raise ValidationError(f"source_dir not found: {cfg.source_dir}")
    sources = sorted(
        f for f in os.listdir(cfg.source_dir) if f.lower().endswith(".png")
    )
    if not sources:
        raise ValidationError(f"no PNG files in {cfg.source_dir}")
    os.makedirs(args.out_dir, exist_ok=True)
    params = cfg.degradation()
    rng = np.random.default_rng(cfg.seed)
    manifest = synthesis.PairManifest(bit_depth=cfg.bit_depth)
    n_train = int(round(cfg.split_ratio * len(sources)))
    for index, name in enumerate(sources):
        srgb = synthesis.load_srgb_png(os.path.join(cfg.source_dir, name))
        raw, srgb = synthesis.synth_pair(srgb, params, rng)
        stem = os.path.splitext(name)[0]
        raw_name, srgb_name = f"{stem}_raw.png", f"{stem}_srgb.png"
        synthesis.save_raw_png(os.path.join(args.out_dir, raw_name), raw)
        synthesis.save_srgb_png(os.path.join(args.out_dir, srgb_name), srgb)
        split = "train" if index < n_train else "val"
        manifest.add(raw_name, srgb_name, split)
        _status(f"synth {name} -> {raw_name} [{split}]")
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    synthesis.save_manifest(manifest_path, manifest)
    print(manifest_path)
    return EXIT_OK


def cmd_train_codec(args) -> int:
    cfg = _load_config(args)
    _status(f"stage 1: {cfg.max_iters} iterations, batch {cfg.batch_size}, "
            f"patch {cfg.patch_size}")
    final, history = training.run_stage1(cfg, args.out_dir, resume=args.resume)
    _status(f"final loss {history[-1]['loss']:.6f}")
    print(final)
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    overrides = list(args.override)
    if args.no_tel:
        overrides.append("lambda_tel=0")
    if args.no_ccl:
        overrides.append("lambda_ccl=0")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = training.load_config(args.config, overrides)
    _status(f"stage 2: {cfg.max_iters} iterations, lambda_tel={cfg.lambda_tel}, "
            f"lambda_ccl={cfg.lambda_ccl}")
    final, history = training.run_stage2(cfg, args.out_dir, args.stage1,
                                         resume=args.resume)
    _status(f"final loss {history[-1]['loss']:.6f}")
    print(final)
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    if args.gt and len(args.gt) != len(args.inputs):
        raise ConfigurationError(
            f"got {len(args.gt)} --gt paths for {len(args.inputs)} inputs"
        )
    pipeline = training.InferencePipeline.from_checkpoint(cfg, args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    for index, path in enumerate(args.inputs):
        if not os.path.exists(path):
            raise ValidationError(f"input not found: {path}")
        raw = synthesis.load_raw_png(path, cfg.bit_depth)
        rendered = pipeline.render(raw, seed=cfg.seed + index)
        stem = _pair_stem(path)
        out_path = os.path.join(args.out_dir, f"{stem}_srgb.png")
        synthesis.save_srgb_png(out_path, rendered)
        line = out_path
        if args.gt:
            target = synthesis.load_srgb_png(args.gt[index])
            err_path = os.path.join(args.out_dir, f"{stem}_errmap.png")
            from PIL import Image

            Image.fromarray(metrics.error_map_u8(rendered, target)).save(err_path)
            line += f" psnr={metrics.psnr(rendered, target):.2f}dB"
        print(line)
    return EXIT_OK


def _montage(rows) -> np.ndarray:
    """Stack (rendered, target, errmap) triples into one grid image."""
    h = max(r[0].shape[0] for r in rows)
    w = max(r[0].shape[1] for r in rows)
    grid = np.zeros((h * len(rows), w * 3, 3))
    for i, (rendered, target, err) in enumerate(rows):
        for j, img in enumerate((rendered, target, np.repeat(err[..., None], 3, axis=-1))):
            grid[i * h:i * h + img.shape[0], j * w:j * w + img.shape[1]] = img
    return grid


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = synthesis.load_manifest(cfg.manifest)
    entries = manifest.split_entries(args.split)
    if not entries:
        raise ValidationError(f"manifest has no {args.split!r} entries to evaluate")
    pipeline = training.InferencePipeline.from_checkpoint(cfg, args.checkpoint)
    pairs = []
    for entry in entries:
        raw_path, srgb_path = synthesis.resolve_entry(cfg.manifest, entry)
        image_id = _pair_stem(entry["raw"])
        pairs.append((image_id, synthesis.load_raw_png(raw_path, cfg.bit_depth),
                      synthesis.load_srgb_png(srgb_path)))
    seeds = {image_id: cfg.seed + i for i, (image_id, _, _) in enumerate(pairs)}
    rendered_cache = {}

    def infer_fn(image_id, raw):
        out = pipeline.render(raw, seed=seeds[image_id])
        rendered_cache[image_id] = out
        return out

    report = metrics.evaluate(pairs, infer_fn,
                              fingerprint=training.config_fingerprint(cfg))
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "report.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    if args.montage:
        rows = [
            (rendered_cache[pid], target, metrics.error_map(rendered_cache[pid], target))
            for pid, _, target in pairs if pid in rendered_cache
        ]
        if rows:
            synthesis.save_srgb_png(os.path.join(args.out_dir, "montage.png"),
                                    np.clip(_montage(rows), 0.0, 1.0))
    for row in report.rows:
        _status(json.dumps(row))
    print(f"{report_path} evaluated={report.evaluated} failed={report.failed} "
          f"mean_psnr={report.mean_psnr:.3f} mean_ssim={report.mean_ssim:.4f} "
          f"mean_hist_l2={report.mean_hist_l2:.5f}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train-codec": cmd_train_codec,
    "train-diffusion": cmd_train_diffusion,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = _COMMANDS[args.command](args)
    except (ConfigurationError, ValidationError, ShapeError, OrderingError,
            FileNotFoundError, json.JSONDecodeError, IndexError) as exc:
        _status(f"error: {exc}")
        code = EXIT_BAD_INPUT
    except NumericError as exc:
        _status(f"numeric abort: {exc}")
        if exc.context:
            _status(f"context: {exc.context}")
        if exc.last_checkpoint:
            _status(f"last good checkpoint: {exc.last_checkpoint}")
        code = EXIT_NUMERIC
    except CheckpointError as exc:
        _status(f"checkpoint error: {exc}")
        code = EXIT_CHECKPOINT
    return code


if __name__ == "__main__":
    sys.exit(main())
