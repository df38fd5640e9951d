"""Train the whole pipeline on a handful of synthetic pairs, then render.

A miniature but complete run: synthesize data, fit the codec (stage 1),
fit the noise predictor and colorizer over the frozen codec (stage 2), and
render the training inputs back to sRGB with the reverse-diffusion sampler.
Small settings keep it to a couple of minutes on one CPU core:

    python3 demos/tiny_end_to_end.py --out-dir /tmp/tinyrun
"""

import argparse
import dataclasses
import os
import time

import numpy as np

from splitisp.metrics import psnr
from splitisp.synthesis import (
    DegradationParams,
    PairManifest,
    load_manifest,
    load_raw_png,
    random_scene,
    resolve_entry,
    save_manifest,
    save_raw_png,
    save_srgb_png,
    synth_pair,
)
from splitisp.training import InferencePipeline, RunConfig, run_stage1, run_stage2


def build_dataset(out_dir, count, size, seed):
    rng = np.random.default_rng(seed)
    params = DegradationParams(noise_std=0.0, bit_depth=10)
    manifest = PairManifest(bit_depth=10)
    os.makedirs(out_dir, exist_ok=True)
    targets = []
    for i in range(count):
        scene = random_scene(size, size, rng)
        raw, srgb = synth_pair(scene, params, rng)
        save_raw_png(os.path.join(out_dir, f"pair{i}_raw.png"), raw)
        save_srgb_png(os.path.join(out_dir, f"pair{i}_srgb.png"), srgb)
        manifest.add(f"pair{i}_raw.png", f"pair{i}_srgb.png", "train")
        targets.append(srgb)
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(path, manifest)
    return path, targets


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--pairs", type=int, default=2)
    parser.add_argument("--stage1-iters", type=int, default=400)
    parser.add_argument("--stage2-iters", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    manifest, targets = build_dataset(
        os.path.join(args.out_dir, "data"), args.pairs, 64, args.seed
    )
    cfg = RunConfig(
        manifest=manifest,
        latent_channels=32,
        unet_base=32,
        batch_size=2,
        patch_size=64,
        lr=1e-3,
        noise_std=0.0,
        max_iters=args.stage1_iters,
        ckpt_every=args.stage1_iters,
        log_every=100,
        seed=args.seed,
    ).validate()

    t0 = time.time()
    s1, hist1 = run_stage1(cfg, os.path.join(args.out_dir, "stage1"))
    print(f"stage 1: {args.stage1_iters} iters, loss "
          f"{hist1[0]['loss']:.4f} -> {hist1[-1]['loss']:.4f} "
          f"({time.time() - t0:.0f}s)")

    cfg2 = dataclasses.replace(
        cfg, max_iters=args.stage2_iters, ckpt_every=args.stage2_iters
    ).validate()
    t0 = time.time()
    s2, hist2 = run_stage2(cfg2, os.path.join(args.out_dir, "stage2"), s1)
    print(f"stage 2: {args.stage2_iters} iters, loss "
          f"{hist2[0]['loss']:.4f} -> {hist2[-1]['loss']:.4f} "
          f"({time.time() - t0:.0f}s)")

    infer = InferencePipeline.from_checkpoint(cfg2, s2)
    man = load_manifest(manifest)
    for i, entry in enumerate(man.split_entries("train")):
        raw_path, _ = resolve_entry(manifest, entry)
        out = infer.render(load_raw_png(raw_path, 10), seed=i)
        save_srgb_png(os.path.join(args.out_dir, f"render{i}.png"), out)
        print(f"render{i}.png: PSNR vs target {psnr(out, targets[i]):.1f} dB")


if __name__ == "__main__":
    main()
