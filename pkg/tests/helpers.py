"""Shared builders for dataset/config-driven tests."""

import os

import numpy as np

from splitisp.synthesis import (
    DegradationParams,
    PairManifest,
    random_scene,
    save_manifest,
    save_raw_png,
    save_srgb_png,
    synth_pair,
)
from splitisp.training import RunConfig

# Lean defaults so config-driven tests stay fast on one CPU core.
TINY = dict(
    latent_channels=16,
    unet_base=16,
    batch_size=2,
    patch_size=32,
    max_iters=10,
    ckpt_every=5,
    log_every=5,
    noise_std=0.0,
)


def make_dataset(out_dir, n_train=2, n_val=1, size=64, seed=0, bit_depth=10,
                 noise_std=0.0) -> str:
    """Write synthetic pairs + manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    params = DegradationParams(noise_std=noise_std, bit_depth=bit_depth)
    manifest = PairManifest(bit_depth=bit_depth)
    for i in range(n_train + n_val):
        scene = random_scene(size, size, rng)
        raw, srgb = synth_pair(scene, params, rng)
        raw_name, srgb_name = f"img{i:02d}_raw.png", f"img{i:02d}_srgb.png"
        save_raw_png(os.path.join(out_dir, raw_name), raw)
        save_srgb_png(os.path.join(out_dir, srgb_name), srgb)
        manifest.add(raw_name, srgb_name, "train" if i < n_train else "val")
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(path, manifest)
    return path


def write_config(path, **keys) -> str:
    """Write a flat config file from keyword settings."""
    merged = dict(TINY, **keys)
    with open(path, "w") as fh:
        for key, value in merged.items():
            fh.write(f"{key} = {value}\n")
    return str(path)


def tiny_config(manifest, **overrides) -> RunConfig:
    return RunConfig(manifest=str(manifest), **dict(TINY, **overrides)).validate()
