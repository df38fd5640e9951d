"""Generate aligned RAW/sRGB training pairs from procedural scenes.

Shows the degradation model that turns a clean sRGB rendering into a Bayer
mosaic: inverse gamma, inverse white balance, CFA sampling, sensor noise,
and quantization to the configured bit depth.  Writes PNG pairs plus a
manifest that the training CLI can consume directly:

    python3 demos/synthesize_pairs.py --out-dir /tmp/pairs --count 4
"""

import argparse
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


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--count", type=int, default=4)
    parser.add_argument("--size", type=int, default=128, help="square image size")
    parser.add_argument("--bit-depth", type=int, default=10, choices=(10, 12))
    parser.add_argument("--noise-std", type=float, default=0.002)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    params = DegradationParams(noise_std=args.noise_std, bit_depth=args.bit_depth)
    manifest = PairManifest(bit_depth=args.bit_depth)

    for i in range(args.count):
        scene = random_scene(args.size, args.size, rng)
        raw, srgb = synth_pair(scene, params, rng)
        raw_name = f"scene{i:02d}_raw.png"
        srgb_name = f"scene{i:02d}_srgb.png"
        save_raw_png(os.path.join(args.out_dir, raw_name), raw)
        save_srgb_png(os.path.join(args.out_dir, srgb_name), srgb)
        manifest.add(raw_name, srgb_name, "train" if i else "val")
        norm = raw.pixels / float((1 << raw.bit_depth) - 1)
        print(f"{raw_name}: mosaic {raw.pixels.shape} {raw.bit_depth}-bit, "
              f"range [{norm.min():.3f}, {norm.max():.3f}], "
              f"sRGB mean {srgb.mean():.3f}")

    path = os.path.join(args.out_dir, "manifest.json")
    save_manifest(path, manifest)
    print(f"\nwrote {args.count} pairs and {path}")
    print("train a codec on them with:")
    print(f"  splitisp train-codec --config run.cfg --out-dir runs/codec "
          f"--override manifest={path}")


if __name__ == "__main__":
    main()
