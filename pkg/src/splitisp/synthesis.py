"""Synthetic RAW/sRGB pair generation, patch extraction, and on-disk formats.

A training pair is manufactured by pushing a finished sRGB image backwards
through a simplified acquisition model: display gamma is undone, per-channel
white-balance gains are inverted, the result is sampled through the RGGB
mosaic, read noise is added, and the plane is quantized to the target bit
depth.  Pairs live on disk as a 16-bit grayscale PNG (the mosaic's digital
numbers) next to an 8-bit sRGB PNG, tied together by a JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .bayer import BayerRaw, SUPPORTED_BIT_DEPTHS, mosaic_rgb, validate_unit_image
from .errors import ConfigurationError, ShapeError, ValidationError

MANIFEST_SPLITS = ("train", "val")


@dataclass(frozen=True)
class DegradationParams:
    """Settings for the sRGB -> RAW acquisition model.

    gamma: display gamma undone by ``srgb ** gamma`` (1.0 = no-op).
    gains: white-balance gains (r, g, b) that the camera would have applied;
        synthesis divides them back out.
    noise_std: Gaussian read-noise sigma in normalized [0, 1] units.
    bit_depth: ADC depth of the produced mosaic (10 or 12).
    """

    gamma: float = 2.2
    gains: tuple = (2.0, 1.0, 1.6)
    noise_std: float = 0.002
    bit_depth: int = 10

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if len(self.gains) != 3 or any(g <= 0 for g in self.gains):
            raise ConfigurationError(f"gains must be 3 positive values, got {self.gains}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ConfigurationError(
                f"bit_depth must be one of {SUPPORTED_BIT_DEPTHS}, got {self.bit_depth}"
            )


def synth_pair(srgb: np.ndarray, params: DegradationParams,
               rng: np.random.Generator) -> tuple[BayerRaw, np.ndarray]:
    """Degrade a clean sRGB image into a synthetic RAW mosaic.

    Returns the (BayerRaw, srgb) pair; the sRGB target is the float64 input
    passed through unchanged.  Identity settings (gamma 1, unit gains, zero
    noise) reduce the mosaic to a straight quantization of the input.
    """
    img = validate_unit_image(srgb, "srgb").astype(np.float64)
    linear = img ** params.gamma
    linear = linear / np.asarray(params.gains, dtype=np.float64)
    plane = mosaic_rgb(linear)
    if params.noise_std > 0:
        plane = plane + rng.normal(0.0, params.noise_std, size=plane.shape)
    plane = np.clip(plane, 0.0, 1.0)
    scale = (1 << params.bit_depth) - 1
    dn = np.rint(plane * scale).astype(np.uint16)
    raw = BayerRaw(dn, params.bit_depth, meta={"gamma": params.gamma,
                                               "gains": tuple(params.gains),
                                               "noise_std": params.noise_std})
    return raw, img


def random_scene(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural colorful test scene: smooth color fields plus hard detail.

    Low-frequency content comes from bilinearly upsampled random control
    grids (one per channel); a few axis-aligned rectangles are painted on
    top, each filled with either a random flat color or a two-color stripe
    pattern, so the scene carries both sharp edges and genuine
    high-frequency texture.  Rectangles too small for a full stripe cycle
    stay flat.
    """
    if height % 2 or width % 2:
        raise ShapeError(f"scene dims must be even, got {(height, width)}")
    img = np.empty((height, width, 3), dtype=np.float64)
    cells = 4
    ys = np.linspace(0, cells - 1, height)
    xs = np.linspace(0, cells - 1, width)
    y0 = np.minimum(ys.astype(int), cells - 2)
    x0 = np.minimum(xs.astype(int), cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    for ch in range(3):
        grid = rng.uniform(0.05, 0.95, size=(cells, cells))
        a = grid[y0[:, None], x0[None, :]]
        b = grid[y0[:, None], x0[None, :] + 1]
        c = grid[y0[:, None] + 1, x0[None, :]]
        d = grid[y0[:, None] + 1, x0[None, :] + 1]
        img[..., ch] = (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
                        + c * fy * (1 - fx) + d * fy * fx)
    for _ in range(4):
        h = int(rng.integers(height // 8, height // 3 + 1))
        w = int(rng.integers(width // 8, width // 3 + 1))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        color = rng.uniform(0.05, 0.95, size=3)
        # stripe partner is the same hue pushed at least ~0.25 away in
        # brightness, so stripes stay visible in the grayscale view too
        shift = float(rng.uniform(0.25, 0.45))
        offset = shift if color.mean() <= 0.5 else -shift
        second = np.clip(color + offset, 0.02, 0.98)
        half = int(rng.integers(4, 9))
        down_rows = bool(rng.integers(0, 2))
        striped = bool(rng.integers(0, 2))
        img[top:top + h, left:left + w] = color
        span = h if down_rows else w
        if striped and span >= 2 * half:
            odd = (np.arange(span) // half) % 2 == 1
            block = img[top:top + h, left:left + w]
            if down_rows:
                block[odd, :] = second
            else:
                block[:, odd] = second
    return np.clip(img, 0.0, 1.0)


def extract_patches(raw_plane: np.ndarray, srgb: np.ndarray, patch: int,
                    count: int, rng: np.random.Generator):
    """Crop aligned (mosaic, sRGB) patch pairs at even offsets.

    Even row/column offsets keep the RGGB phase of every crop identical to
    the parent mosaic.  ``patch`` must be even and fit inside the image.
    """
    h, w = raw_plane.shape[:2]
    if srgb.shape[:2] != (h, w):
        raise ShapeError(f"mosaic {raw_plane.shape} and sRGB {srgb.shape} disagree")
    if patch % 2 or patch < 2:
        raise ShapeError(f"patch size must be even and >= 2, got {patch}")
    if patch > h or patch > w:
        raise ShapeError(f"patch {patch} exceeds image {(h, w)}")
    out = []
    for _ in range(count):
        top = 2 * int(rng.integers(0, (h - patch) // 2 + 1))
        left = 2 * int(rng.integers(0, (w - patch) // 2 + 1))
        out.append((raw_plane[top:top + patch, left:left + patch],
                    srgb[top:top + patch, left:left + patch]))
    return out


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------

def save_raw_png(path, raw: BayerRaw) -> None:
    """Write mosaic digital numbers into a 16-bit grayscale PNG."""
    Image.fromarray(raw.pixels.astype(np.uint16)).save(path)


def load_raw_png(path, bit_depth: int) -> BayerRaw:
    """Read a 16-bit grayscale PNG back into a BayerRaw.

    The container is wider than the data; range validation against
    ``bit_depth`` happens in the BayerRaw constructor.
    """
    arr = np.array(Image.open(path))
    if arr.ndim != 2:
        raise ShapeError(f"{path}: RAW PNG must be single-channel, got shape {arr.shape}")
    return BayerRaw(arr.astype(np.uint16), bit_depth, meta={"source": str(path)})


def save_srgb_png(path, img: np.ndarray) -> None:
    """Write a float [0, 1] image as an 8-bit RGB PNG (values rounded)."""
    a = validate_unit_image(img, "srgb")
    Image.fromarray(np.rint(a * 255.0).astype(np.uint8)).save(path)


def load_srgb_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into float64 [0, 1]."""
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


@dataclass
class PairManifest:
    """Index of RAW/sRGB pairs making up a dataset.

    entries hold paths relative to the manifest's directory plus a split
    tag; the same pair may not appear in more than one split.
    """

    bit_depth: int
    dataset: str = "synthetic"
    entries: list = field(default_factory=list)

    def add(self, raw_path: str, srgb_path: str, split: str) -> None:
        if split not in MANIFEST_SPLITS:
            raise ValidationError(f"split must be one of {MANIFEST_SPLITS}, got {split!r}")
        self.entries.append({"raw": str(raw_path), "srgb": str(srgb_path), "split": split})

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e["split"] == split]

    def validate(self) -> None:
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ValidationError(f"manifest bit_depth {self.bit_depth} unsupported")
        seen = {}
        for e in self.entries:
            for key in ("raw", "srgb", "split"):
                if key not in e:
                    raise ValidationError(f"manifest entry missing {key!r}: {e}")
            if e["split"] not in MANIFEST_SPLITS:
                raise ValidationError(f"unknown split {e['split']!r} in manifest")
            prior = seen.setdefault(e["raw"], e["split"])
            if prior != e["split"]:
                raise ValidationError(
                    f"pair {e['raw']!r} appears in both {prior!r} and {e['split']!r} splits"
                )


def save_manifest(path, manifest: PairManifest) -> None:
    manifest.validate()
    doc = {"bit_depth": manifest.bit_depth, "dataset": manifest.dataset,
           "entries": manifest.entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path, check_files: bool = True) -> PairManifest:
    """Parse and validate a manifest; optionally require referenced files."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        manifest = PairManifest(bit_depth=int(doc["bit_depth"]),
                                dataset=str(doc.get("dataset", "unknown")),
                                entries=list(doc["entries"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc
    manifest.validate()
    if check_files:
        base = os.path.dirname(os.path.abspath(path))
        for e in manifest.entries:
            for key in ("raw", "srgb"):
                p = os.path.join(base, e[key])
                if not os.path.exists(p):
                    raise ValidationError(f"manifest references missing file {p}")
    return manifest


def resolve_entry(manifest_path, entry) -> tuple[str, str]:
    """Absolute (raw, srgb) paths for one manifest entry."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    return os.path.join(base, entry["raw"]), os.path.join(base, entry["srgb"])
