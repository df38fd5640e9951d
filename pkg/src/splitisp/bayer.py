"""Bayer mosaic types and pixel-level conversions.

Images follow numpy conventions throughout this layer:

* sRGB images are float arrays of shape (H, W, 3) with values in [0, 1].
* Grayscale images are float arrays of shape (H, W) in [0, 1].
* RAW mosaics are integer digital numbers in a :class:`BayerRaw` wrapper;
  the CFA layout is RGGB anchored at the top-left pixel, so every 2x2 cell
  reads ``[[R, G], [G, B]]``.

Only 10- and 12-bit depths are accepted; both travel in uint16 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError

SUPPORTED_BIT_DEPTHS = (10, 12)

# BT.601 luma weights (R, G, B).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class BayerRaw:
    """A single-channel Bayer mosaic with its acquisition metadata.

    Attributes
    ----------
    pixels : np.ndarray
        uint16 array of shape (H, W) holding digital numbers.
    bit_depth : int
        ADC bit depth; pixel values must stay below 2**bit_depth.
    cfa : str
        Color-filter layout; only "RGGB" is supported.
    meta : dict
        Free-form provenance (source file, degradation settings, ...).
    """

    pixels: np.ndarray
    bit_depth: int
    cfa: str = "RGGB"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cfa != "RGGB":
            raise ConfigurationError(f"unsupported CFA layout {self.cfa!r}")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ConfigurationError(
                f"bit_depth must be one of {SUPPORTED_BIT_DEPTHS}, got {self.bit_depth}"
            )
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ShapeError(f"mosaic must be 2-D, got shape {px.shape}")
        if px.shape[0] % 2 or px.shape[1] % 2:
            raise ShapeError(
                f"mosaic dims must be even to hold whole 2x2 CFA cells, got {px.shape}"
            )
        if not np.issubdtype(px.dtype, np.integer):
            raise ShapeError(f"mosaic dtype must be integer, got {px.dtype}")
        limit = 1 << self.bit_depth
        over = np.argwhere(px >= limit)
        if over.size:
            coords = [tuple(int(v) for v in rc) for rc in over[:8]]
            raise ValidationError(
                f"{over.shape[0]} pixel(s) exceed the {self.bit_depth}-bit range "
                f"(first offenders at {coords})"
            )
        self.pixels = px.astype(np.uint16, copy=False)

    @property
    def shape(self):
        return self.pixels.shape


def normalize_raw(raw: BayerRaw) -> np.ndarray:
    """Map digital numbers to float64 in [0, 1] by the full-scale divisor.

    A DN of ``2**bit_depth - 1`` maps exactly to 1.0.
    """
    scale = float((1 << raw.bit_depth) - 1)
    return raw.pixels.astype(np.float64) / scale


def pack_cfa(mosaic: np.ndarray) -> np.ndarray:
    """Rearrange an RGGB mosaic into a half-resolution 4-channel stack.

    Parameters
    ----------
    mosaic : np.ndarray
        (H, W) array, H and W even.

    Returns
    -------
    np.ndarray
        (H/2, W/2, 4) array ordered [R, G1, G2, B], same dtype.
    """
    m = np.asarray(mosaic)
    if m.ndim != 2 or m.shape[0] % 2 or m.shape[1] % 2:
        raise ShapeError(f"mosaic must be 2-D with even dims, got shape {m.shape}")
    return np.stack(
        [m[0::2, 0::2], m[0::2, 1::2], m[1::2, 0::2], m[1::2, 1::2]], axis=-1
    )


def unpack_cfa(planes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_cfa`: interleave 4 planes back into a mosaic."""
    p = np.asarray(planes)
    if p.ndim != 3 or p.shape[-1] != 4:
        raise ShapeError(f"expected (H/2, W/2, 4) planes, got shape {p.shape}")
    h2, w2 = p.shape[:2]
    out = np.empty((h2 * 2, w2 * 2), dtype=p.dtype)
    out[0::2, 0::2] = p[..., 0]
    out[0::2, 1::2] = p[..., 1]
    out[1::2, 0::2] = p[..., 2]
    out[1::2, 1::2] = p[..., 3]
    return out


def mosaic_rgb(img: np.ndarray) -> np.ndarray:
    """Sample an (H, W, 3) image through the RGGB pattern into an (H, W) plane."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {a.shape}")
    if a.shape[0] % 2 or a.shape[1] % 2:
        raise ShapeError(f"image dims must be even, got {a.shape[:2]}")
    out = np.empty(a.shape[:2], dtype=a.dtype)
    out[0::2, 0::2] = a[0::2, 0::2, 0]  # R
    out[0::2, 1::2] = a[0::2, 1::2, 1]  # G
    out[1::2, 0::2] = a[1::2, 0::2, 1]  # G
    out[1::2, 1::2] = a[1::2, 1::2, 2]  # B
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma: 0.299 R + 0.587 G + 0.114 B, shape (H, W)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {a.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * a[..., 0] + g * a[..., 1] + b * a[..., 2]


def validate_unit_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check an image is float-like with finite values in [0, 1]."""
    a = np.asarray(img)
    if not np.issubdtype(a.dtype, np.floating):
        raise ShapeError(f"{name} must be float, got dtype {a.dtype}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} contains non-finite values")
    lo, hi = float(a.min(initial=0.0)), float(a.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"{name} values outside [0, 1] (min {lo}, max {hi})")
    return a
