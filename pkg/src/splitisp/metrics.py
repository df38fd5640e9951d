"""Image quality metrics and batch evaluation reporting.

PSNR is computed on all channels against a [0, 1] data range; SSIM follows
the classical single-scale formulation (11x11 Gaussian window, sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2) on the BT.601 luma plane.  All metric math runs
in float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .bayer import to_grayscale
from .errors import ShapeError

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical inputs return the 100 dB cap instead of infinity.
    """
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over the luma plane, in [-1, 1].

    Windows are fully interior ('valid' convolution), so images must be at
    least 11 pixels on each side.
    """
    a, b = _check_pair(a, b)
    x = to_grayscale(a) if a.ndim == 3 else a
    y = to_grayscale(b) if b.ndim == 3 else b
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(
            f"images must be at least {SSIM_WINDOW} px per side for SSIM, got {x.shape}"
        )
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, w, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (xx + yy + SSIM_C2)
    return float(np.mean(num / den))


def error_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel channel-mean absolute difference, shape (H, W) in [0, 1]."""
    a, b = _check_pair(a, b)
    diff = np.abs(a - b)
    return diff.mean(axis=-1) if diff.ndim == 3 else diff


def error_map_u8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Error map rendered for an 8-bit grayscale PNG."""
    return np.rint(np.clip(error_map(a, b), 0.0, 1.0) * 255.0).astype(np.uint8)


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    """RMSE between the soft color histograms of two sRGB images."""
    import torch

    from .colorize import ccl_loss, soft_histogram

    a, b = _check_pair(a, b)
    ha = soft_histogram(torch.from_numpy(a.transpose(2, 0, 1)))
    hb = soft_histogram(torch.from_numpy(b.transpose(2, 0, 1)))
    return float(ccl_loss(ha, hb))


@dataclass
class EvalReport:
    """Per-image metric rows plus their aggregates.

    Failed images carry an ``error`` string in their row and are excluded
    from the aggregates; ``evaluated`` counts the rows that went in.
    """

    rows: list = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    mean_hist_l2: float = 0.0
    evaluated: int = 0
    failed: int = 0
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def evaluate(pairs, infer_fn, fingerprint: str = "") -> EvalReport:
    """Score ``infer_fn`` over (image_id, raw, srgb_target) triples.

    ``infer_fn(image_id, raw) -> np.ndarray`` produces the rendered sRGB
    image.  A per-image exception is recorded in that image's row rather
    than raised.
    """
    report = EvalReport(fingerprint=fingerprint)
    sums = np.zeros(3, dtype=np.float64)
    for image_id, raw, target in pairs:
        row = {"id": str(image_id)}
        try:
            rendered = infer_fn(image_id, raw)
            row["psnr_db"] = psnr(rendered, target)
            row["ssim"] = ssim(rendered, target)
            row["histogram_l2"] = histogram_distance(rendered, target)
        except Exception as exc:  # noqa: BLE001 - reported per-row by contract
            row["error"] = f"{type(exc).__name__}: {exc}"
            report.failed += 1
        else:
            sums += (row["psnr_db"], row["ssim"], row["histogram_l2"])
            report.evaluated += 1
        report.rows.append(row)
    if report.evaluated:
        report.mean_psnr = float(sums[0] / report.evaluated)
        report.mean_ssim = float(sums[1] / report.evaluated)
        report.mean_hist_l2 = float(sums[2] / report.evaluated)
    return report
