"""Histogram-guided colorization of grayscale detail features.

Color information travels as a 3x256 per-channel histogram: a small network
predicts it from the RAW embedding, a mixer net turns it into a cxc
channel-mixing matrix applied at every spatial position of the RAW feature,
and a cross-attention layer lets the resulting color feature query the
synthesized grayscale feature for spatial detail.

Histograms are row-stochastic by construction everywhere: the soft
(differentiable) image histogram distributes each pixel between its two
neighboring bins with triangular weights, and the predictor ends in a
per-row softmax.
"""

from __future__ import annotations

import torch
from torch import nn

from .codec import LatentFeature
from .errors import ConfigurationError, ShapeError

NUM_BINS = 256


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

def soft_histogram(image: torch.Tensor) -> torch.Tensor:
    """Differentiable per-channel histogram over 256 bins centered at i/255.

    Accepts (3, H, W) or (B, 3, H, W) tensors with values in [0, 1] (values
    are clamped).  Each pixel splits its unit mass linearly between the two
    bins bracketing it, so rows sum to the pixel count before normalization
    and to exactly 1 after.  Accumulation runs in float64; the result is
    cast back to the input dtype.

    Returns (3, 256) or (B, 3, 256) matching the input batching.
    """
    squeeze = image.ndim == 3
    x = image[None] if squeeze else image
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) or (3, H, W), got {tuple(image.shape)}")
    b = x.shape[0]
    v = x.double().clamp(0.0, 1.0).reshape(b, 3, -1) * (NUM_BINS - 1)
    lo = v.detach().floor().clamp(max=NUM_BINS - 2)
    frac = v - lo
    lo = lo.long()
    hist = torch.zeros(b, 3, NUM_BINS, dtype=torch.float64, device=x.device)
    hist = hist.scatter_add(2, lo, 1.0 - frac)
    hist = hist.scatter_add(2, lo + 1, frac)
    hist = hist / hist.sum(dim=2, keepdim=True)
    hist = hist.to(image.dtype)
    return hist[0] if squeeze else hist


def validate_histogram(hist: torch.Tensor, tol: float = 1e-6) -> None:
    """Assert the row-stochastic contract: shape (..., 3, 256), rows sum to 1."""
    if hist.shape[-2:] != (3, NUM_BINS):
        raise ShapeError(f"histogram must end in (3, {NUM_BINS}), got {tuple(hist.shape)}")
    if float(hist.min()) < 0.0:
        raise ShapeError("histogram entries must be non-negative")
    sums = hist.sum(dim=-1)
    if float((sums - 1.0).abs().max()) > tol:
        raise ShapeError(f"histogram rows must sum to 1 (max deviation {float((sums - 1.0).abs().max())})")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).square().mean().sqrt()


def ccl_loss(h_pred: torch.Tensor, h_ref: torch.Tensor) -> torch.Tensor:
    """RMSE between predicted and reference histograms."""
    return _rmse(h_pred, h_ref)


def fea_loss(f_pred: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """RMSE between colorized and reference sRGB features."""
    if isinstance(f_pred, LatentFeature):
        f_pred = f_pred.values
    if isinstance(f_ref, LatentFeature):
        f_ref = f_ref.values
    return _rmse(f_pred, f_ref)


def colorization_loss(f_pred, f_ref, h_pred, h_ref, lambda_ccl: float) -> torch.Tensor:
    """Feature term plus weighted histogram term."""
    if lambda_ccl < 0:
        raise ConfigurationError(f"lambda_ccl must be >= 0, got {lambda_ccl}")
    total = fea_loss(f_pred, f_ref)
    if lambda_ccl != 0.0:
        total = total + lambda_ccl * ccl_loss(h_pred, h_ref)
    return total


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class HistogramPredictor(nn.Module):
    """RAW embedding -> per-channel color histogram (B, 3, 256)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
        )
        self.head = nn.Sequential(
            nn.Linear(channels, 256), nn.SiLU(), nn.Linear(256, 3 * NUM_BINS)
        )

    def forward(self, f_r: torch.Tensor) -> torch.Tensor:
        h = self.body(f_r)
        pooled = h.mean(dim=(2, 3))
        logits = self.head(pooled).reshape(-1, 3, NUM_BINS)
        return torch.softmax(logits, dim=-1)


class HistogramMixer(nn.Module):
    """Histogram (B, 3, 256) -> channel-mixing matrix (B, c, c)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Sequential(
            nn.Conv1d(3, 16, 5, stride=2, padding=2), nn.SiLU(),
            nn.Conv1d(16, 32, 5, stride=2, padding=2), nn.SiLU(),
            nn.Conv1d(32, 32, 5, stride=2, padding=2), nn.SiLU(),
        )
        self.proj = nn.Linear(32 * (NUM_BINS // 8), channels * channels)

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        if hist.shape[-2:] != (3, NUM_BINS):
            raise ShapeError(f"histogram must be (B, 3, {NUM_BINS}), got {tuple(hist.shape)}")
        h = self.conv(hist)
        m = self.proj(h.flatten(1))
        return m.reshape(-1, self.channels, self.channels)


class CrossAttentionColorizer(nn.Module):
    """Color feature queries the grayscale feature over spatial positions."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigurationError(
                f"heads ({heads}) must divide the channel count ({channels})"
            )
        self.channels = channels
        self.heads = heads
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.to_out = nn.Conv2d(channels, channels, 1)

    def _split(self, x, b, n):
        return x.reshape(b, self.heads, self.channels // self.heads, n).transpose(2, 3)

    def attention_weights(self, f_c: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        """(B, heads, Nq, Nk) row-stochastic attention matrix."""
        b, _, hq, wq = f_c.shape
        n_q, n_k = hq * wq, f_g.shape[2] * f_g.shape[3]
        q = self._split(self.to_q(f_c).flatten(2), b, n_q)
        k = self._split(self.to_k(f_g).flatten(2), b, n_k)
        scale = (self.channels // self.heads) ** -0.5
        return torch.softmax(q @ k.transpose(2, 3) * scale, dim=-1)

    def forward(self, f_c: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if f_c.ndim != 4 or f_g.ndim != 4:
            raise ShapeError("attention inputs must be (B, c, h, w)")
        if f_c.shape[1] != self.channels or f_g.shape[1] != self.channels:
            raise ShapeError(
                f"attention expects {self.channels} channels, got "
                f"{f_c.shape[1]} (color) and {f_g.shape[1]} (gray)"
            )
        b, _, h, w = f_c.shape
        n_q, n_k = h * w, f_g.shape[2] * f_g.shape[3]
        weights = self.attention_weights(f_c, f_g)
        v = self._split(self.to_v(f_g).flatten(2), b, n_k)
        out = weights @ v  # (B, heads, Nq, d)
        out = out.transpose(2, 3).reshape(b, self.channels, h, w)
        return self.to_out(out)


class HistogramColorizer(nn.Module):
    """Bundle of histogram predictor, mixer, and attention colorizer."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        self.channels = channels
        self.hist_predictor = HistogramPredictor(channels)
        self.mixer = HistogramMixer(channels)
        self.attn = CrossAttentionColorizer(channels, heads)

    def predict_histogram(self, f_r: LatentFeature) -> torch.Tensor:
        """Color-histogram prediction; accepts only RAW-modality features."""
        if not isinstance(f_r, LatentFeature) or f_r.modality != "raw":
            got = f_r.modality if isinstance(f_r, LatentFeature) else type(f_r).__name__
            raise ConfigurationError(
                f"histogram prediction consumes RAW features, got {got!r}"
            )
        if f_r.values.shape[1] != self.channels:
            raise ShapeError(
                f"expected {self.channels} channels, got {f_r.values.shape[1]}"
            )
        return self.hist_predictor(f_r.values)

    def color_feature(self, hist: torch.Tensor, f_r: LatentFeature) -> LatentFeature:
        """Apply the histogram-derived mixing matrix at every position."""
        values = f_r.values if isinstance(f_r, LatentFeature) else f_r
        matrix = self.mixer(hist)
        if matrix.shape[-1] != values.shape[1]:
            raise ShapeError(
                f"mixing matrix is {tuple(matrix.shape[1:])} but features have "
                f"{values.shape[1]} channels"
            )
        mixed = torch.einsum("bij,bjhw->bihw", matrix, values)
        scale = f_r.scale if isinstance(f_r, LatentFeature) else 0
        return LatentFeature(mixed, "srgb", scale)

    def colorize(self, f_c: LatentFeature, f_g: LatentFeature) -> LatentFeature:
        """Cross-attend color queries onto grayscale keys/values."""
        c_vals = f_c.values if isinstance(f_c, LatentFeature) else f_c
        g_vals = f_g.values if isinstance(f_g, LatentFeature) else f_g
        out = self.attn(c_vals, g_vals)
        scale = f_c.scale if isinstance(f_c, LatentFeature) else 0
        return LatentFeature(out, "srgb", scale)

    def forward(self, f_r: LatentFeature, f_g_hat: LatentFeature):
        hist = self.predict_histogram(f_r)
        f_c = self.color_feature(hist, f_r)
        f_s_hat = self.colorize(f_c, f_g_hat)
        return f_s_hat, hist


def reference_histogram(srgb: torch.Tensor, scale_k: int) -> torch.Tensor:
    """Soft histogram of the target image area-averaged to latent resolution.

    Matching the predictor's operating resolution keeps the supervision
    comparable across scales; averaging is exact (integer factor pooling).
    """
    if srgb.ndim != 4 or srgb.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W), got {tuple(srgb.shape)}")
    factor = 1 << scale_k
    if srgb.shape[2] % factor or srgb.shape[3] % factor:
        raise ShapeError(
            f"image dims {tuple(srgb.shape[2:])} must divide by 2^{scale_k}"
        )
    small = nn.functional.avg_pool2d(srgb, factor)
    return soft_histogram(small)
