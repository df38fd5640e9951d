"""Shared latent codec: one backbone, one head per image modality.

The codec embeds RAW mosaics, grayscale images, and sRGB images into a
common (c, H/2^k, W/2^k) feature space and decodes back.  Downsampling is
done by strided residual blocks, upsampling by nearest-neighbor resize plus
a residual block; the decoder ends in a sigmoid so reconstructions always
land in [0, 1].

When ``pack_raw`` is on, the RAW path consumes the 4-channel half-resolution
CFA stack instead of the flat mosaic and uses one fewer resampling stage, so
latent grids from all modalities still align.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, NumericError, ShapeError

MODALITIES = ("raw", "gray", "srgb")
_CHANNELS = {"raw": 1, "gray": 1, "srgb": 3}


@dataclass
class LatentFeature:
    """A batch of codec-space features with bookkeeping.

    values: (B, c, h, w) float tensor.
    modality: which image space the feature represents ("raw", "gray",
        "srgb"); derived color features reuse "srgb".
    scale: k, the log2 spatial reduction relative to the source image.
    """

    values: torch.Tensor
    modality: str
    scale: int

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        if self.values.ndim != 4:
            raise ShapeError(f"latent values must be (B, c, h, w), got {tuple(self.values.shape)}")

    def detach(self) -> "LatentFeature":
        return replace(self, values=self.values.detach())

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass(frozen=True)
class CodecConfig:
    scale_k: int = 2
    channels: int = 64
    pack_raw: bool = False

    def __post_init__(self):
        if self.scale_k < 1:
            raise ConfigurationError(f"scale_k must be >= 1, got {self.scale_k}")
        if self.channels < 8 or self.channels % 8:
            raise ConfigurationError(
                f"channels must be a positive multiple of 8, got {self.channels}"
            )
        if self.pack_raw and self.scale_k < 2:
            raise ConfigurationError("pack_raw requires scale_k >= 2")


def _norm(ch):
    return nn.GroupNorm(8, ch)


class ResidualBlock(nn.Module):
    """conv-norm-act-conv with identity (or strided 1x1) skip."""

    def __init__(self, ch_in, ch_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1)
        self.norm1 = _norm(ch_out)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.norm2 = _norm(ch_out)
        if stride != 1 or ch_in != ch_out:
            self.skip = nn.Conv2d(ch_in, ch_out, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class _UpBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = ResidualBlock(ch, ch)

    def forward(self, x):
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.body(x)


class ImageCodec(nn.Module):
    """Multi-head encoder/decoder over a shared resampling trunk."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        heads_in = dict(_CHANNELS)
        if cfg.pack_raw:
            heads_in["raw"] = 4
        self.enc_heads = nn.ModuleDict(
            {m: nn.Conv2d(heads_in[m], c, 3, padding=1) for m in MODALITIES}
        )
        self.enc_trunk = nn.ModuleList(
            [ResidualBlock(c, c, stride=2) for _ in range(cfg.scale_k)]
        )
        self.dec_trunk = nn.ModuleList([_UpBlock(c) for _ in range(cfg.scale_k)])
        self.dec_heads = nn.ModuleDict(
            {m: nn.Conv2d(c, heads_in[m], 3, padding=1) for m in MODALITIES}
        )

    def _stages(self, modality):
        # Packed RAW starts at half resolution, so it skips one resampling stage.
        k = self.cfg.scale_k
        return k - 1 if (modality == "raw" and self.cfg.pack_raw) else k

    def _check_modality(self, modality):
        if modality not in MODALITIES:
            raise ConfigurationError(
                f"unknown modality {modality!r}; expected one of {MODALITIES}"
            )

    def expected_channels(self, modality):
        self._check_modality(modality)
        if modality == "raw" and self.cfg.pack_raw:
            return 4
        return _CHANNELS[modality]

    def encode(self, image: torch.Tensor, modality: str) -> LatentFeature:
        """Embed a (B, ch, H, W) image batch; H and W must divide by 2^stages."""
        self._check_modality(modality)
        if image.ndim != 4:
            raise ShapeError(f"expected (B, ch, H, W), got {tuple(image.shape)}")
        ch = self.expected_channels(modality)
        if image.shape[1] != ch:
            raise ShapeError(
                f"{modality} input must have {ch} channel(s), got {image.shape[1]}"
            )
        stages = self._stages(modality)
        div = 1 << stages
        if image.shape[2] % div or image.shape[3] % div:
            raise ShapeError(
                f"{modality} spatial dims {tuple(image.shape[2:])} must divide by {div} "
                f"(2^{stages} resampling stages)"
            )
        h = self.enc_heads[modality](image)
        for block in self.enc_trunk[:stages]:
            h = block(h)
        if not torch.isfinite(h.detach()).all():
            raise NumericError(f"non-finite encoder output for modality {modality!r}")
        return LatentFeature(h, modality, self.cfg.scale_k)

    def decode(self, feat, modality: str) -> torch.Tensor:
        """Reconstruct a (B, ch, H, W) image in [0, 1] from a latent."""
        self._check_modality(modality)
        values = feat.values if isinstance(feat, LatentFeature) else feat
        if values.ndim != 4 or values.shape[1] != self.cfg.channels:
            raise ShapeError(
                f"latent must be (B, {self.cfg.channels}, h, w), got {tuple(values.shape)}"
            )
        h = values
        for block in self.dec_trunk[:self._stages(modality)]:
            h = block(h)
        out = torch.sigmoid(self.dec_heads[modality](h))
        if not torch.isfinite(out.detach()).all():
            raise NumericError(f"non-finite decoder output for modality {modality!r}")
        return out


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Root-mean-square error; zero iff the tensors match exactly."""
    if recon.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    return (recon - target).square().mean().sqrt()


def stage1_loss(model, batch: dict) -> torch.Tensor:
    """Mean autoencoding RMSE across the modalities present in ``batch``.

    ``batch`` maps modality name -> (B, ch, H, W) tensor.  ``model`` only
    needs encode/decode, so contrived stand-ins can exercise the arithmetic.
    """
    if not batch:
        raise ConfigurationError("stage1_loss needs at least one modality")
    losses = []
    for modality, images in batch.items():
        recon = model.decode(model.encode(images, modality), modality)
        losses.append(reconstruction_loss(recon, images))
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# numpy <-> torch boundary helpers
# ---------------------------------------------------------------------------

def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W) or (H, W, C) float array -> (1, C, H, W) float32 tensor."""
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a.transpose(2, 0, 1)[None]
    else:
        raise ShapeError(f"expected 2-D or 3-D image, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W) or (H, W, C) float64 array."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ShapeError(f"expected (1, C, H, W), got {tuple(t.shape)}")
    a = t.detach().cpu().numpy().astype(np.float64)[0]
    if a.shape[0] == 1:
        return a[0]
    return a.transpose(1, 2, 0)
