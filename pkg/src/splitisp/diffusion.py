"""Conditional latent diffusion of grayscale detail features.

The noise predictor is a small U-Net over the latent grid, conditioned on
the RAW embedding by channel concatenation and on the timestep by a
sinusoidal embedding added at every scale.  Training supervises the
clean-feature estimate directly (content term) plus a texture-matching term
computed from Gaussian-smoothed Sobel magnitudes of the features.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .codec import LatentFeature
from .errors import ConfigurationError, NumericError, ShapeError
from .schedule import NoiseSchedule, SamplerConfig, ddim_step, estimate_x0, q_sample

TEXTURE_EPS = 1e-8


# ---------------------------------------------------------------------------
# texture operator and losses
# ---------------------------------------------------------------------------

def _gaussian5(dtype, device):
    x = torch.arange(-2, 3, dtype=dtype, device=device)
    g = torch.exp(-0.5 * x * x)  # sigma = 1
    g = g / g.sum()
    return torch.outer(g, g)


def _sobel(dtype, device):
    gx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
                      dtype=dtype, device=device)
    return gx, gx.t().contiguous()


def _depthwise(x, kernel):
    c = x.shape[1]
    k = kernel.shape[-1]
    pad = k // 2
    x = nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    weight = kernel.expand(c, 1, k, k)
    return nn.functional.conv2d(x, weight, groups=c)


def texture_map(features: torch.Tensor) -> torch.Tensor:
    """Smoothed gradient-magnitude map, averaged over channels.

    Each channel is blurred with a 5x5 Gaussian (sigma 1, reflect padding),
    filtered with the standard 3x3 Sobel pair, and reduced to
    ``sqrt(gx^2 + gy^2 + eps^2)``; the channel mean gives a (B, 1, h, w)
    map.  Constant inputs produce a map at the eps floor (~1e-8), and adding
    a constant to the input leaves the map unchanged.
    """
    if features.ndim != 4:
        raise ShapeError(f"expected (B, C, h, w), got {tuple(features.shape)}")
    if features.shape[2] < 3 or features.shape[3] < 3:
        raise ShapeError(
            f"spatial dims must be >= 3 for the 5x5/3x3 stencils, got {tuple(features.shape[2:])}"
        )
    gauss = _gaussian5(features.dtype, features.device)
    sob_x, sob_y = _sobel(features.dtype, features.device)
    smooth = _depthwise(features, gauss)
    gx = _depthwise(smooth, sob_x)
    gy = _depthwise(smooth, sob_y)
    mag = torch.sqrt(gx * gx + gy * gy + TEXTURE_EPS * TEXTURE_EPS)
    return mag.mean(dim=1, keepdim=True)


def mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Plain mean absolute difference (the texture-loss reduction)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def tel_loss(f_hat: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between the two texture maps."""
    return mean_abs(texture_map(f_hat), texture_map(f_ref))


def con_loss(f_hat: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Root-mean-square difference between estimate and reference."""
    if f_hat.shape != f_ref.shape:
        raise ShapeError(f"shape mismatch {tuple(f_hat.shape)} vs {tuple(f_ref.shape)}")
    return (f_hat - f_ref).square().mean().sqrt()


# ---------------------------------------------------------------------------
# noise predictor
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style frequency embedding of step indices."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _TimeResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, time_dim, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(8, ch_out)
        self.act = nn.SiLU()
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, ch_out)
        if stride != 1 or ch_in != ch_out:
            self.skip = nn.Conv2d(ch_in, ch_out, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x, temb):
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class NoisePredictor(nn.Module):
    """Two-scale conditional U-Net estimating the injected noise.

    forward(x_t, cond, t) -> eps_hat with x_t's shape.  ``cond`` must match
    x_t spatially; ``t`` may be a python int (shared across the batch) or a
    (B,) integer tensor.  Besides the encoder-decoder skip, a zero-initialised
    step-gated passthrough adds ``gate(t) * x_t`` to the head output, and the
    head itself carries a step-dependent scale (1 at initialisation).

    When built with a ``sched``, the head output is read as the clean-signal
    estimate and converted to the noise estimate through the forward-process
    algebra, ``eps_hat = (x_t - sqrt(ab_t) * head) / sqrt(1 - ab_t)``.  This
    keeps the regression target at the same scale for every step: recovering
    the clean signal from ``eps_hat`` cancels back to the head output exactly,
    instead of amplifying head error by sqrt((1-ab_t)/ab_t).  Without a
    schedule the head output is returned as the noise estimate directly.
    """

    def __init__(self, channels: int, cond_channels: int, base: int = 64,
                 sched=None):
        super().__init__()
        if base < 8 or base % 8:
            raise ConfigurationError(f"base width must be a multiple of 8, got {base}")
        self.channels = channels
        self.cond_channels = cond_channels
        time_dim = base * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.emb_dim = base
        self.conv_in = nn.Conv2d(channels + cond_channels, base, 3, padding=1)
        self.enc1 = _TimeResBlock(base, base, time_dim)
        self.down = _TimeResBlock(base, base * 2, time_dim, stride=2)
        self.enc2 = _TimeResBlock(base * 2, base * 2, time_dim)
        self.mid = _TimeResBlock(base * 2, base * 2, time_dim)
        self.up = nn.Conv2d(base * 2, base, 3, padding=1)
        self.dec1 = _TimeResBlock(base * 2, base, time_dim)
        self.out_norm = nn.GroupNorm(8, base)
        self.out_act = nn.SiLU()
        self.conv_out = nn.Conv2d(base, channels, 3, padding=1)
        # Zero-initialised step-dependent passthrough: at high noise the
        # injected noise nearly equals the input itself, which the normalised
        # trunk cannot reproduce cheaply, so a learned gate carries it across.
        # The head scale plays the mirrored role at low noise, where the
        # required correction outgrows what the normalised trunk emits.
        self.gate = nn.Linear(time_dim, 1)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)
        self.head_scale = nn.Linear(time_dim, 1)
        nn.init.zeros_(self.head_scale.weight)
        nn.init.zeros_(self.head_scale.bias)
        if sched is None:
            self.alpha_bars = None
        else:
            bars = torch.as_tensor(np.asarray(sched.alpha_bars), dtype=torch.float64)
            self.register_buffer("alpha_bars", bars, persistent=False)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        if isinstance(cond, LatentFeature):
            cond = cond.values
        if x_t.ndim != 4 or cond.ndim != 4:
            raise ShapeError("x_t and cond must be (B, C, h, w) tensors")
        if x_t.shape[1] != self.channels or cond.shape[1] != self.cond_channels:
            raise ShapeError(
                f"channel mismatch: x_t has {x_t.shape[1]} (want {self.channels}), "
                f"cond has {cond.shape[1]} (want {self.cond_channels})"
            )
        if x_t.shape[0] != cond.shape[0] or x_t.shape[2:] != cond.shape[2:]:
            raise ShapeError(
                f"x_t {tuple(x_t.shape)} and cond {tuple(cond.shape)} must align"
            )
        if x_t.shape[2] % 2 or x_t.shape[3] % 2:
            raise ShapeError(f"latent dims must be even, got {tuple(x_t.shape[2:])}")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), device=x_t.device, dtype=torch.long)
        elif t.ndim == 0:
            t = t[None].expand(x_t.shape[0])
        temb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim).to(x_t.dtype))

        h = self.conv_in(torch.cat([x_t, cond], dim=1))
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down(h1, temb), temb)
        h2 = self.mid(h2, temb)
        u = self.up(nn.functional.interpolate(h2, scale_factor=2, mode="nearest"))
        u = self.dec1(torch.cat([u, h1], dim=1), temb)
        gate = self.gate(temb)[:, :, None, None]
        scale = 1.0 + self.head_scale(temb)[:, :, None, None]
        head = scale * self.conv_out(self.out_act(self.out_norm(u))) + gate * x_t
        if self.alpha_bars is None:
            return head
        bars = self.alpha_bars[t]
        root_ab = bars.sqrt().to(x_t.dtype)[:, None, None, None]
        root_rest = (1.0 - bars).sqrt().to(x_t.dtype)[:, None, None, None]
        return (x_t - root_ab * head) / root_rest


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

def diffusion_losses(f_g: torch.Tensor, f_r: torch.Tensor, sched: NoiseSchedule,
                     model, lambda_tel: float, t: torch.Tensor, eps: torch.Tensor):
    """Content + texture objective for given (t, eps) draws.

    Returns (total, parts, x0_hat) where parts holds detached floats for
    logging.  With ``lambda_tel == 0`` the total is exactly the content term
    (the texture term is still measured for the log, grad-free).
    """
    x_t = q_sample(f_g, t, eps, sched)
    eps_hat = model(x_t, f_r, t)
    x0_hat = estimate_x0(x_t, t, eps_hat, sched)
    l_con = con_loss(x0_hat, f_g)
    if lambda_tel == 0.0:
        with torch.no_grad():
            l_tel = tel_loss(x0_hat, f_g)
        total = l_con
    else:
        l_tel = tel_loss(x0_hat, f_g)
        total = l_con + lambda_tel * l_tel
    parts = {"loss_con": float(l_con.detach()), "loss_tel": float(l_tel.detach())}
    return total, parts, x0_hat


def draw_training_noise(f_g: torch.Tensor, sched: NoiseSchedule,
                        generator: torch.Generator):
    """One (t, eps) draw per batch element from the given generator."""
    b = f_g.shape[0]
    t = torch.randint(0, sched.num_steps, (b,), generator=generator,
                      device=f_g.device)
    eps = torch.randn(f_g.shape, generator=generator, device=f_g.device,
                      dtype=f_g.dtype)
    return t, eps


def diffusion_train_step(f_g, f_r, sched: NoiseSchedule, model,
                         lambda_tel: float, generator: torch.Generator):
    """Draw (t, eps), compute the objective, and backpropagate it.

    Gradients land only in ``model`` parameters; the feature inputs are
    treated as constants.  Returns (loss_value, parts).
    """
    if isinstance(f_g, LatentFeature):
        f_g = f_g.values
    if isinstance(f_r, LatentFeature):
        f_r = f_r.values
    f_g = f_g.detach()
    f_r = f_r.detach()
    t, eps = draw_training_noise(f_g, sched, generator)
    total, parts, _ = diffusion_losses(f_g, f_r, sched, model, lambda_tel, t, eps)
    if not torch.isfinite(total.detach()):
        raise NumericError(
            "non-finite diffusion loss",
            context={"t": t.tolist(), **parts},
        )
    if total.requires_grad:  # parameterless oracle models build no graph
        total.backward()
    parts = dict(parts, t=t.tolist())
    return float(total.detach()), parts


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(cond, sched: NoiseSchedule, cfg: SamplerConfig, model,
           generator: torch.Generator, initial_noise: torch.Tensor = None) -> LatentFeature:
    """Draw a grayscale detail feature conditioned on a RAW embedding.

    Runs the accelerated reverse process over ``cfg.timesteps`` (descending)
    and finishes with the terminal jump to the clean state.  Deterministic
    for eta == 0 given the initial noise; the generator seeds that noise
    when ``initial_noise`` is not supplied.
    """
    if isinstance(cond, LatentFeature):
        scale = cond.scale
        cond_values = cond.values
    else:
        scale = 0
        cond_values = cond
    if cfg.timesteps[-1] != sched.num_steps - 1:
        raise ConfigurationError(
            f"sampler ends at step {cfg.timesteps[-1]} but the schedule has "
            f"{sched.num_steps} steps; it must start from the noisiest step"
        )
    shape = cond_values.shape
    if initial_noise is None:
        x = torch.randn(shape, generator=generator, device=cond_values.device,
                        dtype=cond_values.dtype)
    else:
        if tuple(initial_noise.shape) != tuple(shape):
            raise ShapeError(
                f"initial noise {tuple(initial_noise.shape)} must match cond {tuple(shape)}"
            )
        x = initial_noise
    steps = list(cfg.timesteps)[::-1]
    with torch.no_grad():
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else -1
            eps_hat = model(x, cond_values, t)
            noise = None
            if cfg.eta > 0.0 and t_prev != -1:
                noise = torch.randn(shape, generator=generator,
                                    device=x.device, dtype=x.dtype)
            x = ddim_step(x, eps_hat, t, t_prev, sched, eta=cfg.eta if t_prev != -1 else 0.0,
                          noise=noise)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite sampler state after step t={t}",
                                   context={"t": t, "step": i})
    return LatentFeature(x, "gray", scale)
