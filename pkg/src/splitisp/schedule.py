"""Noise-schedule math for the latent diffusion stage.

Everything here is small, deterministic float64 numpy plus a few polymorphic
ops that accept torch tensors (training) or plain floats (tests, closed-form
checks).  Indexing convention: schedule arrays are 0-based, so step index
``t`` ranges over ``[0, T)`` and ``alpha_bars[t]`` is the running product
through that step.  The virtual predecessor of step 0 is clean data with
``alpha_bar == 1``; ``ddim_step`` accepts ``t_prev == -1`` to mean exactly
that terminal state.  ``posterior_variance`` alone counts steps from 1 (its
classical definition needs the predecessor), see its docstring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, OrderingError

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed coefficient tables for a variance schedule.

    Attributes:
        betas: per-step noise increments, shape (T,), float64.
        alphas: 1 - betas.
        alpha_bars: running product of alphas.
        posterior_vars: reverse-transition variances; ``posterior_vars[i]``
            is the variance for the transition out of 0-based step ``i``
            (0 at i == 0, where the predecessor is clean data).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def fingerprint(self) -> str:
        """Stable identity string: step count plus beta endpoints."""
        return "T=%d beta=[%.10g,%.10g]" % (
            self.num_steps,
            float(self.betas[0]),
            float(self.betas[-1]),
        )


def schedule_from_betas(betas) -> NoiseSchedule:
    """Build a NoiseSchedule from an explicit beta sequence.

    Args:
        betas: 1-D sequence of noise increments, each in (0, 1).

    Returns:
        NoiseSchedule with float64 coefficient tables.

    Raises:
        ConfigurationError: empty sequence or any beta outside (0, 1).
        NumericError: the running product underflows the 1e-8 floor.
    """
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ConfigurationError("betas must be a non-empty 1-D sequence")
    if not np.all((b > 0.0) & (b < 1.0)):
        bad = np.where((b <= 0.0) | (b >= 1.0))[0]
        raise ConfigurationError(
            f"betas must lie strictly inside (0, 1); offending indices {bad[:8].tolist()}"
        )
    alphas = 1.0 - b
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[-1] < ALPHA_BAR_FLOOR:
        raise NumericError(
            "alpha_bar underflowed the %g floor (reached %g at the final step); "
            "shorten the schedule or lower beta_end" % (ALPHA_BAR_FLOOR, alpha_bars[-1]),
            context={"alpha_bar_final": float(alpha_bars[-1])},
        )
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior = (1.0 - prev) / (1.0 - alpha_bars) * b
    return NoiseSchedule(b, alphas, alpha_bars, posterior)


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear variance schedule between two beta endpoints.

    Args:
        num_steps: T, number of diffusion steps (>= 1).
        beta_start: beta at step 0.
        beta_end: beta at step T-1.  With T == 1 only beta_start is used.

    Returns:
        NoiseSchedule of length ``num_steps``.
    """
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
    if beta_end < beta_start:
        raise ConfigurationError(
            f"beta_end ({beta_end}) must be >= beta_start ({beta_start})"
        )
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return schedule_from_betas(betas)


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < sched.num_steps:
        raise IndexError(f"step index {t} outside [0, {sched.num_steps})")
    return t


def _coeff(values: np.ndarray, t, like):
    """Gather ``values[t]`` for a 1-D integer tensor ``t`` (one step per
    batch element), shaped to broadcast against ``like``."""
    import torch

    idx = t.detach().cpu().numpy().astype(np.int64)
    if np.any((idx < 0) | (idx >= values.shape[0])):
        raise IndexError(
            f"step indices {idx.tolist()} outside [0, {values.shape[0]})"
        )
    out = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    return out.reshape((-1,) + (1,) * (like.ndim - 1))


def _is_batched_t(t) -> bool:
    import torch

    return isinstance(t, torch.Tensor) and t.ndim > 0


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form forward jump: noise clean data straight to step ``t``.

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps

    Args:
        x0: clean data (tensor, array, or float).
        t: step index in [0, T), or a 1-D tensor of per-element indices.
        eps: noise with the same shape as x0.
        sched: coefficient tables.
    """
    if _is_batched_t(t):
        ab = _coeff(sched.alpha_bars, t, x0)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    ab = float(sched.alpha_bars[_check_t(t, sched)])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def estimate_x0(x_t, t, eps_hat, sched: NoiseSchedule):
    """Invert the forward jump: recover the clean-data estimate from noise.

    x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)

    Raises:
        NumericError: alpha_bar_t sits below the 1e-8 floor (the division
            would amplify noise by >= 1e4).
    """
    if _is_batched_t(t):
        ab = _coeff(sched.alpha_bars, t, x_t)
        if float(ab.min()) < ALPHA_BAR_FLOOR:
            raise NumericError(
                "alpha_bar below floor in estimate_x0", context={"t": t.tolist()}
            )
        return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    ab = sched.alpha_bars[_check_t(t, sched)]
    if ab < ALPHA_BAR_FLOOR:
        raise NumericError("alpha_bar below floor in estimate_x0", context={"t": int(t)})
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    """Variance of the reverse transition for step number ``t`` in [1, T].

    Steps are counted from 1 here, matching the classical recurrence
    sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t with
    alpha_bar_0 == 1 (so sigma_1^2 == 0).  ``sched.posterior_vars[i]`` holds
    the same quantity for 0-based step ``i`` (= step number i + 1).
    """
    t = int(t)
    if not 1 <= t <= sched.num_steps:
        raise IndexError(f"step number {t} outside [1, {sched.num_steps}]")
    return float(sched.posterior_vars[t - 1])


@dataclass(frozen=True)
class SamplerConfig:
    """Deterministic accelerated-sampler settings.

    Attributes:
        num_sample_steps: S, number of reverse updates applied.
        eta: stochasticity knob in [0, 1]; 0 is the deterministic sampler.
        timesteps: strictly increasing 0-based step indices visited by the
            sampler, ending at the final training step T-1.
    """

    num_sample_steps: int
    eta: float = 0.0
    timesteps: tuple = field(default=())

    def __post_init__(self):
        if self.num_sample_steps < 1:
            raise ConfigurationError("num_sample_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")
        ts = tuple(int(t) for t in self.timesteps)
        if len(ts) != self.num_sample_steps:
            raise ConfigurationError(
                f"timesteps has {len(ts)} entries, expected {self.num_sample_steps}"
            )
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise OrderingError(f"timesteps must be strictly increasing, got {ts}")
        if ts[0] < 0:
            raise IndexError(f"timesteps must be >= 0, got {ts[0]}")
        object.__setattr__(self, "timesteps", ts)


def uniform_sampler_config(
    num_steps: int, num_sample_steps: int, eta: float = 0.0
) -> SamplerConfig:
    """Evenly strided sample-step subsequence that always ends at T-1.

    Stride is ``T // S`` counted down from the final step, so the noisiest
    step is always visited and the earliest visited step stays >= 0.
    """
    if not 1 <= num_sample_steps <= num_steps:
        raise ConfigurationError(
            f"need 1 <= S <= T, got S={num_sample_steps}, T={num_steps}"
        )
    stride = num_steps // num_sample_steps
    ts = tuple(num_steps - 1 - i * stride for i in reversed(range(num_sample_steps)))
    return SamplerConfig(num_sample_steps, eta, ts)


def ddim_sigma(t: int, t_prev: int, sched: NoiseSchedule, eta: float) -> float:
    """Noise scale of the relaxed reverse update from ``t`` to ``t_prev``.

    Zero when eta == 0; at eta == 1 with adjacent steps it reproduces the
    ancestral posterior standard deviation.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must be in [0, 1], got {eta}")
    if eta == 0.0:
        return 0.0
    t = _check_t(t, sched)
    ab_t = float(sched.alpha_bars[t])
    ab_prev = 1.0 if t_prev == -1 else float(sched.alpha_bars[int(t_prev)])
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(
        1.0 - ab_t / ab_prev
    )


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule,
              eta: float = 0.0, noise=None):
    """One deterministic (or eta-relaxed) reverse update between two steps.

    Jumps from step ``t`` to the earlier step ``t_prev`` (``-1`` denotes the
    virtual clean state with alpha_bar == 1, collapsing the update to the
    clean-data estimate).  With eta == 0:

        x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_hat

    With eta > 0 the classical relaxed update applies and ``noise`` (same
    shape as x_t) must be supplied.
    """
    t = _check_t(t, sched)
    t_prev = int(t_prev)
    if t_prev >= t:
        raise OrderingError(f"t_prev ({t_prev}) must be < t ({t})")
    if t_prev < -1:
        raise IndexError(f"t_prev must be >= -1, got {t_prev}")

    ab_prev = 1.0 if t_prev == -1 else float(sched.alpha_bars[t_prev])
    x0_hat = estimate_x0(x_t, t, eps_hat, sched)
    sigma = ddim_sigma(t, t_prev, sched, eta)
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + dir_coeff * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ConfigurationError("eta > 0 requires a noise argument")
        out = out + sigma * noise
    return out
