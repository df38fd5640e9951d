"""Run configuration, two-stage training loops, checkpoints, and inference.

Stage 1 fits the multi-head codec alone (autoencoding all three
modalities).  Stage 2 freezes the codec and jointly fits the noise
predictor (content + texture objective) and the histogram colorizer
(feature + histogram objective); the clean-feature estimate is detached
before entering the colorization branch so each objective shapes only its
own module.

Checkpoints are single-file bundles carrying module states, optimizer and
lr-scheduler states, RNG states, and config/schedule fingerprints so a
resumed run continues the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import synthesis
from .bayer import BayerRaw, normalize_raw, pack_cfa, to_grayscale
from .codec import CodecConfig, ImageCodec, LatentFeature, image_to_tensor, stage1_loss, tensor_to_image
from .colorize import HistogramColorizer, ccl_loss, fea_loss, reference_histogram
from .diffusion import NoisePredictor, diffusion_losses, draw_training_noise, sample
from .errors import (
    CheckpointError,
    ConfigurationError,
    NumericError,
    ValidationError,
)
from .schedule import NoiseSchedule, make_schedule, uniform_sampler_config

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat run settings; every field doubles as a config-file key."""

    # data
    manifest: str = ""
    source_dir: str = ""
    split_ratio: float = 0.9
    bit_depth: int = 10
    gamma: float = 2.2
    gain_r: float = 2.0
    gain_g: float = 1.0
    gain_b: float = 1.6
    noise_std: float = 0.002
    pack_raw: bool = False
    # model
    scale_k: int = 2
    latent_channels: int = 64
    unet_base: int = 64
    attn_heads: int = 1
    # diffusion
    diffusion_steps: int = 1000
    sample_steps: int = 25
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0
    # optimization
    stage: int = 1
    batch_size: int = 4
    patch_size: int = 64
    lr: float = 1e-4
    lr_decay: float = 0.8
    lambda_tel: float = 0.01
    lambda_ccl: float = 0.01
    grad_clip: float = 1.0
    max_iters: int = 2000
    ckpt_every: int = 500
    log_every: int = 25
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        for key in ("batch_size", "patch_size", "max_iters", "ckpt_every",
                    "log_every", "diffusion_steps", "sample_steps",
                    "scale_k", "latent_channels", "unet_base", "attn_heads"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("lambda_tel", "lambda_ccl", "noise_std"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigurationError(f"split_ratio must be in (0, 1], got {self.split_ratio}")
        if self.lr <= 0 or not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(
                f"lr must be > 0 and lr_decay in (0, 1], got {self.lr}/{self.lr_decay}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")
        if not 1 <= self.sample_steps <= self.diffusion_steps:
            raise ConfigurationError(
                f"sample_steps must be in [1, diffusion_steps], got {self.sample_steps}"
            )
        if self.beta_start <= 0 or self.beta_end >= 1 or self.beta_end < self.beta_start:
            raise ConfigurationError(
                f"need 0 < beta_start <= beta_end < 1, got [{self.beta_start}, {self.beta_end}]"
            )
        if self.patch_size % (1 << self.scale_k):
            raise ConfigurationError(
                f"patch_size must divide by 2^scale_k = {1 << self.scale_k}"
            )
        if self.grad_clip <= 0:
            raise ConfigurationError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        # construction below re-validates bit_depth / pack_raw constraints
        CodecConfig(self.scale_k, self.latent_channels, self.pack_raw)
        synthesis.DegradationParams(self.gamma, self.degradation_gains(),
                                    self.noise_std, self.bit_depth)
        return self

    def degradation_gains(self) -> tuple:
        return (self.gain_r, self.gain_g, self.gain_b)

    def degradation(self) -> synthesis.DegradationParams:
        return synthesis.DegradationParams(self.gamma, self.degradation_gains(),
                                           self.noise_std, self.bit_depth)


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _coerce(name: str, text: str, target_type) -> object:
    text = text.strip()
    try:
        if target_type is bool:
            if text.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[text.lower()]
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name!r}: {exc}") from exc


def config_field_types() -> dict:
    return {f.name: f.type for f in dataclasses.fields(RunConfig)}


_PY_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def _field_type(annotation):
    return _PY_TYPES[annotation] if isinstance(annotation, str) else annotation


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings; unknown keys and bad types are rejected."""
    types = {f.name: _field_type(f.type) for f in dataclasses.fields(RunConfig)}
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return dataclasses.replace(cfg, **values)


def load_config(path, overrides=()) -> RunConfig:
    """Parse a flat ``key = value`` config file and apply overrides."""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {body!r}")
            key, _, value = body.partition("=")
            pairs.append(f"{key.strip()}={value.strip()}")
    cfg = apply_overrides(RunConfig(), pairs)
    cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


ARCH_KEYS = ("scale_k", "latent_channels", "unet_base", "attn_heads",
             "pack_raw", "bit_depth", "diffusion_steps", "beta_start", "beta_end")
# A stage-1 checkpoint stores only the codec, so reusing one constrains just
# the codec/data settings; the denoiser and colorizer may be configured
# freely on top of it.
STAGE1_KEYS = ("scale_k", "latent_channels", "pack_raw", "bit_depth")


def config_fingerprint(cfg: RunConfig) -> str:
    """Stable identity of every architecture/schedule-relevant setting."""
    return "|".join(f"{k}={getattr(cfg, k)}" for k in ARCH_KEYS)


def schedule_fingerprint(cfg: RunConfig) -> str:
    return make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end).fingerprint()


# ---------------------------------------------------------------------------
# model bundle and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    cfg: RunConfig
    codec: ImageCodec
    predictor: NoisePredictor
    colorizer: HistogramColorizer
    sched: NoiseSchedule


def build_pipeline(cfg: RunConfig) -> Pipeline:
    """Construct all modules with seed-determined initial weights."""
    torch.manual_seed(cfg.seed)
    sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    codec = ImageCodec(CodecConfig(cfg.scale_k, cfg.latent_channels, cfg.pack_raw))
    predictor = NoisePredictor(
        cfg.latent_channels, cfg.latent_channels, cfg.unet_base, sched=sched
    )
    colorizer = HistogramColorizer(cfg.latent_channels, cfg.attn_heads)
    return Pipeline(cfg, codec, predictor, colorizer, sched)


def save_checkpoint(path, pipe: Pipeline, stage: int, iteration: int,
                    optimizer=None, lr_sched=None, data_generator=None) -> str:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "iteration": iteration,
        "config_fingerprint": config_fingerprint(pipe.cfg),
        "schedule_fingerprint": pipe.sched.fingerprint(),
        "config": dataclasses.asdict(pipe.cfg),
        "codec": pipe.codec.state_dict(),
        "predictor": pipe.predictor.state_dict() if stage >= 2 else None,
        "colorizer": pipe.colorizer.state_dict() if stage >= 2 else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "lr_sched": lr_sched.state_dict() if lr_sched is not None else None,
        "rng_torch": torch.get_rng_state(),
        "rng_data": data_generator.get_state() if data_generator is not None else None,
    }
    torch.save(payload, path)
    return str(path)


def read_checkpoint(path) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format "
            f"{payload.get('format_version') if isinstance(payload, dict) else type(payload)}"
        )
    return payload


def check_compatible(payload: dict, cfg: RunConfig, path="checkpoint") -> None:
    saved = payload.get("config") or {}
    keys = STAGE1_KEYS if payload.get("stage") == 1 else ARCH_KEYS
    got = "|".join(f"{k}={saved.get(k)}" for k in keys)
    want = "|".join(f"{k}={getattr(cfg, k)}" for k in keys)
    if got != want:
        raise CheckpointError(
            f"{path} was trained with a different architecture.\n"
            f"  checkpoint: {got}\n  config:     {want}"
        )
    if payload.get("stage") == 1:
        return
    want_sched = schedule_fingerprint(cfg)
    got_sched = payload.get("schedule_fingerprint")
    if got_sched != want_sched:
        raise CheckpointError(
            f"{path} carries a different noise schedule.\n"
            f"  checkpoint: {got_sched}\n  config:     {want_sched}"
        )


# ---------------------------------------------------------------------------
# in-memory training data
# ---------------------------------------------------------------------------

class PairData:
    """Aligned full-resolution tensors for every pair in one split."""

    def __init__(self, manifest_path, cfg: RunConfig, split: str = "train"):
        manifest = synthesis.load_manifest(manifest_path)
        if manifest.bit_depth != cfg.bit_depth:
            raise ConfigurationError(
                f"manifest bit_depth {manifest.bit_depth} != config bit_depth {cfg.bit_depth}"
            )
        entries = manifest.split_entries(split)
        if not entries:
            raise ValidationError(f"manifest has no {split!r} entries")
        self.cfg = cfg
        self.ids = []
        self.mosaics = []
        self.srgbs = []
        self.grays = []
        for entry in entries:
            raw_path, srgb_path = synthesis.resolve_entry(manifest_path, entry)
            raw = synthesis.load_raw_png(raw_path, manifest.bit_depth)
            srgb = synthesis.load_srgb_png(srgb_path)
            if raw.shape != srgb.shape[:2]:
                raise ValidationError(
                    f"{entry['raw']}: mosaic {raw.shape} does not match sRGB {srgb.shape[:2]}"
                )
            if min(raw.shape) < cfg.patch_size:
                raise ValidationError(
                    f"{entry['raw']}: image {raw.shape} smaller than patch_size {cfg.patch_size}"
                )
            self.ids.append(os.path.splitext(os.path.basename(entry["raw"]))[0])
            self.mosaics.append(torch.from_numpy(normalize_raw(raw)).float())
            self.srgbs.append(torch.from_numpy(srgb.transpose(2, 0, 1)).float())
            self.grays.append(torch.from_numpy(to_grayscale(srgb)).float())

    def __len__(self):
        return len(self.ids)

    def sample_batch(self, generator: torch.Generator) -> dict:
        """Draw an aligned patch batch; CFA phase is preserved (even offsets)."""
        cfg = self.cfg
        p = cfg.patch_size
        raws, grays, srgbs = [], [], []
        for _ in range(cfg.batch_size):
            idx = int(torch.randint(len(self.ids), (1,), generator=generator))
            h, w = self.mosaics[idx].shape
            top = 2 * int(torch.randint((h - p) // 2 + 1, (1,), generator=generator))
            left = 2 * int(torch.randint((w - p) // 2 + 1, (1,), generator=generator))
            raws.append(self.mosaics[idx][top:top + p, left:left + p])
            grays.append(self.grays[idx][top:top + p, left:left + p])
            srgbs.append(self.srgbs[idx][:, top:top + p, left:left + p])
        raw = torch.stack(raws)[:, None]
        if cfg.pack_raw:
            raw = _pack_batch(raw)
        return {
            "raw": raw,
            "gray": torch.stack(grays)[:, None],
            "srgb": torch.stack(srgbs),
        }


def _pack_batch(mosaics: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) mosaics -> (B, 4, H/2, W/2) CFA stacks."""
    m = mosaics[:, 0]
    return torch.stack(
        [m[:, 0::2, 0::2], m[:, 0::2, 1::2], m[:, 1::2, 0::2], m[:, 1::2, 1::2]],
        dim=1,
    )


def raw_to_tensor(raw: BayerRaw, cfg: RunConfig) -> torch.Tensor:
    """Normalize one mosaic into the encoder's RAW input layout."""
    plane = normalize_raw(raw)
    if cfg.pack_raw:
        packed = pack_cfa(plane).transpose(2, 0, 1)
        return torch.from_numpy(np.ascontiguousarray(packed)).float()[None]
    return image_to_tensor(plane)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def lr_milestones(max_iters: int) -> list:
    """Decay points: after completing 20/40/60/80% of the run."""
    ms = sorted({round(max_iters * q) for q in (0.2, 0.4, 0.6, 0.8)})
    return [m for m in ms if 1 <= m < max_iters]


class _JsonlLogger:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


class _Loop:
    """Shared scaffolding: optimizer, lr schedule, cadence, NaN abort."""

    def __init__(self, cfg, out_dir, stage, params, pipe):
        self.cfg = cfg
        self.out_dir = out_dir
        self.stage = stage
        self.pipe = pipe
        os.makedirs(out_dir, exist_ok=True)
        self.params = list(params)
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.lr)
        self.lr_sched = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=lr_milestones(cfg.max_iters), gamma=cfg.lr_decay
        )
        self.data_gen = torch.Generator().manual_seed(cfg.seed + stage)
        self.start_iter = 1
        self.last_ckpt = None
        self.logger = _JsonlLogger(os.path.join(out_dir, f"stage{stage}_log.jsonl"))

    def resume(self, payload):
        self.pipe.codec.load_state_dict(payload["codec"])
        if payload.get("predictor") is not None:
            self.pipe.predictor.load_state_dict(payload["predictor"])
        if payload.get("colorizer") is not None:
            self.pipe.colorizer.load_state_dict(payload["colorizer"])
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("lr_sched") is not None:
            self.lr_sched.load_state_dict(payload["lr_sched"])
        if payload.get("rng_torch") is not None:
            torch.set_rng_state(payload["rng_torch"])
        if payload.get("rng_data") is not None:
            self.data_gen.set_state(payload["rng_data"])
        self.start_iter = int(payload["iteration"]) + 1

    def save(self, iteration, final=False):
        name = (f"stage{self.stage}_final.pt" if final
                else f"stage{self.stage}_iter{iteration:06d}.pt")
        path = os.path.join(self.out_dir, name)
        self.last_ckpt = save_checkpoint(
            path, self.pipe, self.stage, iteration,
            self.optimizer, self.lr_sched, self.data_gen,
        )
        return self.last_ckpt

    def run(self, step_fn):
        """Drive step_fn(data_gen) -> (loss tensor, parts) to max_iters."""
        cfg = self.cfg
        history = []
        try:
            for iteration in range(self.start_iter, cfg.max_iters + 1):
                t0 = time.perf_counter()
                self.optimizer.zero_grad(set_to_none=True)
                loss, parts = step_fn(self.data_gen)
                if not torch.isfinite(loss.detach()):
                    raise NumericError(
                        f"non-finite stage-{self.stage} loss at iteration {iteration}",
                        context={"iteration": iteration, **parts},
                        last_checkpoint=self.last_ckpt,
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip)
                lr_used = float(self.optimizer.param_groups[0]["lr"])
                self.optimizer.step()
                self.lr_sched.step()
                record = {
                    "iteration": iteration,
                    "stage": self.stage,
                    "loss": float(loss.detach()),
                    **parts,
                    "lr": lr_used,
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
                history.append(record)
                if (iteration % cfg.log_every == 0 or iteration == self.start_iter
                        or iteration == cfg.max_iters):
                    self.logger.write(record)
                if iteration % cfg.ckpt_every == 0 and iteration != cfg.max_iters:
                    self.save(iteration)
            final_path = self.save(cfg.max_iters, final=True)
        finally:
            self.logger.close()
        return final_path, history


def run_stage1(cfg: RunConfig, out_dir, resume=None):
    """Fit the codec by autoencoding RAW/gray/sRGB patches.

    Returns (final_checkpoint_path, history).  Raises NumericError with the
    last good checkpoint path if the loss leaves the finite range.
    """
    cfg = dataclasses.replace(cfg, stage=1).validate()
    pipe = build_pipeline(cfg)
    data = PairData(cfg.manifest, cfg, "train")
    loop = _Loop(cfg, out_dir, 1, pipe.codec.parameters(), pipe)
    if resume is not None:
        payload = read_checkpoint(resume)
        check_compatible(payload, cfg, resume)
        if payload["stage"] != 1:
            raise CheckpointError(f"{resume} is a stage-{payload['stage']} checkpoint")
        loop.resume(payload)

    def step(gen):
        batch = data.sample_batch(gen)
        loss = stage1_loss(pipe.codec, batch)
        return loss, {}

    return loop.run(step)


def run_stage2(cfg: RunConfig, out_dir, stage1_ckpt, resume=None):
    """Fit the noise predictor and colorizer over a frozen codec."""
    cfg = dataclasses.replace(cfg, stage=2).validate()
    pipe = build_pipeline(cfg)
    payload = read_checkpoint(stage1_ckpt)
    check_compatible(payload, cfg, stage1_ckpt)
    pipe.codec.load_state_dict(payload["codec"])
    pipe.codec.requires_grad_(False)
    pipe.codec.eval()
    data = PairData(cfg.manifest, cfg, "train")
    params = list(pipe.predictor.parameters()) + list(pipe.colorizer.parameters())
    loop = _Loop(cfg, out_dir, 2, params, pipe)
    if resume is not None:
        res = read_checkpoint(resume)
        check_compatible(res, cfg, resume)
        if res["stage"] != 2:
            raise CheckpointError(f"{resume} is a stage-{res['stage']} checkpoint")
        loop.resume(res)

    k = cfg.scale_k

    def step(gen):
        batch = data.sample_batch(gen)
        with torch.no_grad():
            f_r = pipe.codec.encode(batch["raw"], "raw")
            f_g = pipe.codec.encode(batch["gray"], "gray")
            f_s = pipe.codec.encode(batch["srgb"], "srgb")
        t, eps = draw_training_noise(f_g.values, pipe.sched, gen)
        l_diff, parts, _ = diffusion_losses(
            f_g.values, f_r.values, pipe.sched, pipe.predictor, cfg.lambda_tel, t, eps
        )
        # The colorizer learns on the clean grayscale latent; at inference it
        # receives the sampled stand-in, which training drives toward f_g.
        hist = pipe.colorizer.predict_histogram(f_r)
        f_c = pipe.colorizer.color_feature(hist, f_r)
        f_s_hat = pipe.colorizer.colorize(f_c, f_g)
        l_fea = fea_loss(f_s_hat, f_s)
        h_ref = reference_histogram(batch["srgb"], k)
        if cfg.lambda_ccl == 0.0:
            with torch.no_grad():
                l_ccl = ccl_loss(hist, h_ref)
            l_color = l_fea
        else:
            l_ccl = ccl_loss(hist, h_ref)
            l_color = l_fea + cfg.lambda_ccl * l_ccl
        total = l_diff + l_color
        parts = dict(parts, loss_fea=float(l_fea.detach()), loss_ccl=float(l_ccl.detach()))
        return total, parts

    return loop.run(step)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class InferencePipeline:
    """Frozen end-to-end renderer loaded from a stage-2 checkpoint."""

    def __init__(self, cfg: RunConfig, pipe: Pipeline):
        self.cfg = cfg
        self.pipe = pipe
        self.sampler = uniform_sampler_config(cfg.diffusion_steps, cfg.sample_steps, cfg.eta)

    @classmethod
    def from_checkpoint(cls, cfg: RunConfig, path) -> "InferencePipeline":
        payload = read_checkpoint(path)
        check_compatible(payload, cfg, path)
        if payload["stage"] < 2 or payload.get("predictor") is None:
            raise CheckpointError(
                f"{path} is a stage-{payload['stage']} checkpoint; inference needs stage 2"
            )
        pipe = build_pipeline(cfg)
        pipe.codec.load_state_dict(payload["codec"])
        pipe.predictor.load_state_dict(payload["predictor"])
        pipe.colorizer.load_state_dict(payload["colorizer"])
        for module in (pipe.codec, pipe.predictor, pipe.colorizer):
            module.eval()
            module.requires_grad_(False)
        return cls(cfg, pipe)

    def render(self, raw: BayerRaw, seed: int) -> np.ndarray:
        """RAW mosaic -> sRGB image (H, W, 3) float64 in [0, 1]."""
        if raw.bit_depth != self.cfg.bit_depth:
            raise ConfigurationError(
                f"RAW bit depth {raw.bit_depth} != configured {self.cfg.bit_depth}"
            )
        x = raw_to_tensor(raw, self.cfg)
        with torch.no_grad():
            f_r = self.pipe.codec.encode(x, "raw")
            gen = torch.Generator().manual_seed(int(seed))
            f_g_hat = sample(f_r, self.pipe.sched, self.sampler, self.pipe.predictor, gen)
            f_g_hat = LatentFeature(f_g_hat.values, "gray", f_r.scale)
            f_s_hat, _ = self.pipe.colorizer(f_r, f_g_hat)
            out = self.pipe.codec.decode(f_s_hat, "srgb")
        return np.clip(tensor_to_image(out), 0.0, 1.0)
