"""Losses, Adam and the joint training step for noise-warped video diffusion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .diffusion import (
    Denoiser,
    DenoiserConfig,
    MotionDecoder,
    MotionDecoderConfig,
    NoiseSchedule,
    add_noise,
    encode_latent,
    make_schedule,
    predict_z0,
    save_checkpoint,
)
from .noisefield import (
    GAMMA_MAX,
    FusionIndex,
    degrade,
    downsample_motion_maps,
    fusion_index,
    undegrade,
    unwarp_fuse,
    warp,
)
from .numeric import (
    GradTape,
    RngState,
    backward,
    finite_difference_grad,
    max_relative_error,
    sample_standard_normal,
    seed_rng,
)

__all__ = [
    "TrainConfig",
    "PRESETS",
    "apply_preset",
    "Adam",
    "loss_diff",
    "loss_md",
    "loss_mc",
    "total_loss",
    "ClipData",
    "prepare_clip",
    "StepInputs",
    "sample_step_inputs",
    "compute_losses",
    "train_step",
    "train",
    "gradient_check",
    "NonFiniteLossError",
]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_diff: float = 1.0
    lambda_mc: float = 0.5
    lambda_md: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 2
    steps: int = 2000
    gamma_low: float = 0.0
    gamma_high: float = 1.0
    gamma_max: float = GAMMA_MAX
    seed: int = 0
    masked_md: bool = False
    per_frame_fusion: bool = False
    static_background: bool = False

    def __post_init__(self):
        for name in ("lambda_diff", "lambda_mc", "lambda_md"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.gamma_low <= self.gamma_high <= 1.0:
            raise ValueError("gamma bounds must satisfy 0 <= low <= high <= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


PRESETS = {
    "base": {"lambda_mc": 0.0, "lambda_md": 0.0},
    "jaml": {"lambda_mc": 0.0},
    "full": {},
}


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    """Ablation presets: ``base`` (diffusion loss only), ``jaml`` (+ motion decoder), ``full``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return replace(config, **PRESETS[preset])


class Adam:
    """Adam with bias correction; moments kept per named parameter."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            self.v[k].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps))


# ---------------------------------------------------------------------------
# losses


def _mse(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return ((torch.as_tensor(a) - torch.as_tensor(b)) ** 2).mean()
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


def loss_diff(eps, eps_pred):
    """Mean squared error between added and predicted noise."""
    return _mse(eps, eps_pred)


def loss_md(target, pred, mask=None):
    """Mean squared error between motion maps (``u, v, mask`` channels).

    ``target`` may carry the full 4-channel layout; its part-id channel is
    dropped. With ``mask``, only body pixels of the target are averaged.
    """
    if target.shape[-1] == 4:
        target = target[..., [0, 1, 3]]
    if mask is None:
        return _mse(target, pred)
    if tuple(target.shape) != tuple(pred.shape):
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(pred.shape)}")
    diff2 = (pred - target) ** 2
    n = max(float(mask.sum()) * target.shape[-1], 1.0)
    return (diff2 * mask[..., None]).sum() / n


def loss_mc(texture, fused, coverage):
    """Masked MSE in UV space over texels with coverage >= 1 (0 when none)."""
    cov = np.asarray(coverage)
    if isinstance(fused, torch.Tensor):
        tex = torch.as_tensor(np.asarray(texture), dtype=fused.dtype)
        if fused.ndim == tex.ndim + 1:
            tex = tex[None]
        if tuple(fused.shape[-3:]) != tuple(tex.shape[-3:]):
            raise ValueError("texture dimensions differ")
        mask = torch.as_tensor(cov >= 1)
        n = int(mask.sum())
        if n == 0:
            return fused.sum() * 0.0
        diff2 = ((fused - tex) ** 2)[mask]
        return diff2.mean()
    tex = np.asarray(texture, np.float64)
    fused = np.asarray(fused, np.float64)
    if fused.ndim == tex.ndim + 1:
        tex = tex[None]
    if fused.shape[-3:] != tex.shape[-3:]:
        raise ValueError("texture dimensions differ")
    mask = cov >= 1
    if not mask.any():
        return 0.0
    return float(np.mean((np.broadcast_to(tex, fused.shape)[mask] - fused[mask]) ** 2))


def total_loss(l_diff, l_mc, l_md, config: TrainConfig):
    return config.lambda_diff * l_diff + config.lambda_mc * l_mc + config.lambda_md * l_md


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class ClipData:
    """One training clip, pre-encoded."""

    z0: np.ndarray              # latent frames x h x w x C
    cond: np.ndarray            # h x w x C, latent of the first video frame
    motion_latent: np.ndarray   # latent frames x h x w x 4
    motion_target: np.ndarray   # video frames x H x W x 3 (u, v, mask)
    fusion: FusionIndex         # latent-resolution pixel-to-texel routing


def prepare_clip(video, motion_maps, spatial: int = 8, temporal: int = 4, channels: int = 8,
                 texture_size: tuple[int, int] = (64, 64), per_frame_fusion: bool = False,
                 latent_scale: float = 1.0) -> ClipData:
    """Precompute the latent, conditioning frame, motion targets and fusion routing of a clip.

    ``latent_scale`` multiplies the codec output so the clean latent has a
    spread comparable to the unit-variance noise it is mixed with.
    """
    video = np.asarray(video, dtype=np.float32)
    stack = np.stack([np.asarray(m, np.float32) for m in motion_maps]) \
        if not isinstance(motion_maps, np.ndarray) else motion_maps.astype(np.float32)
    if stack.shape[:3] != video.shape[:3]:
        raise ValueError(f"motion maps {stack.shape[:3]} do not match video {video.shape[:3]}")
    z0 = encode_latent(video, spatial, temporal, channels) * np.float32(latent_scale)
    cond = encode_latent(video[:1], spatial, temporal, channels)[0] * np.float32(latent_scale)
    motion_latent = downsample_motion_maps(stack, spatial, temporal)
    index = fusion_index(motion_latent, *texture_size, per_frame=per_frame_fusion)
    return ClipData(z0, cond, motion_latent, np.ascontiguousarray(stack[..., [0, 1, 3]]), index)


@dataclass(eq=False)
class StepInputs:
    """All random draws of one step, fixed before any differentiation."""

    z0: np.ndarray          # B x frames x h x w x C
    cond: np.ndarray        # B x h x w x C
    eps: np.ndarray         # degraded warped noise actually added
    zeta: np.ndarray
    textures: np.ndarray    # B x U x V x C
    gammas: np.ndarray
    timesteps: np.ndarray
    motion_target: np.ndarray
    fusions: list = field(default_factory=list)


def sample_step_inputs(clips: Sequence[ClipData], config: TrainConfig, schedule: NoiseSchedule,
                       rng: RngState, texture_size: tuple[int, int] = (64, 64),
                       gamma: float | None = None, t: int | None = None) -> StepInputs:
    """Texture, warp, gamma, zeta and timestep draws for each clip.

    Noise is warped with latent-resolution motion maps; with nearest-neighbor
    downsampling this equals warping at image resolution and subsampling.
    """
    eps_list, zeta_list, tex_list, gammas, ts = [], [], [], [], []
    for k, clip in enumerate(clips):
        r = rng.stream(k)
        c = clip.z0.shape[-1]
        tex = sample_standard_normal(r.stream("texture"), (*texture_size, c))
        warped = warp(tex, clip.motion_latent, r.stream("background"),
                      static_background=config.static_background)
        g = float(r.stream("gamma").uniform(config.gamma_low, config.gamma_high)) if gamma is None else gamma
        zeta = sample_standard_normal(r.stream("zeta"), warped.shape)
        tk = int(r.stream("timestep").integers(1, schedule.T + 1)) if t is None else t
        eps_list.append(degrade(warped, zeta, g))
        zeta_list.append(zeta)
        tex_list.append(tex)
        gammas.append(g)
        ts.append(tk)
    return StepInputs(
        z0=np.stack([c.z0 for c in clips]),
        cond=np.stack([c.cond for c in clips]),
        eps=np.stack(eps_list),
        zeta=np.stack(zeta_list),
        textures=np.stack(tex_list),
        gammas=np.array(gammas),
        timesteps=np.array(ts, dtype=np.int64),
        motion_target=np.stack([c.motion_target for c in clips]),
        fusions=[c.fusion for c in clips],
    )


def compute_losses(inputs: StepInputs, denoiser: Denoiser, decoder: MotionDecoder | None,
                   config: TrainConfig, schedule: NoiseSchedule, dtype=torch.float32,
                   force_all: bool = False) -> dict:
    """Forward pass of the joint objective.

    ``l_md`` is only evaluated when its weight is positive (or ``force_all``);
    ``l_mc`` skips clips whose degradation level reaches ``gamma_max``.
    """
    z0 = torch.as_tensor(inputs.z0, dtype=dtype)
    eps = torch.as_tensor(inputs.eps, dtype=dtype)
    cond = torch.as_tensor(inputs.cond, dtype=dtype)[:, None]
    t = torch.as_tensor(inputs.timesteps)
    zt = add_noise(z0, eps, inputs.timesteps, schedule)
    eps_pred = denoiser(zt, cond, t)
    l_diff = loss_diff(eps, eps_pred)

    zero = eps_pred.sum() * 0.0
    l_md = zero
    md_active = decoder is not None and (config.lambda_md > 0 or force_all)
    if md_active:
        z0_pred = predict_z0(zt, eps_pred, inputs.timesteps, schedule)
        m_pred = decoder(z0_pred)
        target = torch.as_tensor(inputs.motion_target, dtype=dtype)
        mask = target[..., 2] if config.masked_md else None
        l_md = loss_md(target, m_pred, mask)

    mc_terms, skipped = [], 0
    for k, g in enumerate(inputs.gammas):
        if g >= config.gamma_max:
            skipped += 1
            continue
        zeta = torch.as_tensor(inputs.zeta[k], dtype=dtype)
        restored = undegrade(eps_pred[k], zeta, float(g), gamma_max=config.gamma_max)
        fused, cov = unwarp_fuse(restored, index=inputs.fusions[k])
        mc_terms.append(loss_mc(inputs.textures[k], fused, cov))
    l_mc = torch.stack(mc_terms).mean() if mc_terms else zero

    total = total_loss(l_diff, l_mc, l_md, config)
    return {
        "l_diff": l_diff,
        "l_mc": l_mc,
        "l_md": l_md,
        "total": total,
        "md_active": md_active,
        "mc_skipped": skipped,
    }


def _tape(denoiser, decoder) -> GradTape:
    modules = {"denoiser": denoiser}
    if decoder is not None:
        modules["motion_decoder"] = decoder
    return GradTape.from_modules(**modules)


def train_step(clips: Sequence[ClipData], denoiser: Denoiser, decoder: MotionDecoder | None,
               optimizer: Adam, config: TrainConfig, schedule: NoiseSchedule, rng: RngState,
               texture_size: tuple[int, int] = (64, 64)) -> dict:
    """One optimization step; returns the float loss breakdown."""
    inputs = sample_step_inputs(clips, config, schedule, rng, texture_size)
    losses = compute_losses(inputs, denoiser, decoder, config, schedule)
    total = losses["total"]
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss: diff={losses['l_diff'].item()} mc={losses['l_mc'].item()} "
            f"md={losses['l_md'].item()} gammas={inputs.gammas.tolist()} t={inputs.timesteps.tolist()}")
    grads = backward(_tape(denoiser, decoder), total)
    optimizer.step(grads)
    return {
        "l_diff": losses["l_diff"].item(),
        "l_mc": losses["l_mc"].item(),
        "l_md": losses["l_md"].item() if losses["md_active"] else float("nan"),
        "total": total.item(),
        "gamma": float(np.mean(inputs.gammas)),
        "t": float(np.mean(inputs.timesteps)),
        "mc_skipped": losses["mc_skipped"],
    }


LOG_COLUMNS = ("step", "l_diff", "l_mc", "l_md", "total", "gamma", "t")


def train(clips: Sequence[ClipData], denoiser: Denoiser, decoder: MotionDecoder | None,
          config: TrainConfig, schedule: NoiseSchedule,
          texture_size: tuple[int, int] = (64, 64), log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, checkpoint_every: int = 0,
          start_step: int = 0, manifest_extra: dict | None = None) -> list[dict]:
    """Run ``config.steps`` optimization steps over randomly drawn clip batches."""
    params = dict(_tape(denoiser, decoder).params)
    optimizer = Adam(params, lr=config.learning_rate)
    rng = seed_rng(config.seed).stream("train")
    history = []
    log_fh = writer = None
    if log_path is not None:
        new = not Path(log_path).exists()
        log_fh = open(log_path, "a", newline="")
        writer = csv.writer(log_fh)
        if new:
            writer.writerow(LOG_COLUMNS)
    try:
        for step in range(start_step, start_step + config.steps):
            step_rng = rng.stream(step)
            idx = step_rng.stream("batch").integers(0, len(clips), config.batch_size)
            batch = [clips[i] for i in idx]
            record = train_step(batch, denoiser, decoder, optimizer, config, schedule,
                                step_rng.stream("inputs"), texture_size)
            record["step"] = step + 1
            history.append(record)
            if writer is not None:
                writer.writerow([record[c] for c in LOG_COLUMNS])
            if checkpoint_path is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, denoiser, decoder, schedule, step + 1, manifest_extra)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, denoiser, decoder, schedule,
                        start_step + config.steps, manifest_extra)
    return history


# ---------------------------------------------------------------------------
# gradient check


def miniature_instance(seed: int = 0, channels: int = 3, texture: int = 16):
    """Tiny clip, denoiser and decoder (< 1000 parameters) in float64.

    Latent is 2 x 4 x 4 x ``channels`` (a 5 x 32 x 32 video).
    """
    from .body import default_skeleton, generate_pose_sequence
    from .raster import make_appearance_texture, rasterize_sequence, render_sequence

    torch.manual_seed(seed)
    skel = default_skeleton(texture).scaled(0.3)
    rng = seed_rng(seed)
    poses = generate_pose_sequence(skel, rng.stream("pose"), 1, 0.4, root_position=(16.0, 16.0))
    maps = rasterize_sequence(skel, poses, 32, 32)
    video = render_sequence(maps, make_appearance_texture(skel, texture))
    clip = prepare_clip(video, maps, 8, 4, channels, (texture, texture))
    denoiser = Denoiser(DenoiserConfig(channels, (2, 4), temb_dim=4, temb_hidden=4)).double()
    decoder = MotionDecoder(MotionDecoderConfig(channels, (2, 2), 8, 4, groups=2)).double()
    # random output layer so every parameter carries gradient
    with torch.no_grad():
        denoiser.conv_out.weight.normal_(0.0, 0.3)
        denoiser.conv_out.bias.normal_(0.0, 0.1)
    return clip, denoiser, decoder


def gradient_check(config: TrainConfig | None = None, gamma: float = 0.3, t: int = 20,
                   step: float = 1e-5, seed: int = 0, schedule: NoiseSchedule | None = None) -> dict:
    """Analytic vs central-difference gradients of the joint objective.

    Runs in float64 on :func:`miniature_instance`. Returns the worst relative
    error, the parameter tensor where it occurs, and the parameter count.
    """
    config = config or TrainConfig()
    schedule = schedule or make_schedule(50, 1e-3, 0.05)
    clip, denoiser, decoder = miniature_instance(seed)
    inputs = sample_step_inputs([clip], config, schedule, seed_rng(seed).stream("gradcheck"),
                                texture_size=clip.fusion.size_uv, gamma=gamma, t=t)
    tape = _tape(denoiser, decoder)

    def objective():
        return compute_losses(inputs, denoiser, decoder, config, schedule,
                              dtype=torch.float64, force_all=False)["total"]

    analytic = backward(tape, objective())
    numeric = finite_difference_grad(objective, tape.params, step=step)
    err, where = max_relative_error(analytic, numeric)
    return {
        "max_relative_error": err,
        "worst_parameter": where,
        "parameters": sum(p.numel() for p in tape.params.values()),
        "analytic": analytic,
        "numeric": numeric,
    }
