"""Desk-scale latent video diffusion.

Arrays follow a ``frames x height x width x channels`` layout, with a
leading batch axis on the torch side. The codec is a fixed linear
stand-in for a video VAE: block averaging in space, group averaging in
time (first frame on its own), RGB lifted into the first three latent
channels.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .numeric import read_tensor, write_tensor

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "encode_latent",
    "decode_latent",
    "add_noise",
    "predict_z0",
    "DenoiserConfig",
    "Denoiser",
    "MotionDecoderConfig",
    "MotionDecoder",
    "denoiser_forward",
    "motion_decode",
    "uniform_steps",
    "ddim_sample",
    "save_checkpoint",
    "load_checkpoint",
]


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, index t-1 for t = 1..T

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """Cumulative product at step ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return ab[t]


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas."""
    if T < 2:
        raise ValueError("need at least 2 steps")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_t(t, schedule: NoiseSchedule):
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep {t_arr} outside 1..{schedule.T}")
    return t_arr


def _coeffs(t, schedule: NoiseSchedule, like):
    """sqrt(abar_t) and sqrt(1 - abar_t), broadcastable against ``like``."""
    ab = schedule.alpha_bar(t)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if isinstance(like, torch.Tensor):
        a = torch.as_tensor(a, dtype=like.dtype)
        b = torch.as_tensor(b, dtype=like.dtype)
        if a.ndim == 1:
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, b = a.reshape(shape), b.reshape(shape)
    elif np.ndim(a) == 1:
        shape = (-1,) + (1,) * (like.ndim - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    return a, b


def add_noise(z0, eps, t, schedule: NoiseSchedule):
    """Closed-form forward process ``sqrt(abar) z0 + sqrt(1 - abar) eps``.

    ``t`` may be a scalar or one step per batch element.
    """
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    t = _check_t(t, schedule)
    a, b = _coeffs(t, schedule, z0)
    out = a * z0 + b * eps
    return out.astype(z0.dtype) if isinstance(out, np.ndarray) else out


def predict_z0(zt, eps_pred, t, schedule: NoiseSchedule):
    """Invert :func:`add_noise` using a noise estimate."""
    t = _check_t(t, schedule)
    a, b = _coeffs(t, schedule, zt)
    out = (zt - b * eps_pred) / a
    return out.astype(zt.dtype) if isinstance(out, np.ndarray) else out


# ---------------------------------------------------------------------------
# stand-in codec


def encode_latent(video, spatial: int = 8, temporal: int = 4, channels: int = 8) -> np.ndarray:
    """``(r f + 1, s h, s w, 3) -> (f + 1, h, w, C)`` by averaging."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise ValueError(f"video must be frames x H x W x 3, got {video.shape}")
    frames, H, W, rgb = video.shape
    if H % spatial or W % spatial:
        raise ValueError(f"frame size {H}x{W} not divisible by {spatial}")
    if (frames - 1) % temporal:
        raise ValueError(f"{frames} frames is not 1 mod {temporal}")
    if channels < rgb:
        raise ValueError("latent needs at least as many channels as the video")
    h, w = H // spatial, W // spatial
    blocks = video.reshape(frames, h, spatial, w, spatial, rgb).mean(axis=(2, 4))
    groups = blocks[1:].reshape((frames - 1) // temporal, temporal, h, w, rgb).mean(axis=1)
    latent = np.zeros((1 + len(groups), h, w, channels), dtype=np.float64)
    latent[0, ..., :rgb] = blocks[0]
    latent[1:, ..., :rgb] = groups
    return latent.astype(np.float32)


def decode_latent(latent, spatial: int = 8, temporal: int = 4, rgb: int = 3) -> np.ndarray:
    """Nearest upsampling and frame replication mirroring the encoder layout."""
    latent = np.asarray(latent, dtype=np.float32)
    frame_idx = latent_frame_of(latent.shape[0], temporal)
    rgb_part = np.clip(latent[..., :rgb], 0.0, 1.0)[frame_idx]
    return rgb_part.repeat(spatial, axis=1).repeat(spatial, axis=2)


def latent_frame_of(latent_frames: int, temporal: int = 4) -> np.ndarray:
    """For every video frame, the latent frame that encodes it."""
    video_frames = temporal * (latent_frames - 1) + 1
    idx = np.zeros(video_frames, dtype=np.int64)
    idx[1:] = (np.arange(1, video_frames) - 1) // temporal + 1
    return idx


# ---------------------------------------------------------------------------
# networks


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _spatial(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1))


def _temporal(ch):
    return nn.Conv3d(ch, ch, (3, 1, 1), padding=(1, 0, 0))


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 8
    widths: tuple[int, int] = (32, 64)
    temb_dim: int = 32
    temb_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


class Denoiser(nn.Module):
    """Factorized spatio-temporal noise predictor.

    Two resolution levels of 3x3 spatial convolutions, each followed by a
    length-3 temporal convolution. The reference-frame latent is concatenated
    onto every frame; the timestep enters as a per-channel bias. The output
    convolution starts at zero.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        w1, w2 = config.widths
        self.temb = nn.Sequential(
            nn.Linear(config.temb_dim, config.temb_hidden),
            nn.ReLU(),
            nn.Linear(config.temb_hidden, w1 + w2),
        )
        self.conv_in = _spatial(2 * c, w1)
        self.time1 = _temporal(w1)
        self.down = _spatial(w1, w2, stride=2)
        self.time2 = _temporal(w2)
        self.mid = _spatial(w2, w2)
        self.up = _spatial(w1 + w2, w1)
        self.time3 = _temporal(w1)
        self.conv_out = _spatial(w1, c)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, zt: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if zt.ndim != 5:
            raise ValueError(f"z_t must be batch x frames x h x w x C, got {tuple(zt.shape)}")
        if cond.ndim == 4:
            cond = cond[:, None]
        b, frames, h, w, c = zt.shape
        if cond.shape[0] != b or cond.shape[2:] != zt.shape[2:] or cond.shape[1] != 1:
            raise ValueError(f"reference latent {tuple(cond.shape)} does not fit z_t {tuple(zt.shape)}")
        if c != self.config.channels:
            raise ValueError(f"expected {self.config.channels} channels, got {c}")
        t = torch.as_tensor(t).reshape(-1).expand(b)
        w1, w2 = self.config.widths
        bias = self.temb(timestep_embedding(t, self.config.temb_dim).to(zt.dtype))
        bias1 = bias[:, :w1, None, None, None]
        bias2 = bias[:, w1:, None, None, None]

        x = torch.cat([zt, cond.expand(-1, frames, -1, -1, -1)], dim=-1).permute(0, 4, 1, 2, 3)
        h1 = F.relu(self.conv_in(x) + bias1)
        h1 = F.relu(h1 + self.time1(h1))
        d = F.relu(self.down(h1) + bias2)
        d = F.relu(d + self.time2(d))
        d = F.relu(self.mid(d))
        u = F.interpolate(d, size=h1.shape[2:], mode="nearest")
        u = F.relu(self.up(torch.cat([h1, u], dim=1)))
        u = F.relu(u + self.time3(u))
        return self.conv_out(u).permute(0, 2, 3, 4, 1)


@dataclass(frozen=True)
class MotionDecoderConfig:
    channels: int = 8
    widths: tuple[int, int] = (16, 8)
    spatial: int = 8
    temporal: int = 4
    groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


class MotionDecoder(nn.Module):
    """Latent -> per-frame ``(u, v, mask)`` maps at image resolution.

    Two upsample + 3x3 convolution + group norm + ReLU blocks reach the
    spatial factor; a 1x1 head emits one map per video frame covered by
    each latent frame. Outputs pass through a sigmoid.
    """

    def __init__(self, config: MotionDecoderConfig = MotionDecoderConfig()):
        super().__init__()
        self.config = config
        s = config.spatial
        self.factors = (s // 2, 2) if s % 2 == 0 and s >= 2 else (s, 1)
        w1, w2 = config.widths
        self.stem = nn.Conv2d(config.channels, w1, 3, padding=1)
        self.conv1 = nn.Conv2d(w1, w1, 3, padding=1)
        self.norm1 = nn.GroupNorm(math.gcd(config.groups, w1), w1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(config.groups, w2), w2)
        self.head = nn.Conv2d(w2, 3 * config.temporal, 1)

    def forward(self, z0: torch.Tensor) -> torch.Tensor:
        b, frames, h, w, c = z0.shape
        r = self.config.temporal
        x = z0.reshape(b * frames, h, w, c).permute(0, 3, 1, 2)
        x = self.stem(x)
        for factor, conv, norm in ((self.factors[0], self.conv1, self.norm1),
                                   (self.factors[1], self.conv2, self.norm2)):
            if factor > 1:
                x = F.interpolate(x, scale_factor=factor, mode="nearest")
            x = F.relu(norm(conv(x)))
        x = torch.sigmoid(self.head(x))
        H, W = x.shape[-2:]
        x = x.reshape(b, frames, r, 3, H, W).permute(0, 1, 2, 4, 5, 3)
        first = x[:, :1, 0]
        rest = x[:, 1:].reshape(b, (frames - 1) * r, H, W, 3)
        return torch.cat([first, rest], dim=1)


def denoiser_forward(model: Denoiser, zt, cond, t) -> torch.Tensor:
    """Unbatched convenience wrapper: ``zt`` is ``frames x h x w x C``."""
    zt = torch.as_tensor(np.asarray(zt) if not isinstance(zt, torch.Tensor) else zt)
    cond = torch.as_tensor(np.asarray(cond) if not isinstance(cond, torch.Tensor) else cond)
    if cond.ndim == 4:
        cond = cond[0]
    if cond.shape != zt.shape[1:]:
        raise ValueError(f"reference latent {tuple(cond.shape)} does not fit z_t {tuple(zt.shape)}")
    return model(zt[None], cond[None, None], torch.as_tensor([int(t)]))[0]


def motion_decode(model: MotionDecoder, z0) -> torch.Tensor:
    z0 = torch.as_tensor(np.asarray(z0) if not isinstance(z0, torch.Tensor) else z0)
    return model(z0[None])[0]


# ---------------------------------------------------------------------------
# sampling


def uniform_steps(T: int, n: int) -> list[int]:
    """``n`` roughly evenly spaced, strictly decreasing steps from ``T`` to 1."""
    steps = np.unique(np.rint(np.linspace(1, T, max(n, 2))).astype(int))[::-1]
    return [int(s) for s in steps]


@torch.no_grad()
def ddim_sample(model, init_noise, cond, schedule: NoiseSchedule, steps) -> np.ndarray:
    """Deterministic DDIM from ``init_noise`` (frames x h x w x C).

    ``model`` is a :class:`Denoiser` or any callable ``(zt, cond, t) -> eps``
    on batched tensors. Returns the final clean-latent estimate.
    """
    steps = [int(s) for s in steps]
    if not steps or steps[-1] != 1:
        raise ValueError("steps must end at 1")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError("steps must be strictly decreasing")
    if steps[0] > schedule.T:
        raise ValueError(f"step {steps[0]} exceeds schedule length {schedule.T}")
    z = torch.as_tensor(np.asarray(init_noise, dtype=np.float32))[None]
    c = torch.as_tensor(np.asarray(cond, dtype=np.float32))
    c = c.reshape((1, 1) + tuple(c.shape[-3:]))
    z0 = z
    for k, t in enumerate(steps):
        eps = model(z, c, torch.tensor([t]))
        z0 = predict_z0(z, eps, t, schedule)
        if k + 1 < len(steps):
            t_prev = steps[k + 1]
            ab = float(schedule.alpha_bar(t_prev))
            z = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    return z0[0].numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints
#
#   magic  b"ANWC"
#   u32    container version (1)
#   u32    manifest byte length, then UTF-8 JSON manifest
#   u32    tensor count
#   per tensor: u32 name length, UTF-8 name, one ANWT tensor record

CKPT_MAGIC = b"ANWC"


def save_checkpoint(path: str | Path, denoiser: Denoiser, decoder: MotionDecoder | None,
                    schedule: NoiseSchedule, step: int = 0, extra: dict | None = None) -> None:
    manifest = {
        "architecture": {
            "denoiser": asdict(denoiser.config),
            "motion_decoder": asdict(decoder.config) if decoder is not None else None,
        },
        "schedule": {"T": schedule.T, "beta_start": float(schedule.betas[0]),
                     "beta_end": float(schedule.betas[-1])},
        "step": int(step),
        **(extra or {}),
    }
    tensors = {f"denoiser.{k}": v for k, v in denoiser.state_dict().items()}
    if decoder is not None:
        tensors.update({f"motion_decoder.{k}": v for k, v in decoder.state_dict().items()})
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, value.detach().cpu().numpy())


def load_checkpoint(path: str | Path):
    """Returns ``(denoiser, decoder_or_None, schedule, manifest)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            tensors[name] = torch.from_numpy(read_tensor(fh).copy())
    arch = manifest["architecture"]
    denoiser = Denoiser(DenoiserConfig(**arch["denoiser"]))
    denoiser.load_state_dict({k[len("denoiser."):]: v for k, v in tensors.items()
                              if k.startswith("denoiser.")})
    decoder = None
    if arch.get("motion_decoder"):
        decoder = MotionDecoder(MotionDecoderConfig(**arch["motion_decoder"]))
        decoder.load_state_dict({k[len("motion_decoder."):]: v for k, v in tensors.items()
                                 if k.startswith("motion_decoder.")})
    sch = manifest["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_start"], sch["beta_end"])
    return denoiser, decoder, schedule, manifest
