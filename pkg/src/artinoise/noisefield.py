"""Articulated noise transport between UV space and image space.

A Gaussian noise texture lives on the body's UV atlas and is shared by every
frame of a clip. ``warp`` copies it to the pixels that see each texel,
``unwarp_fuse`` averages pixels back onto texels, and ``degrade`` /
``undegrade`` blend the transported noise with fresh noise and back.

``degrade``, ``undegrade`` and ``unwarp_fuse`` accept numpy arrays or torch
tensors; the torch path is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numeric import RngState, sample_standard_normal

__all__ = [
    "GAMMA_MAX",
    "NoiseTexture",
    "DegradationRecord",
    "texel_index",
    "sample_noise_texture",
    "warp",
    "degrade",
    "undegrade",
    "degradation_norm",
    "downsample_spatiotemporal",
    "downsample_motion_maps",
    "FusionIndex",
    "fusion_index",
    "unwarp_fuse",
    "SingularDegradationError",
]

GAMMA_MAX = 0.95

_U, _V, _MASK = 0, 1, 3


class SingularDegradationError(ValueError):
    """Raised when reversing a degradation whose level is too close to 1."""


@dataclass(frozen=True)
class NoiseTexture:
    values: np.ndarray  # U x V x C

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class DegradationRecord:
    gamma: float
    zeta: np.ndarray


def texel_index(u, v, size_u: int, size_v: int):
    """Nearest texel: ``i = min(floor(u U), U - 1)``, same for ``j``."""
    i = np.minimum(np.floor(np.asarray(u, dtype=np.float64) * size_u), size_u - 1).astype(np.int64)
    j = np.minimum(np.floor(np.asarray(v, dtype=np.float64) * size_v), size_v - 1).astype(np.int64)
    return np.maximum(i, 0), np.maximum(j, 0)


def sample_noise_texture(rng: RngState, size_u: int, size_v: int, channels: int) -> NoiseTexture:
    return NoiseTexture(sample_standard_normal(rng, (size_u, size_v, channels)))


def _motion_stack(motion_maps) -> np.ndarray:
    if isinstance(motion_maps, np.ndarray):
        stack = motion_maps
    else:
        stack = np.stack([np.asarray(m, dtype=np.float32) for m in motion_maps])
    if stack.ndim == 3:
        stack = stack[None]
    if stack.ndim != 4 or stack.shape[-1] != 4:
        raise ValueError(f"motion maps must be frames x H x W x 4, got {stack.shape}")
    return stack


def warp(texture, motion_maps, rng_bg: RngState, static_background: bool = False) -> np.ndarray:
    """Image-space noise ``frames x H x W x C`` transported from ``texture``.

    Covered pixels copy their texel; background pixels get fresh standard
    normal draws from ``rng_bg``, independently per frame unless
    ``static_background`` repeats the first frame's draw.
    """
    tex = np.asarray(texture, dtype=np.float32)
    stack = _motion_stack(motion_maps)
    frames, h, w, _ = stack.shape
    c = tex.shape[2]
    if static_background:
        bg = np.broadcast_to(sample_standard_normal(rng_bg, (1, h, w, c)), (frames, h, w, c))
        out = np.array(bg)
    else:
        out = sample_standard_normal(rng_bg, (frames, h, w, c))
    mask = stack[..., _MASK] > 0.5
    i, j = texel_index(stack[..., _U][mask], stack[..., _V][mask], tex.shape[0], tex.shape[1])
    out[mask] = tex[i, j]
    return out


def degradation_norm(gamma: float) -> float:
    return math.sqrt((1.0 - gamma) ** 2 + gamma ** 2)


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"degradation level must lie in [0, 1], got {gamma}")
    return gamma


def _check_pair(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def degrade(eps, zeta, gamma: float):
    """``((1 - g) eps + g zeta) / sqrt((1 - g)^2 + g^2)``."""
    gamma = _check_gamma(gamma)
    _check_pair(eps, zeta)
    if gamma == 0.0:
        return eps * 1.0
    if gamma == 1.0:
        return zeta * 1.0
    if isinstance(eps, np.ndarray):
        out = ((1.0 - gamma) * eps.astype(np.float64) + gamma * np.asarray(zeta, np.float64))
        return (out / degradation_norm(gamma)).astype(eps.dtype)
    return ((1.0 - gamma) * eps + gamma * zeta) / degradation_norm(gamma)


def undegrade(eps_tilde, zeta, gamma: float, gamma_max: float = GAMMA_MAX):
    """Exact inverse of :func:`degrade` given the same ``zeta``."""
    gamma = _check_gamma(gamma)
    if gamma >= gamma_max:
        raise SingularDegradationError(
            f"gamma={gamma} >= {gamma_max}: reversal scales by 1/(1-gamma) and is ill-conditioned")
    _check_pair(eps_tilde, zeta)
    if gamma == 0.0:
        return eps_tilde * 1.0
    norm = degradation_norm(gamma)
    if isinstance(eps_tilde, np.ndarray):
        out = norm * eps_tilde.astype(np.float64) - gamma * np.asarray(zeta, np.float64)
        return (out / (1.0 - gamma)).astype(eps_tilde.dtype)
    return (norm * eps_tilde - gamma * zeta) / (1.0 - gamma)


def downsample_spatiotemporal(noise, spatial: int = 8, temporal: int = 4):
    """Nearest-neighbor subsampling ``(r f + 1, s h, s w, C) -> (f + 1, h, w, C)``.

    Output frame ``k`` is input frame ``k r``; output pixel ``(y, x)`` is
    input pixel ``(y s, x s)``. Works on any array with a leading
    ``frames, H, W`` layout (motion maps included).
    """
    frames, h, w = noise.shape[:3]
    if spatial < 1 or temporal < 1:
        raise ValueError("factors must be positive")
    if h % spatial or w % spatial:
        raise ValueError(f"spatial size {h}x{w} not divisible by {spatial}")
    if (frames - 1) % temporal:
        raise ValueError(f"{frames} frames is not 1 mod {temporal}")
    return noise[::temporal, ::spatial, ::spatial]


def downsample_motion_maps(motion_maps, spatial: int = 8, temporal: int = 4) -> np.ndarray:
    return np.ascontiguousarray(downsample_spatiotemporal(_motion_stack(motion_maps), spatial, temporal))


@dataclass(frozen=True)
class FusionIndex:
    """Pixel-to-texel routing for one set of motion maps.

    ``pixels`` are flat indices into ``frames * H * W`` of covered pixels in
    frame-major, row-major order; ``texels`` their flat ``U * V`` targets.
    """

    pixels: np.ndarray
    texels: np.ndarray
    coverage: np.ndarray  # U x V contributing-pixel counts
    frame_shape: tuple[int, int, int]
    per_frame: bool = False

    @property
    def size_uv(self) -> tuple[int, int]:
        return self.coverage.shape[-2:]


def fusion_index(motion_maps, size_u: int, size_v: int, per_frame: bool = False) -> FusionIndex:
    """Routing table for :func:`unwarp_fuse`.

    With ``per_frame`` every frame gets its own texture, so texel targets are
    offset by ``frame * U * V`` and coverage is ``frames x U x V``.
    """
    stack = _motion_stack(motion_maps)
    frames, h, w, _ = stack.shape
    mask = (stack[..., _MASK] > 0.5).reshape(-1)
    pixels = np.flatnonzero(mask)
    flat = stack.reshape(-1, 4)[pixels]
    i, j = texel_index(flat[:, _U], flat[:, _V], size_u, size_v)
    texels = i * size_v + j
    if per_frame:
        texels = texels + (pixels // (h * w)) * (size_u * size_v)
        n_bins = frames * size_u * size_v
        cov_shape = (frames, size_u, size_v)
    else:
        n_bins = size_u * size_v
        cov_shape = (size_u, size_v)
    coverage = np.bincount(texels, minlength=n_bins).reshape(cov_shape)
    return FusionIndex(pixels, texels, coverage, (frames, h, w), per_frame)


def unwarp_fuse(noise, motion_maps=None, size_u: int | None = None, size_v: int | None = None,
                index: FusionIndex | None = None, per_frame: bool = False):
    """Average image-space values back onto the UV texture.

    Every texel receives the mean of all covered pixels (across all frames,
    or per frame with ``per_frame``) whose nearest texel it is. Uncovered
    texels hold 0. Returns ``(fused, coverage)``; ``fused`` is ``U x V x C``
    (``frames x U x V x C`` per frame) and matches the input's array type.
    Accumulation is float64 in a fixed pixel order.
    """
    if index is None:
        if motion_maps is None or size_u is None or size_v is None:
            raise ValueError("pass either an index or motion maps with texture size")
        index = fusion_index(motion_maps, size_u, size_v, per_frame=per_frame)
    if tuple(noise.shape[:3]) != index.frame_shape:
        raise ValueError(
            f"noise {tuple(noise.shape[:3])} does not match motion maps {index.frame_shape}")
    c = noise.shape[3]
    cov = index.coverage
    n_bins = cov.size
    if isinstance(noise, torch.Tensor):
        pix = torch.as_tensor(index.pixels)
        tex = torch.as_tensor(index.texels)
        vals = noise.reshape(-1, c)[pix].to(torch.float64)
        acc = torch.zeros(n_bins, c, dtype=torch.float64).index_add(0, tex, vals)
        denom = torch.as_tensor(np.maximum(cov.reshape(-1), 1), dtype=torch.float64)[:, None]
        fused = (acc / denom).to(noise.dtype)
    else:
        arr = np.asarray(noise)
        vals = arr.reshape(-1, c)[index.pixels].astype(np.float64)
        acc = np.stack(
            [np.bincount(index.texels, weights=vals[:, k], minlength=n_bins) for k in range(c)],
            axis=1) if c else np.zeros((n_bins, 0))
        fused = (acc / np.maximum(cov.reshape(-1), 1)[:, None]).astype(arr.dtype)
    return fused.reshape(cov.shape + (c,)), cov
