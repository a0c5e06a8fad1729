"""Input validation shared by the estimator wrappers and the command line."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_video",
    "check_videos",
    "check_motion_maps",
    "check_texture",
    "check_gamma",
    "check_layout",
]


def _as_float(x, name: str) -> np.ndarray:
    try:
        arr = np.asarray(x, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise TypeError(f"{name} must be numeric array-like") from exc
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_layout(frames: int, height: int, width: int, spatial: int = 8, temporal: int = 4) -> None:
    """Raise unless ``frames x height x width`` fits the latent layout."""
    if frames < temporal + 1 or (frames - 1) % temporal:
        raise ValueError(f"{frames} frames; expected {temporal} f + 1 with f >= 1")
    if height % spatial or width % spatial:
        raise ValueError(f"frame size {height}x{width} is not divisible by {spatial}")


def check_video(video, spatial: int = 8, temporal: int = 4, name: str = "video") -> np.ndarray:
    """A ``frames x H x W x 3`` float32 video with values in [0, 1]."""
    arr = _as_float(video, name)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be frames x H x W x 3, got shape {arr.shape}")
    check_layout(*arr.shape[:3], spatial=spatial, temporal=temporal)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_videos(videos, spatial: int = 8, temporal: int = 4, name: str = "X") -> np.ndarray:
    """A batch ``n x frames x H x W x 3`` (a single video is promoted to a batch of one)."""
    arr = _as_float(videos, name)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or len(arr) == 0:
        raise ValueError(f"{name} must be n x frames x H x W x 3, got shape {arr.shape}")
    for k in range(len(arr)):
        check_video(arr[k], spatial, temporal, name=f"{name}[{k}]")
    return arr


def check_motion_maps(maps, like: np.ndarray | None = None, name: str = "motion maps") -> np.ndarray:
    """``[n x] frames x H x W x 4`` float32 maps with uv in [0, 1] and a binary mask.

    With ``like`` (a video or a batch of videos) the leading shape must match.
    """
    arr = _as_float(maps, name)
    if arr.ndim not in (4, 5) or arr.shape[-1] != 4:
        raise ValueError(f"{name} must be [n x] frames x H x W x 4, got shape {arr.shape}")
    uv = arr[..., :2]
    if uv.size and (uv.min() < 0.0 or uv.max() > 1.0):
        raise ValueError(f"{name}: u and v must lie in [0, 1]")
    if not np.all((arr[..., 3] == 0) | (arr[..., 3] == 1)):
        raise ValueError(f"{name}: mask channel must be 0 or 1")
    if like is not None:
        like = np.asarray(like)
        if arr.shape[:-1] != like.shape[:-1]:
            raise ValueError(f"{name} shape {arr.shape[:-1]} does not match {like.shape[:-1]}")
    return arr


def check_texture(texture, channels: int | None = None, name: str = "texture") -> np.ndarray:
    arr = _as_float(np.asarray(texture), name)
    if arr.ndim != 3 or min(arr.shape[:2]) < 1:
        raise ValueError(f"{name} must be U x V x C, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"{name} has {arr.shape[2]} channels, expected {channels}")
    return arr


def check_gamma(gamma) -> float:
    g = float(gamma)
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {g}")
    return g
