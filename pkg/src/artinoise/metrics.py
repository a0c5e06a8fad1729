"""Frame metrics and motion-adherence measures for generated clips."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .noisefield import unwarp_fuse

__all__ = [
    "l1",
    "masked_l1",
    "ssim",
    "video_ssim",
    "body_mask",
    "silhouette_iou",
    "flicker",
    "ClipMetrics",
    "MetricReport",
    "SSIM_C1",
    "SSIM_C2",
]

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def masked_l1(a, b, mask) -> float:
    """Mean absolute difference over pixels where ``mask`` holds (all channels)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(a - b)[mask]))


def ssim(a, b, window: int = 8, stride: int = 4) -> float:
    """Mean SSIM over uniform ``window x window`` patches, averaged over channels.

    Patch statistics use population (1/N) moments.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < window or w < window:
        raise ValueError(f"frame {h}x{w} smaller than the {window}x{window} window")
    win_a = np.lib.stride_tricks.sliding_window_view(a, (window, window), axis=(0, 1))[::stride, ::stride]
    win_b = np.lib.stride_tricks.sliding_window_view(b, (window, window), axis=(0, 1))[::stride, ::stride]
    mu_a = win_a.mean(axis=(-2, -1))
    mu_b = win_b.mean(axis=(-2, -1))
    # one formula for all second moments, so ssim(a, a) is exactly 1
    var_a = (win_a * win_a).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (win_b * win_b).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (win_a * win_b).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def video_ssim(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean([ssim(x, y) for x, y in zip(a, b)]))


def body_mask(frames, background=(0.0, 0.0, 0.0), threshold: float = 0.05) -> np.ndarray:
    """Pixels whose color differs from the background by more than ``threshold``."""
    frames = np.asarray(frames, dtype=np.float64)
    diff = np.abs(frames - np.asarray(background, dtype=np.float64))
    return diff.max(axis=-1) > threshold


def silhouette_iou(generated, truth) -> float:
    generated = np.asarray(generated, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if generated.shape != truth.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {truth.shape}")
    union = np.logical_or(generated, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(generated, truth).sum() / union)


def flicker(video, motion_maps, texture_size: tuple[int, int] = (64, 64)) -> float:
    """Temporal inconsistency along surface correspondences.

    Every frame is unwarped onto the UV atlas on its own; consecutive frames
    are compared on texels both of them see. Returns the mean squared
    difference (0 when nothing is visible twice).
    """
    video = np.asarray(video, dtype=np.float32)
    maps = motion_maps if isinstance(motion_maps, np.ndarray) else \
        np.stack([np.asarray(m, np.float32) for m in motion_maps])
    if video.shape[:3] != maps.shape[:3]:
        raise ValueError(f"video {video.shape[:3]} and motion maps {maps.shape[:3]} differ")
    fused, cov = unwarp_fuse(video, maps, *texture_size, per_frame=True)
    total, count = 0.0, 0
    for k in range(len(video) - 1):
        both = (cov[k] > 0) & (cov[k + 1] > 0)
        if both.any():
            d = fused[k][both].astype(np.float64) - fused[k + 1][both]
            total += float(np.sum(d * d))
            count += d.size
    return total / count if count else 0.0


@dataclass
class ClipMetrics:
    clip: str
    l1: float
    ssim: float
    silhouette_iou: float
    flicker: float
    masked_l1: float = float("nan")

    def __post_init__(self):
        if self.l1 < 0 or self.flicker < 0:
            raise ValueError("l1 and flicker are non-negative")
        if not -1.0 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if not 0.0 <= self.silhouette_iou <= 1.0:
            raise ValueError(f"iou {self.silhouette_iou} outside [0, 1]")


FIELDS = ("clip", "l1", "ssim", "silhouette_iou", "flicker", "masked_l1")


@dataclass
class MetricReport:
    clips: list[ClipMetrics] = field(default_factory=list)

    def aggregate(self) -> ClipMetrics:
        def mean(name):
            return float(np.mean([getattr(c, name) for c in self.clips])) if self.clips else float("nan")
        return ClipMetrics("aggregate", *(mean(f) for f in FIELDS[1:]))

    def rows(self) -> list[dict]:
        out = [{f: getattr(c, f) for f in FIELDS} for c in self.clips]
        out.append({f: getattr(self.aggregate(), f) for f in FIELDS})
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())


def evaluate_clip(name: str, generated, truth, truth_maps, background=(0.0, 0.0, 0.0),
                  texture_size: tuple[int, int] = (64, 64)) -> ClipMetrics:
    """All metrics for one generated clip against its ground-truth render."""
    generated = np.asarray(generated, dtype=np.float32)
    truth = np.asarray(truth, dtype=np.float32)
    maps = truth_maps if isinstance(truth_maps, np.ndarray) else \
        np.stack([np.asarray(m, np.float32) for m in truth_maps])
    truth_mask = maps[..., 3] > 0.5
    return ClipMetrics(
        clip=name,
        l1=l1(generated, truth),
        ssim=video_ssim(generated, truth),
        silhouette_iou=silhouette_iou(body_mask(generated, background), truth_mask),
        flicker=flicker(generated, maps, texture_size),
        masked_l1=masked_l1(generated, truth, truth_mask),
    )


def evaluate_clips(names: Sequence[str], generated, truths, truth_maps, **kw) -> MetricReport:
    return MetricReport([evaluate_clip(n, g, t, m, **kw)
                         for n, g, t, m in zip(names, generated, truths, truth_maps)])
