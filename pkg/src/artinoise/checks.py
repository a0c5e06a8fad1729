"""Self-check suite: the algebraic, statistical and gradient invariants of the build."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats

from .body import default_skeleton, generate_pose_sequence
from .config import RunConfig
from .diffusion import add_noise, ddim_sample, make_schedule, save_checkpoint, uniform_steps
from .noisefield import (
    degrade,
    downsample_spatiotemporal,
    fusion_index,
    texel_index,
    undegrade,
    unwarp_fuse,
    warp,
)
from .numeric import sample_standard_normal, seed_rng
from .raster import rasterize_sequence, stack_motion_maps
from .training import TrainConfig, gradient_check

__all__ = ["CheckResult", "CHECKS", "run_checks"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<22} {self.seconds:6.2f}s  {self.detail}"


def _random_clip(seed: int, height: int = 96, width: int = 128, f: int = 2, amplitude: float = 0.6):
    skel = default_skeleton(64)
    scale = min(height / 96.0, width / 128.0)
    if scale != 1.0:
        skel = skel.scaled(scale)
    poses = generate_pose_sequence(skel, seed_rng(seed).stream("poses"), f, amplitude,
                                   root_position=(64.0 * width / 128.0, 52.0 * height / 96.0),
                                   root_jitter=6.0 * scale)
    return stack_motion_maps(rasterize_sequence(skel, poses, height, width))


def check_degradation() -> tuple[bool, str]:
    rng = seed_rng(101)
    eps = sample_standard_normal(rng.stream("eps"), 100_000)
    zeta = sample_standard_normal(rng.stream("zeta"), 100_000)
    worst = 0.0
    for g in np.round(np.arange(0.0, 0.91, 0.1), 2):
        back = undegrade(degrade(eps, zeta, g), zeta, g)
        worst = max(worst, float(np.max(np.abs(back - eps))))
    big_e = sample_standard_normal(rng.stream("E"), 1_000_000)
    big_z = sample_standard_normal(rng.stream("Z"), 1_000_000)
    var_dev = max(abs(float(np.var(degrade(big_e, big_z, g), dtype=np.float64)) - 1.0)
                  for g in (0.1, 0.3, 0.5, 0.7, 0.9))
    ok = worst < 1e-5 and var_dev < 0.01
    return ok, f"max roundtrip err {worst:.2e}, max |var-1| {var_dev:.4f}"


def check_fusion_roundtrip() -> tuple[bool, str]:
    worst, covered = 0.0, 0
    for res_k, (h, w) in enumerate([(48, 64), (96, 128), (192, 256)]):
        for seed in range(10):
            maps = _random_clip(1000 * res_k + seed, h, w)
            tex = sample_standard_normal(seed_rng(seed).stream("tex"), (64, 64, 4))
            noise = warp(tex, maps, seed_rng(seed).stream("bg"))
            fused, cov = unwarp_fuse(noise, maps, 64, 64)
            mask = cov > 0
            covered += int(mask.sum())
            worst = max(worst, float(np.max(np.abs(fused[mask] - tex[mask]))))
    return worst <= 1e-6 and covered > 0, f"max texel err {worst:.2e} over {covered} covered texels"


def check_noise_statistics() -> tuple[bool, str]:
    passes = 0
    for seed in range(10):
        maps = np.concatenate([_random_clip(20 * seed + k, f=2) for k in range(3)])
        mask = maps[..., 3] > 0.5
        # covered pixels repeat texels; keep one pixel per distinct texel so
        # the sample is independent under the null
        i, j = texel_index(maps[..., 0][mask], maps[..., 1][mask], 64, 64)
        _, first = np.unique(i * 64 + j, return_index=True)
        tex = sample_standard_normal(seed_rng(seed).stream("tex"), (64, 64, 16))
        noise = warp(tex, maps, seed_rng(seed).stream("bg"))
        if stats.kstest(noise[mask][first].reshape(-1), "norm").pvalue > 0.01:
            passes += 1
    bg_rng = seed_rng(77).stream("bg")
    empty = np.zeros((2, 250, 400, 4), dtype=np.float32)
    bg = warp(np.zeros((8, 8, 1), np.float32), empty, bg_rng)[..., 0].reshape(2, -1)
    rho = float(np.corrcoef(bg[0], bg[1])[0, 1])
    ok = passes >= 9 and abs(rho) < 0.01
    return ok, f"KS passes {passes}/10, background rho {rho:+.4f}"


def check_motion_transport() -> tuple[bool, str]:
    maps = _random_clip(5, f=2)
    tex = sample_standard_normal(seed_rng(5).stream("tex"), (64, 64, 4))
    noise = warp(tex, maps, seed_rng(5).stream("bg"))
    idx = fusion_index(maps, 64, 64, per_frame=True)
    frames, h, w = idx.frame_shape
    first_value: dict[int, np.ndarray] = {}
    pairs = mismatches = 0
    flat = noise.reshape(-1, noise.shape[-1])
    texel = idx.texels % (64 * 64)
    frame_of = idx.pixels // (h * w)
    seen_frames: dict[int, int] = {}
    for pix, tx, fr in zip(idx.pixels, texel, frame_of):
        v = flat[pix]
        if tx in first_value:
            if seen_frames[tx] != fr:
                pairs += 1
            if not np.array_equal(first_value[tx], v):
                mismatches += 1
        else:
            first_value[tx] = v
            seen_frames[tx] = fr
    return mismatches == 0 and pairs > 0, f"{pairs} cross-frame texel revisits, {mismatches} mismatches"


def check_downsampling() -> tuple[bool, str]:
    # the (49, 480, 720, 16) -> (13, 60, 90, 16) instance, on a zero-stride view
    big = np.lib.stride_tricks.as_strided(np.zeros(1, np.float32), (49, 480, 720, 16), (0, 0, 0, 0))
    shape_ok = downsample_spatiotemporal(big, 8, 4).shape == (13, 60, 90, 16)
    x = sample_standard_normal(seed_rng(3), (9, 24, 32, 2))
    out = downsample_spatiotemporal(x, 8, 4)
    brute = np.empty((3, 3, 4, 2), np.float32)
    for k in range(3):
        for r in range(3):
            for c in range(4):
                brute[k, r, c] = x[4 * k, 8 * r, 8 * c]
    ok = shape_ok and out.shape == (3, 3, 4, 2) and np.array_equal(out, brute)
    return ok, f"large-instance shape ok={shape_ok}, brute-force match={np.array_equal(out, brute)}"


def check_gradients() -> tuple[bool, str]:
    report = gradient_check(TrainConfig(), gamma=0.3)
    err = report["max_relative_error"]
    return err < 1e-3, f"max rel err {err:.2e} ({report['worst_parameter']}, {report['parameters']} params)"


def check_sampler() -> tuple[bool, str]:
    from .cli import main as cli_main
    from .numeric import save_tensor
    from .pipeline import build_models, make_clips

    schedule = make_schedule(200, 1e-4, 0.02)
    z0 = sample_standard_normal(seed_rng(9).stream("z0"), (3, 12, 16, 8))
    eps = sample_standard_normal(seed_rng(9).stream("eps"), z0.shape)
    zt = add_noise(z0, eps, 200, schedule)

    def oracle(z, c, t):
        return torch.as_tensor(eps)[None]

    rec = ddim_sample(oracle, zt, z0[0], schedule, uniform_steps(200, 20))
    rec_err = float(np.max(np.abs(rec - z0)))

    cfg = RunConfig(denoiser_widths=(8, 16), decoder_widths=(4, 4), sample_steps=5)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        denoiser, decoder = build_models(cfg, seed=0)
        with torch.no_grad():
            denoiser.conv_out.weight.normal_(0.0, 0.05)
        save_checkpoint(tmp / "model.ckpt", denoiser, decoder, make_schedule(200, 1e-4, 0.02))
        clip = make_clips(cfg, 1, 4)[0]
        save_tensor(tmp / "ref.anwt", clip.video[0])
        save_tensor(tmp / "poses.anwt", clip.poses.to_array())
        outs = []
        for k in range(2):
            code = cli_main(["animate", "--checkpoint", str(tmp / "model.ckpt"),
                             "--reference", str(tmp / "ref.anwt"), "--poses", str(tmp / "poses.anwt"),
                             "--out", str(tmp / f"run{k}"), "--set", "sample_steps=5"])
            if code != 0:
                return False, f"animate exited with {code}"
            outs.append((tmp / f"run{k}" / "video.anwt").read_bytes())
    same = outs[0] == outs[1]
    ok = same and rec_err < 1e-4
    return ok, f"animate runs bitwise equal={same}, oracle recovery err {rec_err:.2e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("degradation_algebra", check_degradation),
    ("warp_fusion_roundtrip", check_fusion_roundtrip),
    ("noise_statistics", check_noise_statistics),
    ("motion_transport", check_motion_transport),
    ("downsampling_contract", check_downsampling),
    ("gradient_correctness", check_gradients),
    ("sampler_determinism", check_sampler),
]


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
