"""Acceptance suite: one PASS/FAIL line per criterion (run with ``pytest -s`` to see them).

Criteria 8 and 9 train nine desk-scale models and take about fifteen minutes
on one CPU core; they carry the ``slow`` marker (deselect with ``-m "not slow"``).
"""

import subprocess
import sys
import time

import numpy as np
import pytest
import torch
from scipy import stats

from artinoise.body import default_skeleton, generate_pose_sequence
from artinoise.cli import main as cli_main
from artinoise.config import RunConfig
from artinoise.diffusion import add_noise, make_schedule, predict_z0, save_checkpoint
from artinoise.noisefield import degrade, downsample_spatiotemporal, undegrade, unwarp_fuse, warp
from artinoise.numeric import sample_standard_normal, save_tensor, seed_rng
from artinoise.pipeline import build_models, make_clips, sweep_gamma, train_model
from artinoise.raster import rasterize_sequence, stack_motion_maps
from artinoise.training import TrainConfig, gradient_check

SEEDS = (0, 1, 2)
PRESETS = ("base", "jaml", "full")
GAMMAS = (0.1, 0.3, 0.5, 0.7, 1.0)
# desk-scale run: default resolution and model; see the README for the learning rate
DESK_OVERRIDES = {"train.steps": "2000", "train.learning_rate": "1e-3"}


def report(n, ok, seconds, limit, detail):
    within = seconds < limit
    status = "PASS" if ok and within else "FAIL"
    print(f"\ncriterion {n:>2}: {status}  {seconds:7.1f}s (limit {limit:.0f}s)  {detail}")
    assert ok, detail
    assert within, f"took {seconds:.1f}s, limit {limit}s"


def clip_maps(seed, height=96, width=128, f=2):
    scale = min(height / 96, width / 128)
    skel = default_skeleton(64).scaled(scale)
    poses = generate_pose_sequence(skel, seed_rng(seed), f, 0.6,
                                   root_position=(64.0 * scale, 52.0 * scale), root_jitter=6.0 * scale)
    return stack_motion_maps(rasterize_sequence(skel, poses, height, width))


def test_criterion_1_degradation_algebra():
    start = time.perf_counter()
    rng = seed_rng(11)
    eps = sample_standard_normal(rng.stream("e"), 100_000)
    zeta = sample_standard_normal(rng.stream("z"), 100_000)
    worst = max(float(np.max(np.abs(undegrade(degrade(eps, zeta, g), zeta, g) - eps)))
                for g in [k / 10 for k in range(10)])
    big_e = sample_standard_normal(rng.stream("E"), 1_000_000)
    big_z = sample_standard_normal(rng.stream("Z"), 1_000_000)
    var_dev = max(abs(np.var(degrade(big_e, big_z, g).astype(np.float64)) - 1.0)
                  for g in [k / 10 for k in range(11)])
    report(1, worst < 1e-5 and var_dev < 0.01, time.perf_counter() - start, 5,
           f"roundtrip max err {worst:.1e}, max |var - 1| {var_dev:.4f}")


def test_criterion_2_warp_fusion_roundtrip():
    start = time.perf_counter()
    worst, covered = 0.0, 0
    for h, w in ((48, 64), (96, 128), (192, 256)):
        for seed in range(10):
            maps = clip_maps(100 * h + seed, h, w)
            tex = sample_standard_normal(seed_rng(seed).stream("tex"), (64, 64, 4))
            fused, cov = unwarp_fuse(warp(tex, maps, seed_rng(seed).stream("bg")), maps, 64, 64)
            mask = cov > 0
            covered += int(mask.sum())
            worst = max(worst, float(np.max(np.abs(fused[mask] - tex[mask]))))
    report(2, worst <= 1e-6 and covered > 0, time.perf_counter() - start, 10,
           f"max texel err {worst:.1e} over {covered} covered texels")


def test_criterion_3_noise_statistics():
    start = time.perf_counter()
    passes = 0
    for seed in range(10):
        maps = clip_maps(500 + seed)
        mask = maps[..., 3] > 0.5
        tex = sample_standard_normal(seed_rng(seed).stream("tex"), (64, 64, 8))
        noise = warp(tex, maps, seed_rng(seed).stream("bg"))
        # one pixel per distinct texel, so the sample is i.i.d. under the null
        u = np.minimum((maps[..., 0][mask] * 64).astype(int), 63)
        v = np.minimum((maps[..., 1][mask] * 64).astype(int), 63)
        _, first = np.unique(u * 64 + v, return_index=True)
        if stats.kstest(noise[mask][first].ravel(), "norm").pvalue > 0.01:
            passes += 1
    empty = np.zeros((2, 200, 300, 4), np.float32)
    bg = warp(np.zeros((4, 4, 1), np.float32), empty, seed_rng(3).stream("bg"))[..., 0].reshape(2, -1)
    rho = float(np.corrcoef(bg)[0, 1])
    report(3, passes >= 9 and abs(rho) < 0.01, time.perf_counter() - start, 10,
           f"KS normal for {passes}/10 seeds, background frame correlation {rho:+.4f}")


def test_criterion_4_motion_transport():
    start = time.perf_counter()
    maps = clip_maps(21)
    tex = sample_standard_normal(seed_rng(4).stream("tex"), (64, 64, 4))
    noise = warp(tex, maps, seed_rng(4).stream("bg"))
    mask = maps[..., 3] > 0.5
    u = np.minimum((maps[..., 0] * 64).astype(int), 63)
    v = np.minimum((maps[..., 1] * 64).astype(int), 63)
    reference, frame_of, pairs, mismatches = {}, {}, 0, 0
    for fr, y, x in zip(*np.nonzero(mask)):
        key = (u[fr, y, x], v[fr, y, x])
        value = noise[fr, y, x].tobytes()
        if key not in reference:
            reference[key], frame_of[key] = value, fr
            continue
        pairs += frame_of[key] != fr
        mismatches += value != reference[key]
    report(4, mismatches == 0 and pairs > 0, time.perf_counter() - start, 5,
           f"{pairs} cross-frame revisits, {mismatches} mismatches")


def test_criterion_5_downsampling_contract():
    start = time.perf_counter()
    view = np.lib.stride_tricks.as_strided(np.zeros(1, np.float32), (49, 480, 720, 16), (0, 0, 0, 0))
    large_shape = downsample_spatiotemporal(view, 8, 4).shape
    ok = large_shape == (13, 60, 90, 16)
    for f, h, w in ((1, 1, 1), (2, 3, 4), (3, 2, 5)):
        x = sample_standard_normal(seed_rng(f * 100 + h), (4 * f + 1, 8 * h, 8 * w, 3))
        out = downsample_spatiotemporal(x, 8, 4)
        oracle = np.array([[[x[4 * k, 8 * i, 8 * j] for j in range(w)] for i in range(h)]
                           for k in range(f + 1)])
        ok = ok and out.shape == (f + 1, h, w, 3) and np.array_equal(out, oracle)
    report(5, ok, time.perf_counter() - start, 5, f"large instance -> {large_shape}, brute force match={ok}")


def test_criterion_6_gradient_correctness():
    start = time.perf_counter()
    result = gradient_check(TrainConfig(), gamma=0.3)
    err = result["max_relative_error"]
    report(6, err < 1e-3, time.perf_counter() - start, 60,
           f"max relative error {err:.1e} over {result['parameters']} parameters")


def test_criterion_7_sampler_determinism(tmp_path):
    start = time.perf_counter()
    schedule = make_schedule(200, 1e-4, 0.02)
    z0 = sample_standard_normal(seed_rng(7).stream("z0"), (3, 12, 16, 8))
    eps = sample_standard_normal(seed_rng(7).stream("eps"), z0.shape)
    recovery = max(float(np.max(np.abs(predict_z0(add_noise(z0, eps, t, schedule), eps, t, schedule) - z0)))
                   for t in (1, 50, 100, 200))

    cfg = RunConfig(denoiser_widths=(8, 16), decoder_widths=(4, 4))
    denoiser, decoder = build_models(cfg, seed=0)
    with torch.no_grad():
        denoiser.conv_out.weight.normal_(0.0, 0.05)
    save_checkpoint(tmp_path / "m.ckpt", denoiser, decoder, schedule)
    clip = make_clips(cfg, 1, 5)[0]
    save_tensor(tmp_path / "ref.anwt", clip.video[0])
    save_tensor(tmp_path / "poses.anwt", clip.poses.to_array())
    outputs = []
    for k in range(2):
        code = cli_main(["animate", "--checkpoint", str(tmp_path / "m.ckpt"), "--reference",
                         str(tmp_path / "ref.anwt"), "--poses", str(tmp_path / "poses.anwt"),
                         "--out", str(tmp_path / f"out{k}"), "--set", "sample_steps=5"])
        assert code == 0
        outputs.append((tmp_path / f"out{k}" / "video.anwt").read_bytes())
    same = outputs[0] == outputs[1]
    report(7, same and recovery < 1e-4, time.perf_counter() - start, 10,
           f"bitwise equal runs={same}, oracle one-step recovery err {recovery:.1e}")


@pytest.fixture(scope="module")
def desk_runs():
    """Train every preset for every seed; evaluate held-out clips at the inference gamma."""
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for preset in PRESETS:
            cfg = RunConfig().with_overrides({**DESK_OVERRIDES, "run.preset": preset, "run.seed": str(seed)})
            train_clips = make_clips(cfg, 16, seed)
            held_out = make_clips(cfg, 4, 10_000 + seed)
            denoiser, _, schedule, _ = train_model(cfg, train_clips, checkpoint="")
            row = sweep_gamma(denoiser, schedule, held_out, cfg, [cfg.gamma])[0]
            runs[preset, seed] = {"cfg": cfg, "denoiser": denoiser, "schedule": schedule,
                                  "held_out": held_out, "row": row}
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_preset_ordering(desk_runs):
    runs, seconds = desk_runs
    iou = {p: float(np.mean([runs[p, s]["row"]["silhouette_iou"] for s in SEEDS])) for p in PRESETS}
    l1 = {p: float(np.mean([runs[p, s]["row"]["masked_l1"] for s in SEEDS])) for p in PRESETS}
    gain = 1.0 - l1["full"] / l1["base"]
    ok = iou["full"] >= iou["jaml"] >= iou["base"] and gain >= 0.05
    detail = ("IoU " + " ".join(f"{p}={iou[p]:.3f}" for p in PRESETS)
              + "; masked L1 " + " ".join(f"{p}={l1[p]:.3f}" for p in PRESETS)
              + f"; full vs base L1 reduction {100 * gain:.1f}%")
    report(8, ok, seconds, 45 * 60, detail)


@pytest.mark.slow
def test_criterion_9_gamma_sweep(desk_runs):
    runs, _ = desk_runs
    start = time.perf_counter()
    curves = []
    for seed in SEEDS:
        r = runs["full", seed]
        rows = sweep_gamma(r["denoiser"], r["schedule"], r["held_out"], r["cfg"], GAMMAS)
        curves.append([row["silhouette_iou"] for row in rows])
    mean = np.mean(curves, axis=0)
    detail = "IoU by gamma " + " ".join(f"{g}:{m:.3f}" for g, m in zip(GAMMAS, mean))
    report(9, mean[0] > mean[-1], time.perf_counter() - start, 10 * 60, detail)


def test_criterion_10_check_command():
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "artinoise", "check"], capture_output=True, text=True)
    print(proc.stdout)
    report(10, proc.returncode == 0, time.perf_counter() - start, 180,
           f"check exit code {proc.returncode}")
