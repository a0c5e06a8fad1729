"""End-to-end workflows behind the command line: data, training, animation, evaluation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .body import (
    DEFAULT_ROOT,
    PoseSequence,
    Skeleton,
    default_skeleton,
    generate_pose_sequence,
    save_skeleton,
)
from .config import RunConfig, dump_config
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    MotionDecoder,
    MotionDecoderConfig,
    ddim_sample,
    decode_latent,
    encode_latent,
    make_schedule,
    uniform_steps,
)
from .metrics import MetricReport, evaluate_clip
from .noisefield import degrade, downsample_spatiotemporal, sample_noise_texture, warp
from .numeric import load_tensor, sample_standard_normal, save_tensor, seed_rng
from .raster import make_appearance_texture, rasterize_sequence, render_sequence, stack_motion_maps, write_ppm
from .training import prepare_clip, train

log = logging.getLogger(__name__)

__all__ = [
    "Clip",
    "clip_seed",
    "generate_clip",
    "gen_data",
    "load_dataset",
    "build_models",
    "train_model",
    "animate",
    "animate_motion",
    "write_video",
    "evaluate",
    "sweep_gamma",
]


class Clip(dict):
    """``video``, ``motion`` (frames x H x W x 4), ``poses`` and ``seed`` of one clip."""

    @property
    def video(self) -> np.ndarray:
        return self["video"]

    @property
    def motion(self) -> np.ndarray:
        return self["motion"]

    @property
    def poses(self) -> PoseSequence:
        return self["poses"]


def clip_seed(seed: int, index: int) -> int:
    return int(seed_rng(seed).stream("clips").stream(index).integers(0, 2 ** 63))


def scene(config: RunConfig) -> tuple[Skeleton, np.ndarray]:
    """Skeleton and garment texture shared by every clip of a dataset."""
    skeleton = default_skeleton(config.texture_u)
    scale = min(config.height / 96.0, config.width / 128.0)
    if scale != 1.0:
        skeleton = skeleton.scaled(scale)
    return skeleton, make_appearance_texture(skeleton, config.texture_u)


def root_for(config: RunConfig) -> tuple[float, float]:
    return (DEFAULT_ROOT[0] * config.width / 128.0, DEFAULT_ROOT[1] * config.height / 96.0)


def generate_clip(config: RunConfig, skeleton: Skeleton, appearance: np.ndarray, seed: int) -> Clip:
    poses = generate_pose_sequence(
        skeleton, seed_rng(seed).stream("poses"), config.f, config.motion_amplitude,
        root_position=root_for(config), root_jitter=config.root_jitter)
    motion = stack_motion_maps(rasterize_sequence(skeleton, poses, config.height, config.width))
    video = render_sequence(motion, appearance)
    return Clip(video=video, motion=motion, poses=poses, seed=seed)


def make_clips(config: RunConfig, n: int, seed: int) -> list[Clip]:
    skeleton, appearance = scene(config)
    return [generate_clip(config, skeleton, appearance, clip_seed(seed, k)) for k in range(n)]


def gen_data(config: RunConfig, out_dir: str | Path | None = None, n_clips: int | None = None,
             seed: int | None = None) -> Path:
    """Write a synthetic dataset: one directory per clip plus a manifest."""
    out = Path(out_dir or config.data_dir)
    n = config.n_clips if n_clips is None else n_clips
    seed = config.seed if seed is None else seed
    out.mkdir(parents=True, exist_ok=True)
    skeleton, appearance = scene(config)
    save_skeleton(skeleton, out / "skeleton.ini")
    save_tensor(out / "appearance.anwt", appearance)
    entries = []
    for k in range(n):
        s = clip_seed(seed, k)
        clip = generate_clip(config, skeleton, appearance, s)
        d = out / f"clip_{k:03d}"
        d.mkdir(exist_ok=True)
        save_tensor(d / "video.anwt", clip.video)
        save_tensor(d / "motion.anwt", clip.motion)
        save_tensor(d / "poses.anwt", clip.poses.to_array())
        save_skeleton(skeleton, d / "skeleton.ini")
        entries.append({"name": d.name, "seed": s})
    manifest = {"seed": seed, "clips": entries, "config": dump_config(config)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dataset(data_dir: str | Path) -> list[Clip]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    manifest = json.loads(manifest_path.read_text())
    clips = []
    for entry in manifest["clips"]:
        d = root / entry["name"]
        clips.append(Clip(
            name=entry["name"],
            seed=entry["seed"],
            video=load_tensor(d / "video.anwt"),
            motion=load_tensor(d / "motion.anwt"),
            poses=PoseSequence.from_array(load_tensor(d / "poses.anwt")),
        ))
    return clips


def build_models(config: RunConfig, seed: int | None = None) -> tuple[Denoiser, MotionDecoder]:
    torch.manual_seed(config.seed if seed is None else seed)
    denoiser = Denoiser(DenoiserConfig(config.channels, config.denoiser_widths))
    decoder = MotionDecoder(MotionDecoderConfig(config.channels, config.decoder_widths,
                                                config.spatial, config.temporal))
    return denoiser, decoder


def schedule_for(config: RunConfig):
    return make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)


def train_model(config: RunConfig, clips: Sequence[Clip] | None = None,
                checkpoint: str | Path | None = None, log_path: str | Path | None = None):
    """Train from scratch on ``clips`` (or the configured dataset)."""
    if clips is None:
        clips = load_dataset(config.data_dir)
    if not clips:
        raise ValueError("empty dataset")
    tc = config.train_config()
    data = [prepare_clip(c.video, c.motion, config.spatial, config.temporal, config.channels,
                         config.texture_size, tc.per_frame_fusion, config.latent_scale) for c in clips]
    denoiser, decoder = build_models(config)
    if tc.lambda_md == 0:
        decoder_used = None
    else:
        decoder_used = decoder
    schedule = schedule_for(config)
    # an empty path disables checkpointing
    ckpt = (checkpoint if checkpoint is not None else config.checkpoint) or None
    if ckpt is not None:
        Path(ckpt).parent.mkdir(parents=True, exist_ok=True)
    history = train(data, denoiser, decoder_used, tc, schedule, config.texture_size,
                    log_path=log_path, checkpoint_path=ckpt,
                    checkpoint_every=config.checkpoint_every,
                    manifest_extra={"preset": config.preset, "latent_scale": config.latent_scale,
                                    "config": dump_config(config)})
    return denoiser, decoder_used, schedule, history


def animate(denoiser: Denoiser, schedule, reference: np.ndarray, poses: PoseSequence,
            skeleton: Skeleton, config: RunConfig, gamma: float | None = None,
            seed: int | None = None) -> dict:
    """Generate frames that follow ``poses`` starting from ``reference``.

    The pose sequence is rasterized at image resolution and handed to
    :func:`animate_motion`.
    """
    motion = stack_motion_maps(rasterize_sequence(skeleton, poses, config.height, config.width))
    return animate_motion(denoiser, schedule, reference, motion, config, gamma, seed)


def animate_motion(denoiser: Denoiser, schedule, reference: np.ndarray, motion: np.ndarray,
                   config: RunConfig, gamma: float | None = None, seed: int | None = None) -> dict:
    """Generate frames driven by image-resolution motion maps.

    A fresh noise texture is warped through ``motion``, subsampled to the
    latent grid, degraded at ``gamma`` and denoised deterministically.
    """
    gamma = config.gamma if gamma is None else gamma
    rng = seed_rng(config.seed if seed is None else seed).stream("animate")
    texture = sample_noise_texture(rng.stream("texture"), config.texture_u, config.texture_v,
                                   config.channels)
    noise = warp(texture, motion, rng.stream("background"), config.static_background)
    latent_noise = np.ascontiguousarray(downsample_spatiotemporal(noise, config.spatial, config.temporal))
    zeta = sample_standard_normal(rng.stream("zeta"), latent_noise.shape)
    init = degrade(latent_noise, zeta, gamma)
    cond = encode_latent(np.asarray(reference, np.float32)[None], config.spatial, config.temporal,
                         config.channels)[0] * np.float32(config.latent_scale)
    steps = uniform_steps(schedule.T, config.sample_steps)
    denoiser.eval()
    latent = ddim_sample(denoiser, init, cond, schedule, steps)
    frames = decode_latent(latent / np.float32(config.latent_scale), config.spatial, config.temporal)
    return {"frames": frames, "latent": latent, "motion": motion, "init_noise": init}


def write_video(out_dir: str | Path, frames: np.ndarray, latent: np.ndarray | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        write_ppm(out / f"frame_{k:03d}.ppm", frame)
    save_tensor(out / "video.anwt", frames)
    if latent is not None:
        save_tensor(out / "latent.anwt", latent)
    return out


def evaluate(generated: Sequence[np.ndarray], clips: Sequence[Clip], config: RunConfig,
             names: Sequence[str] | None = None) -> MetricReport:
    names = names or [c.get("name", f"clip_{k:03d}") for k, c in enumerate(clips)]
    return MetricReport([
        evaluate_clip(n, g, c.video, c.motion, texture_size=config.texture_size)
        for n, g, c in zip(names, generated, clips)
    ])


def animate_clips(denoiser, schedule, clips: Sequence[Clip], config: RunConfig,
                  gamma: float | None = None, seed: int | None = None) -> list[np.ndarray]:
    """Animate every held-out clip from its own first frame and pose sequence."""
    skeleton, _ = scene(config)
    base = config.seed if seed is None else seed
    return [animate(denoiser, schedule, c.video[0], c.poses, skeleton, config, gamma,
                    seed=clip_seed(base, k))["frames"]
            for k, c in enumerate(clips)]


def sweep_gamma(denoiser, schedule, clips: Sequence[Clip], config: RunConfig,
                gammas: Sequence[float], seed: int | None = None) -> list[dict]:
    """Aggregate metrics of held-out animation at each degradation level."""
    rows = []
    for g in gammas:
        generated = animate_clips(denoiser, schedule, clips, config, gamma=g, seed=seed)
        agg = evaluate(generated, clips, config).aggregate()
        rows.append({"gamma": g, "l1": agg.l1, "ssim": agg.ssim,
                     "silhouette_iou": agg.silhouette_iou, "flicker": agg.flicker,
                     "masked_l1": agg.masked_l1})
    return rows
