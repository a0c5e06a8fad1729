"""Articulated noise warping for image-to-video diffusion at desk scale."""

from .body import Bone, Pose, PoseSequence, Skeleton, default_skeleton, generate_pose_sequence
from .config import RunConfig, load_config
from .diffusion import (
    Denoiser,
    MotionDecoder,
    add_noise,
    ddim_sample,
    decode_latent,
    encode_latent,
    load_checkpoint,
    make_schedule,
    predict_z0,
    save_checkpoint,
)
from .estimator import ArticulatedAnimator, NoiseWarper
from .noisefield import degrade, downsample_spatiotemporal, undegrade, unwarp_fuse, warp
from .numeric import load_tensor, sample_standard_normal, save_tensor, seed_rng
from .raster import MotionMap, rasterize_motion_map, rasterize_sequence, render_appearance
from .training import TrainConfig, gradient_check

__version__ = "0.1.0"

__all__ = [
    "ArticulatedAnimator",
    "Bone",
    "Denoiser",
    "MotionDecoder",
    "MotionMap",
    "NoiseWarper",
    "Pose",
    "PoseSequence",
    "RunConfig",
    "Skeleton",
    "TrainConfig",
    "add_noise",
    "ddim_sample",
    "decode_latent",
    "default_skeleton",
    "degrade",
    "downsample_spatiotemporal",
    "encode_latent",
    "generate_pose_sequence",
    "gradient_check",
    "load_checkpoint",
    "load_config",
    "load_tensor",
    "make_schedule",
    "predict_z0",
    "rasterize_motion_map",
    "rasterize_sequence",
    "render_appearance",
    "sample_standard_normal",
    "save_checkpoint",
    "save_tensor",
    "seed_rng",
    "undegrade",
    "unwarp_fuse",
    "warp",
    "__version__",
]
