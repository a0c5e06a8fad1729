"""scikit-learn style wrappers around noise warping and the animation model.

``NoiseWarper`` is a transformer: it is fitted on motion maps and moves
noise textures into image space (``transform``) and back (``inverse_transform``).
``ArticulatedAnimator`` trains the denoiser and motion decoder on rendered
clips and animates reference frames along new motion.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .metrics import body_mask, silhouette_iou
from .noisefield import fusion_index, sample_noise_texture, unwarp_fuse, warp
from .numeric import seed_rng
from .training import TrainConfig
from .validation import check_gamma, check_motion_maps, check_texture, check_videos

__all__ = ["NoiseWarper", "ArticulatedAnimator"]


class NoiseWarper(TransformerMixin, BaseEstimator):
    """Transport noise textures along a fixed set of motion maps.

    Args:
        texture_u: Texel rows of the UV atlas.
        texture_v: Texel columns of the UV atlas.
        channels: Noise channels.
        static_background: Reuse one background draw for every frame.
        per_frame: Fuse each frame into its own texture in ``inverse_transform``.
        random_state: Seed for background noise and sampled textures.
    """

    def __init__(self, texture_u: int = 64, texture_v: int = 64, channels: int = 8,
                 static_background: bool = False, per_frame: bool = False, random_state: int = 0):
        self.texture_u = texture_u
        self.texture_v = texture_v
        self.channels = channels
        self.static_background = static_background
        self.per_frame = per_frame
        self.random_state = random_state

    def fit(self, X, y=None):
        """Record the motion maps ``X`` (``frames x H x W x 4``)."""
        maps = check_motion_maps(X, name="X")
        if maps.ndim != 4:
            raise ValueError("NoiseWarper is fitted on a single clip of motion maps")
        self.motion_maps_ = maps
        self.index_ = fusion_index(maps, self.texture_u, self.texture_v, per_frame=self.per_frame)
        self.coverage_ = self.index_.coverage
        self.n_frames_ = maps.shape[0]
        return self

    def sample_texture(self, seed: int | None = None) -> np.ndarray:
        """A standard-normal ``U x V x C`` texture."""
        rng = seed_rng(self.random_state if seed is None else seed).stream("texture")
        return sample_noise_texture(rng, self.texture_u, self.texture_v, self.channels).values

    def transform(self, X):
        """Warp texture ``X`` into image-space noise ``frames x H x W x C``."""
        check_is_fitted(self, "motion_maps_")
        tex = check_texture(X, self.channels, name="X")
        rng = seed_rng(self.random_state).stream("background")
        return warp(tex, self.motion_maps_, rng, self.static_background)

    def inverse_transform(self, X):
        """Average image-space noise ``X`` back onto the atlas."""
        check_is_fitted(self, "motion_maps_")
        fused, _ = unwarp_fuse(np.asarray(X, dtype=np.float32), index=self.index_)
        return fused


class ArticulatedAnimator(BaseEstimator):
    """Image-to-video model driven by articulated motion maps.

    ``fit`` takes rendered videos ``X`` (``n x frames x H x W x 3``) and their
    motion maps ``y`` (``n x frames x H x W x 4``). ``predict`` animates
    reference frames along new motion maps; ``score`` is the mean silhouette
    IoU of the animation against ground-truth videos.

    Args:
        preset: ``"base"``, ``"jaml"`` or ``"full"`` loss configuration.
        steps: Optimization steps.
        learning_rate: Adam step size.
        batch_size: Clips per step.
        gamma: Noise degradation level used by ``predict``.
        sample_steps: Deterministic sampler steps.
        spatial: Spatial latent factor.
        temporal: Temporal latent factor.
        channels: Latent channels.
        texture_size: Noise atlas side length.
        denoiser_widths: Channel widths of the two denoiser levels.
        decoder_widths: Channel widths of the motion decoder blocks.
        latent_scale: Multiplier applied to codec latents.
        diffusion_steps: Length of the noise schedule.
        beta_start: First schedule value.
        beta_end: Last schedule value.
        random_state: Seed for initialization, training draws and sampling.
    """

    def __init__(self, preset: str = "full", steps: int = 2000, learning_rate: float = 1e-4,
                 batch_size: int = 2, gamma: float = 0.1, sample_steps: int = 20, spatial: int = 8,
                 temporal: int = 4, channels: int = 8, texture_size: int = 64,
                 denoiser_widths=(32, 64), decoder_widths=(16, 8), latent_scale: float = 5.0,
                 diffusion_steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02,
                 random_state: int = 0):
        self.preset = preset
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.gamma = gamma
        self.sample_steps = sample_steps
        self.spatial = spatial
        self.temporal = temporal
        self.channels = channels
        self.texture_size = texture_size
        self.denoiser_widths = denoiser_widths
        self.decoder_widths = decoder_widths
        self.latent_scale = latent_scale
        self.diffusion_steps = diffusion_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.random_state = random_state

    def _config(self, frames: int, height: int, width: int) -> RunConfig:
        train = replace(TrainConfig(), learning_rate=self.learning_rate, steps=self.steps,
                        batch_size=self.batch_size)
        return RunConfig(
            height=height, width=width, f=(frames - 1) // self.temporal,
            spatial=self.spatial, temporal=self.temporal, channels=self.channels,
            denoiser_widths=tuple(self.denoiser_widths), decoder_widths=tuple(self.decoder_widths),
            latent_scale=self.latent_scale, texture_u=self.texture_size, texture_v=self.texture_size,
            diffusion_steps=self.diffusion_steps, beta_start=self.beta_start, beta_end=self.beta_end,
            sample_steps=self.sample_steps, gamma=check_gamma(self.gamma),
            seed=self.random_state, preset=self.preset, checkpoint="", checkpoint_every=0,
            train=train)

    def fit(self, X, y):
        """Train on videos ``X`` with motion maps ``y``."""
        from .pipeline import Clip, train_model

        videos = check_videos(X, self.spatial, self.temporal)
        maps = check_motion_maps(y, name="y")
        if maps.ndim == 4:
            maps = maps[None]
        if maps.shape[:-1] != videos.shape[:-1]:
            raise ValueError(f"y shape {maps.shape[:-1]} does not match X {videos.shape[:-1]}")
        frames, height, width = videos.shape[1:4]
        config = self._config(frames, height, width)
        clips = [Clip(video=v, motion=m) for v, m in zip(videos, maps)]
        self.denoiser_, self.decoder_, self.schedule_, self.history_ = train_model(
            config, clips)
        self.config_ = config
        self.frame_shape_ = (frames, height, width)
        return self

    def _check_motion(self, X) -> np.ndarray:
        maps = check_motion_maps(X, name="X")
        if maps.ndim == 4:
            maps = maps[None]
        if maps.shape[1:4] != self.frame_shape_:
            raise ValueError(f"motion maps {maps.shape[1:4]} differ from the fitted {self.frame_shape_}")
        return maps

    def predict(self, X, reference):
        """Animate ``reference`` frames (``n x H x W x 3``) along motion maps ``X``.

        Returns ``n x frames x H x W x 3`` videos.
        """
        from .pipeline import animate_motion

        check_is_fitted(self, "denoiser_")
        maps = self._check_motion(X)
        refs = np.asarray(reference, dtype=np.float32)
        if refs.ndim == 3:
            refs = refs[None]
        if len(refs) != len(maps) or refs.shape[1:3] != maps.shape[2:4]:
            raise ValueError(f"reference shape {refs.shape} does not fit motion maps {maps.shape}")
        if not np.all(np.isfinite(refs)) or refs.min() < 0.0 or refs.max() > 1.0:
            raise ValueError("reference values must be finite and lie in [0, 1]")
        seeds = seed_rng(self.random_state).stream("predict")
        return np.stack([
            animate_motion(self.denoiser_, self.schedule_, ref, m, self.config_,
                           seed=int(seeds.stream(k).integers(0, 2 ** 63)))["frames"]
            for k, (ref, m) in enumerate(zip(refs, maps))
        ])

    def score(self, X, y):
        """Mean silhouette IoU of animations along ``X`` started from ``y[:, 0]``."""
        videos = check_videos(y, self.spatial, self.temporal, name="y")
        generated = self.predict(X, videos[:, 0])
        maps = self._check_motion(X)
        return float(np.mean([silhouette_iou(body_mask(g), m[..., 3] > 0.5)
                              for g, m in zip(generated, maps)]))
