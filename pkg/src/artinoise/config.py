"""Run configuration: an INI file of ``key = value`` sections plus overrides."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .training import TrainConfig, apply_preset

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config"]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = "data"
    checkpoint: str = "runs/model.ckpt"
    output_dir: str = "out"
    # video
    height: int = 96
    width: int = 128
    f: int = 2
    spatial: int = 8
    temporal: int = 4
    motion_amplitude: float = 0.5
    root_jitter: float = 4.0
    n_clips: int = 16
    # latent / model
    channels: int = 8
    denoiser_widths: tuple[int, int] = (32, 64)
    decoder_widths: tuple[int, int] = (16, 8)
    latent_scale: float = 5.0
    # noise
    texture_u: int = 64
    texture_v: int = 64
    static_background: bool = False
    per_frame_fusion: bool = False
    # schedule / sampling
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 20
    # inference
    gamma: float = 0.1
    seed: int = 0
    preset: str = "full"
    checkpoint_every: int = 500
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.height % self.spatial or self.width % self.spatial:
            raise ValueError(f"{self.height}x{self.width} not divisible by spatial factor {self.spatial}")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8")
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.latent_scale <= 0:
            raise ValueError("latent_scale must be positive")
        if self.channels < 3:
            raise ValueError("latent needs at least 3 channels")

    @property
    def frames(self) -> int:
        return self.temporal * self.f + 1

    @property
    def texture_size(self) -> tuple[int, int]:
        return (self.texture_u, self.texture_v)

    def train_config(self) -> TrainConfig:
        tc = replace(self.train, seed=self.seed, per_frame_fusion=self.per_frame_fusion,
                     static_background=self.static_background)
        return apply_preset(tc, self.preset)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(dump_config(self))
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            section = section or "run"
            if not cp.has_section(section):
                cp.add_section(section)
            cp[section][name] = value
        return _from_parser(cp)


_TUPLE_FIELDS = {"denoiser_widths", "decoder_widths"}


def _convert(ftype, text: str):
    if ftype in ("bool", bool):
        return _parse_bool(text)
    if ftype in ("int", int):
        return int(text)
    if ftype in ("float", float):
        return float(text)
    return text


def _field_types(cls) -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(cls)}


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    run_types = _field_types(RunConfig)
    train_types = _field_types(TrainConfig)
    kwargs, train_kwargs = {}, {}
    for section in cp.sections():
        for key, value in cp[section].items():
            if section == "train" and key in train_types:
                train_kwargs[key] = _convert(train_types[key], value)
            elif key in _TUPLE_FIELDS:
                kwargs[key] = tuple(int(x) for x in value.split(","))
            elif key in run_types and key != "train":
                kwargs[key] = _convert(run_types[key], value)
            else:
                raise KeyError(f"unknown config key [{section}] {key}")
    return RunConfig(train=TrainConfig(**train_kwargs), **kwargs)


_RUN_OWNED = {"seed", "per_frame_fusion", "static_background"}

_SECTIONS = {
    "paths": ("data_dir", "checkpoint", "output_dir"),
    "video": ("height", "width", "f", "spatial", "temporal", "motion_amplitude", "root_jitter", "n_clips"),
    "model": ("channels", "denoiser_widths", "decoder_widths", "latent_scale"),
    "noise": ("texture_u", "texture_v", "static_background", "per_frame_fusion"),
    "schedule": ("diffusion_steps", "beta_start", "beta_end", "sample_steps"),
    "run": ("gamma", "seed", "preset", "checkpoint_every"),
}


def dump_config(config: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for section, names in _SECTIONS.items():
        cp[section] = {}
        for name in names:
            value = getattr(config, name)
            cp[section][name] = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
    # seed and noise flags live in their own sections; train_config() copies them in
    cp["train"] = {f.name: str(getattr(config.train, f.name)) for f in fields(TrainConfig)
                   if f.name not in _RUN_OWNED}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path is not None:
        if not cp.read(path):
            raise FileNotFoundError(path)
    config = _from_parser(cp)
    return config.with_overrides(overrides) if overrides else config


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Like :func:`load_config` for INI text already in memory."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    config = _from_parser(cp)
    return config.with_overrides(overrides) if overrides else config
