"""Point-in-capsule rasterizer for UV motion maps and ground-truth frames."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .body import Pose, PoseSequence, Skeleton, forward_kinematics
from .noisefield import texel_index

__all__ = [
    "MotionMap",
    "rasterize_motion_map",
    "rasterize_sequence",
    "render_appearance",
    "render_sequence",
    "stack_motion_maps",
    "make_appearance_texture",
    "write_ppm",
    "read_ppm",
]

U, V, PART, MASK = range(4)


@dataclass(frozen=True, eq=False)
class MotionMap:
    """Per-pixel ``(u, v, part_id, mask)`` for one frame, stored as ``H x W x 4``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 4:
            raise ValueError(f"motion map must be H x W x 4, got {data.shape}")
        object.__setattr__(self, "data", data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.data[..., U]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., V]

    @property
    def part_id(self) -> np.ndarray:
        return self.data[..., PART].astype(np.int64)

    @property
    def mask(self) -> np.ndarray:
        return self.data[..., MASK] > 0.5

    def __eq__(self, other) -> bool:
        return isinstance(other, MotionMap) and np.array_equal(self.data, other.data)


def stack_motion_maps(maps: Sequence[MotionMap] | np.ndarray) -> np.ndarray:
    """``frames x H x W x 4`` float32 array from a list of maps (or pass-through)."""
    if isinstance(maps, np.ndarray):
        if maps.ndim != 4 or maps.shape[-1] != 4:
            raise ValueError(f"expected frames x H x W x 4, got {maps.shape}")
        return maps.astype(np.float32, copy=False)
    return np.stack([np.asarray(m, dtype=np.float32) for m in maps])


def rasterize_motion_map(skeleton: Skeleton, pose: Pose, height: int, width: int) -> MotionMap:
    """Render which surface point each pixel center sees.

    Pixel ``(row, col)`` is sampled at ``(col + 0.5, row + 0.5)``. A pixel is
    inside bone ``i`` when its distance to the bone axis segment is at most
    the half width; the highest containing bone index wins. The winner's
    arc-length fraction ``s`` and signed transverse fraction ``d`` map into
    its chart as ``u = u0 + s (u1 - u0)``, ``v = (v0 + v1)/2 + d (v1 - v0)/2``.
    """
    if height < 1 or width < 1:
        raise ValueError("image size must be positive")
    origins, dirs = forward_kinematics(skeleton, pose)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs.astype(np.float64) + 0.5
    py = ys.astype(np.float64) + 0.5
    out = np.zeros((height, width, 4), dtype=np.float32)
    for i, bone in enumerate(skeleton.bones):
        ox, oy = origins[i]
        dx, dy = dirs[i]
        rx, ry = px - ox, py - oy
        along = rx * dx + ry * dy
        perp = dx * ry - dy * rx
        s = np.clip(along / bone.rest_length, 0.0, 1.0)
        cx = rx - s * bone.rest_length * dx
        cy = ry - s * bone.rest_length * dy
        inside = cx * cx + cy * cy <= bone.half_width * bone.half_width
        if not inside.any():
            continue
        d = np.clip(perp / bone.half_width, -1.0, 1.0)
        u0, v0, u1, v1 = bone.chart
        out[inside, U] = (u0 + s[inside] * (u1 - u0)).astype(np.float32)
        out[inside, V] = ((v0 + v1) / 2 + d[inside] * (v1 - v0) / 2).astype(np.float32)
        out[inside, PART] = i + 1
        out[inside, MASK] = 1.0
    return MotionMap(out)


def rasterize_sequence(skeleton: Skeleton, poses: PoseSequence | Sequence[Pose],
                       height: int, width: int) -> list[MotionMap]:
    return [rasterize_motion_map(skeleton, p, height, width) for p in poses]


def render_appearance(motion_map: MotionMap | np.ndarray, texture: np.ndarray,
                      background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Color each body pixel with its nearest texel; background gets ``background``."""
    texture = np.asarray(texture, dtype=np.float32)
    if texture.ndim != 3 or min(texture.shape) < 1:
        raise ValueError(f"texture must be U x V x channels, got {texture.shape}")
    mm = np.asarray(motion_map, dtype=np.float32)
    frame = np.empty(mm.shape[:2] + (texture.shape[2],), dtype=np.float32)
    frame[...] = np.asarray(background, dtype=np.float32)
    mask = mm[..., MASK] > 0.5
    i, j = texel_index(mm[..., U][mask], mm[..., V][mask], texture.shape[0], texture.shape[1])
    frame[mask] = texture[i, j]
    return frame


def render_sequence(maps, texture, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    stack = stack_motion_maps(maps)
    return np.stack([render_appearance(m, texture, background) for m in stack])


def make_appearance_texture(skeleton: Skeleton, size: int = 64, seed_hue: float = 0.0) -> np.ndarray:
    """Deterministic ``size x size x 3`` garment texture in [0.3, 1].

    Each chart gets its own hue plus bands along the bone axis so that
    rotation and sliding are visible in rendered frames.
    """
    tex = np.full((size, size, 3), 0.5, dtype=np.float32)
    centers = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(centers, centers, indexing="ij")
    n = len(skeleton)
    for k, bone in enumerate(skeleton.bones):
        u0, v0, u1, v1 = bone.chart
        hue = (seed_hue + k / n) % 1.0
        base = np.array(colorsys.hsv_to_rgb(hue, 0.6, 0.9), dtype=np.float32)
        inside = (uu >= u0 - 1.0 / size) & (uu <= u1 + 1.0 / size) & (vv >= v0 - 1.0 / size) & (vv <= v1 + 1.0 / size)
        s = (uu - u0) / (u1 - u0)
        band = 0.75 + 0.25 * np.sign(np.sin(2 * np.pi * 3 * s))
        shade = np.clip(base[None, None, :] * band[..., None], 0.3, 1.0)
        tex[inside] = shade[inside]
    return tex


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    """Binary P6 pixmap, maxval 255; values in [0, 1] are rounded."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = np.repeat(frame[..., None], 3, axis=2)
    img = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img[..., :3].tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError("not a binary P6 pixmap")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float32) / maxval
