"""2D articulated puppet: skeleton, UV atlas, forward kinematics, pose sequences."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numeric import RngState

__all__ = [
    "Bone",
    "Skeleton",
    "Pose",
    "PoseSequence",
    "default_skeleton",
    "forward_kinematics",
    "generate_pose_sequence",
    "save_skeleton",
    "load_skeleton",
]


@dataclass(frozen=True)
class Bone:
    parent: int
    rest_length: float
    rest_angle: float
    half_width: float
    chart: tuple[float, float, float, float]
    # Fraction along the parent axis where this bone starts; 1.0 is the
    # parent's endpoint. The default skeleton hangs its legs at the pelvis (0.0).
    attach: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.rest_length <= 0:
            raise ValueError("rest_length must be positive")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        u0, v0, u1, v1 = self.chart
        if not (0.0 <= u0 < u1 <= 1.0 and 0.0 <= v0 < v1 <= 1.0):
            raise ValueError(f"invalid chart {self.chart}")
        if not 0.0 <= self.attach <= 1.0:
            raise ValueError("attach must lie in [0, 1]")


def _charts_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@dataclass(frozen=True)
class Skeleton:
    bones: tuple[Bone, ...]

    def __post_init__(self):
        object.__setattr__(self, "bones", tuple(self.bones))
        if not self.bones:
            raise ValueError("skeleton needs at least one bone")
        if self.bones[0].parent != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        for i, b in enumerate(self.bones[1:], start=1):
            if not 0 <= b.parent < i:
                raise ValueError(f"bone {i} has parent {b.parent}; parents must precede children")
        for i in range(len(self.bones)):
            for j in range(i + 1, len(self.bones)):
                if _charts_overlap(self.bones[i].chart, self.bones[j].chart):
                    raise ValueError(f"charts of bones {i} and {j} overlap")

    def __len__(self) -> int:
        return len(self.bones)

    def scaled(self, factor: float) -> "Skeleton":
        """Same topology and atlas with all pixel lengths multiplied by ``factor``."""
        return Skeleton(tuple(
            replace(b, rest_length=b.rest_length * factor, half_width=b.half_width * factor)
            for b in self.bones
        ))


@dataclass(frozen=True)
class Pose:
    root_position: tuple[float, float]
    rotations: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))
        object.__setattr__(self, "root_position", tuple(float(x) for x in self.root_position))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.root_position, *self.rotations], dtype=np.float32)

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = [float(x) for x in vec]
        return cls((vec[0], vec[1]), tuple(vec[2:]))


@dataclass(frozen=True)
class PoseSequence:
    frames: tuple[Pose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        n = len(self.frames)
        if n < 5 or (n - 1) % 4:
            raise ValueError(f"pose sequences have 4f+1 frames with f >= 1, got {n}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, k):
        return self.frames[k]

    @property
    def f(self) -> int:
        return (len(self.frames) - 1) // 4

    def to_array(self) -> np.ndarray:
        """``frames x (2 + bone count)`` array: root x, root y, rotations."""
        return np.stack([p.to_vector() for p in self.frames])

    @classmethod
    def from_array(cls, arr) -> "PoseSequence":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise ValueError(f"expected frames x (2 + bones) array, got {arr.shape}")
        return cls(tuple(Pose.from_vector(row) for row in arr))

    def scaled(self, factor: float) -> "PoseSequence":
        return PoseSequence(tuple(
            Pose((p.root_position[0] * factor, p.root_position[1] * factor), p.rotations)
            for p in self.frames
        ))


def atlas_grid(rows: int = 3, cols: int = 3, gutter: float = 2 / 64):
    """Chart rectangles of a rows x cols grid, separated by ``gutter`` in UV units."""
    charts = []
    for r in range(rows):
        for c in range(cols):
            u0 = c / cols + gutter / 2
            u1 = (c + 1) / cols - gutter / 2
            v0 = r / rows + gutter / 2
            v1 = (r + 1) / rows - gutter / 2
            charts.append((max(u0, 0.0), max(v0, 0.0), min(u1, 1.0), min(v1, 1.0)))
    return charts


def default_skeleton(texture_size: int = 64) -> Skeleton:
    """Ten-bone humanoid sized for a 96x128 frame.

    Image y grows downward, so the torso points up (world angle -pi/2).
    Bone order doubles as painter's order: legs under arms, arms over torso.
    Charts sit on a 3x4 grid with 2-texel gutters at ``texture_size``.
    """
    charts = atlas_grid(3, 4, gutter=2.0 / texture_size)
    up, down = -math.pi / 2, math.pi / 2
    # name, parent, length, world angle at rest, half width, attach
    layout = [
        ("torso", -1, 24.0, up, 8.0, 1.0),
        ("head", 0, 12.0, up, 6.0, 1.0),
        ("upper_leg_l", 0, 18.0, down + 0.2, 5.0, 0.0),
        ("lower_leg_l", 2, 16.0, down + 0.05, 4.5, 1.0),
        ("upper_leg_r", 0, 18.0, down - 0.2, 5.0, 0.0),
        ("lower_leg_r", 4, 16.0, down - 0.05, 4.5, 1.0),
        ("upper_arm_l", 0, 15.0, down + 0.5, 4.0, 1.0),
        ("lower_arm_l", 6, 13.0, down + 0.2, 3.5, 1.0),
        ("upper_arm_r", 0, 15.0, down - 0.5, 4.0, 1.0),
        ("lower_arm_r", 8, 13.0, down - 0.2, 3.5, 1.0),
    ]
    bones = []
    for k, (name, parent, length, world, hw, attach) in enumerate(layout):
        rest = world - (layout[parent][3] if parent >= 0 else 0.0)
        bones.append(Bone(parent, length, rest, hw, charts[k], attach, name))
    return Skeleton(tuple(bones))


DEFAULT_ROOT = (64.0, 52.0)


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World transform of every bone.

    Returns ``(origins, directions)``, both ``(bones, 2)`` float64: the start
    point of each bone axis and its unit direction. The root starts at
    ``pose.root_position``; any other bone starts at ``attach`` along its
    parent's axis (the parent's endpoint by default). World angle is the sum
    of rest + offset angles along the ancestor chain.
    """
    n = len(skeleton)
    if len(pose.rotations) != n:
        raise ValueError(f"pose has {len(pose.rotations)} rotations for {n} bones")
    origins = np.zeros((n, 2))
    dirs = np.zeros((n, 2))
    angles = np.zeros(n)
    for i, bone in enumerate(skeleton.bones):
        a = bone.rest_angle + pose.rotations[i]
        if bone.parent < 0:
            origins[i] = pose.root_position
        else:
            p = bone.parent
            a += angles[p]
            origins[i] = origins[p] + bone.attach * skeleton.bones[p].rest_length * dirs[p]
        angles[i] = a
        dirs[i] = (math.cos(a), math.sin(a))
    return origins, dirs


def bone_endpoints(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    origins, dirs = forward_kinematics(skeleton, pose)
    lengths = np.array([b.rest_length for b in skeleton.bones])
    return origins + lengths[:, None] * dirs


def generate_pose_sequence(
    skeleton: Skeleton,
    rng: RngState,
    f: int,
    motion_amplitude: float,
    root_position: tuple[float, float] = DEFAULT_ROOT,
    root_jitter: float = 0.0,
    max_cycles: float = 1.0,
) -> PoseSequence:
    """Smooth random motion: every joint swings on its own sinusoid.

    Joint ``j`` follows ``A_j sin(2 pi w_j tau + phi_j)`` over normalized time
    ``tau`` in [0, 1], with ``A_j`` in ``[amplitude/2, amplitude]``, ``w_j`` in
    ``[0.25, max_cycles]`` cycles per clip and a uniform phase. The root
    stays put; ``root_jitter`` offsets it once per sequence.
    """
    if f < 1:
        raise ValueError("f must be >= 1")
    if motion_amplitude < 0:
        raise ValueError("motion_amplitude must be non-negative")
    n = len(skeleton)
    frames = 4 * f + 1
    amp = motion_amplitude * rng.uniform(0.5, 1.0, n)
    freq = rng.uniform(0.25, max_cycles, n)
    phase = rng.uniform(0.0, 2 * math.pi, n)
    jitter = rng.uniform(-1.0, 1.0, 2) * root_jitter
    root = (root_position[0] + jitter[0], root_position[1] + jitter[1])
    tau = np.linspace(0.0, 1.0, frames)
    offsets = amp[None, :] * np.sin(2 * math.pi * freq[None, :] * tau[:, None] + phase[None, :])
    return PoseSequence(tuple(Pose(root, tuple(row)) for row in offsets))


def static_pose_sequence(pose: Pose, f: int) -> PoseSequence:
    return PoseSequence((pose,) * (4 * f + 1))


# ---------------------------------------------------------------------------
# skeleton files
#
#   [bone.0]
#   name = torso
#   parent = -1
#   rest_length = 24.0
#   rest_angle = -1.5707963
#   half_width = 8.0
#   chart = 0.0104, 0.0104, 0.2396, 0.3229
#   attach = 1.0

def save_skeleton(skeleton: Skeleton, path: str | Path) -> None:
    cp = configparser.ConfigParser()
    for i, b in enumerate(skeleton.bones):
        cp[f"bone.{i}"] = {
            "name": b.name,
            "parent": str(b.parent),
            "rest_length": repr(b.rest_length),
            "rest_angle": repr(b.rest_angle),
            "half_width": repr(b.half_width),
            "chart": ", ".join(repr(c) for c in b.chart),
            "attach": repr(b.attach),
        }
    with open(path, "w") as fh:
        cp.write(fh)


def load_skeleton(path: str | Path) -> Skeleton:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    sections = sorted(
        (s for s in cp.sections() if s.startswith("bone.")),
        key=lambda s: int(s.split(".", 1)[1]),
    )
    bones = []
    for s in sections:
        sec = cp[s]
        chart = tuple(float(x) for x in sec["chart"].split(","))
        bones.append(Bone(
            parent=sec.getint("parent"),
            rest_length=sec.getfloat("rest_length"),
            rest_angle=sec.getfloat("rest_angle"),
            half_width=sec.getfloat("half_width"),
            chart=chart,
            attach=sec.getfloat("attach", 1.0),
            name=sec.get("name", ""),
        ))
    return Skeleton(tuple(bones))
