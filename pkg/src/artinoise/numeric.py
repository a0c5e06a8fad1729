"""Seeded randomness, the ANWT tensor format and gradient plumbing.

Arrays are plain ``numpy.ndarray`` (float32) everywhere outside the
differentiable training path, which uses ``torch`` tensors.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from pathlib import Path
from typing import BinaryIO, Callable, Mapping

import numpy as np
import torch

__all__ = [
    "RngState",
    "seed_rng",
    "sample_standard_normal",
    "GradTape",
    "TapeError",
    "backward",
    "finite_difference_grad",
    "max_relative_error",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
    "TensorFormatError",
]

_MASK64 = (1 << 64) - 1


def _name_key(name: str | int) -> int:
    if isinstance(name, int):
        return name & _MASK64
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngState:
    """Counter-based (Philox) generator with named, independent sub-streams.

    Two states built from the same seed and stream path produce identical
    output bit-for-bit.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed > _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, name: str | int) -> "RngState":
        """Derive an independent child stream. Does not advance ``self``."""
        return RngState(self.seed, self.path + (_name_key(name),))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size)

    def standard_normal(self, shape) -> np.ndarray:
        return sample_standard_normal(self, shape)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"


def seed_rng(seed: int) -> RngState:
    return RngState(seed)


def sample_standard_normal(rng: RngState, shape) -> np.ndarray:
    """I.i.d. N(0, 1) float32 variates via the Box-Muller transform."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative axis in shape {shape}")
    n = math.prod(shape)
    if n == 0:
        return np.zeros(shape, dtype=np.float32)
    half = (n + 1) // 2
    u = rng._gen.random((2, half))
    # 1 - u lies in (0, 1], keeping log finite
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))
    theta = 2.0 * np.pi * u[1]
    out = np.empty(2 * half, dtype=np.float64)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n].astype(np.float32).reshape(shape)


# ---------------------------------------------------------------------------
# gradients


class TapeError(RuntimeError):
    pass


class GradTape:
    """Named parameter set whose adjoints are collected by :func:`backward`.

    Recording is done by torch autograd; the tape only pins which leaves
    count as parameters and checks that a loss actually depends on them.
    """

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self.params = dict(params)
        for name, p in self.params.items():
            if not p.requires_grad:
                raise TapeError(f"parameter {name!r} does not require grad")

    @classmethod
    def from_modules(cls, **modules: torch.nn.Module) -> "GradTape":
        params = {}
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                params[f"{prefix}.{name}"] = p
        return cls(params)

    def backward(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        return backward(self, loss)


def backward(tape: GradTape, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Adjoint of scalar ``loss`` for every parameter on ``tape``.

    Parameters the loss does not depend on get zero adjoints.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise TapeError("loss must be a scalar tensor")
    if loss.grad_fn is None and not loss.requires_grad:
        raise TapeError("loss was not recorded on the tape")
    names = list(tape.params)
    tensors = [tape.params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    if all(g is None for g in grads):
        raise TapeError("loss does not depend on any tape parameter")
    return {
        n: (torch.zeros_like(p) if g is None else g)
        for n, p, g in zip(names, tensors, grads)
    }


def finite_difference_grad(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-3,
) -> dict[str, torch.Tensor]:
    """Central finite differences of ``fn()`` w.r.t. each entry of ``params``.

    ``params`` are perturbed in place and restored.
    """
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = torch.zeros(flat.numel(), dtype=torch.float64)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                hi = fn().item()
                flat[k] = orig - step
                lo = fn().item()
                flat[k] = orig
                g[k] = (hi - lo) / (2.0 * step)
            out[name] = g.view(p.shape)
    return out


def max_relative_error(
    analytic: Mapping[str, torch.Tensor],
    numeric: Mapping[str, torch.Tensor],
    floor: float = 1e-7,
) -> tuple[float, str]:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` and where it occurs."""
    worst, where = 0.0, ""
    for name, a in analytic.items():
        a = a.detach().to(torch.float64)
        n = numeric[name].to(torch.float64)
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
        rel = ((a - n).abs() / denom).max().item() if a.numel() else 0.0
        if rel > worst:
            worst, where = rel, name
    return worst, where


# ---------------------------------------------------------------------------
# ANWT tensor files
#
#   magic  b"ANWT"
#   u32    format version (1)
#   u32    rank
#   u64    shape[rank]
#   f32    data, little-endian, row-major

MAGIC = b"ANWT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise TensorFormatError(f"unsupported ANWT version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = math.prod(shape)
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError("truncated ANWT stream")
    return buf


def save_tensor(path: str | Path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
