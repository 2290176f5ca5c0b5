"""2D sinusoidal encoding of normalized patch coordinates.

Each half of the output vector encodes one axis as interleaved (sin, cos)
pairs over a geometric ladder of frequencies, the same construction used for
1D sequence positions but applied to x and y separately. Because sin and cos
of a pair share their argument, the raw vector always has norm
sqrt(dim / 2); the encoder divides it out so encodings live on the unit
sphere regardless of dim or base.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import NormalizedCoords

__all__ = ["PosEncConfig", "encode", "encode_batch"]


@dataclass(frozen=True)
class PosEncConfig:
    """Encoder parameters. ``dim`` must be a multiple of 4 (two axes, paired slots)."""

    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim < 4 or self.dim % 4 != 0:
            raise ValueError(f"dim must be a positive multiple of 4, got {self.dim}")
        if not self.base > 1.0:
            raise ValueError(f"base must be greater than 1, got {self.base}")


def encode_batch(cfg: PosEncConfig, coords: np.ndarray) -> np.ndarray:
    """Encode ``(n, 2)`` coordinates into ``(n, dim)`` unit-norm vectors.

    For axis value t and pair index m in [0, dim/4), the raw components are
    ``sin(t / base^(2m/H))`` and ``cos(t / base^(2m/H))`` with ``H = dim/2``.
    The x pairs fill the first half of the vector, the y pairs the second.

    Args:
        cfg: Encoder parameters.
        coords: Array of (x, y) pairs, each in [0, 1].

    Returns:
        Read-only float64 array of unit-norm encodings.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"coords must have shape (n, 2), got {pts.shape}")
    if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")
    half = cfg.dim // 2
    m = np.arange(half // 2, dtype=np.float64)
    inv_freq = cfg.base ** (-2.0 * m / half)
    out = np.empty((pts.shape[0], cfg.dim), dtype=np.float64)
    for axis, start in ((0, 0), (1, half)):
        args = pts[:, axis : axis + 1] * inv_freq
        out[:, start : start + half : 2] = np.sin(args)
        out[:, start + 1 : start + half : 2] = np.cos(args)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out.setflags(write=False)
    return out


def encode(cfg: PosEncConfig, c: NormalizedCoords) -> np.ndarray:
    """Encode a single point; see :func:`encode_batch`."""
    return encode_batch(cfg, np.array([[c.x, c.y]]))[0]
