"""Rotary embedding kernels and depth-anchor schedules.

A rotary embedding splits a feature vector into 2-channel planes and rotates
plane ``m`` by ``position * base**(-2m / block_dim)``. Dot products between
rotated vectors then depend only on position differences, which is the whole
point: the attention score carries a relative-position bias with no learned
parameters.

Channel layout commitment (wire format): rotation planes are the adjacent
channel pairs ``(2m, 2m+1)``; multi-axis variants split the per-head channels
into contiguous equal blocks, one per axis, first axis first. Frequency base
defaults to 100.0: positions here are pixels, so a smaller base than the
classic 10000 used for token indices keeps the slowest wavelength comparable
to an image width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ANCHOR_KINDS = ("uniform", "log_uniform", "lid")


@dataclass(frozen=True)
class RopeConfig:
    """Per-head rotary configuration.

    ``per_head_dim`` must be even; 2D/3D/6D rotation additionally require it
    to be divisible by 4/6/12 (checked at call time). ``coord_scale``
    multiplies every position before the angle computation; coordinates are
    raw pixels by default so intrinsics differences stay visible.
    """

    per_head_dim: int
    base: float = 100.0
    coord_scale: float = 1.0

    def __post_init__(self):
        c = self.per_head_dim
        if c <= 0 or c % 2 != 0:
            raise ValueError(f"per_head_dim must be a positive even integer, got {c}")
        if not self.base > 1.0:
            raise ValueError(f"base must be > 1, got {self.base}")
        if not (np.isfinite(self.coord_scale) and self.coord_scale > 0.0):
            raise ValueError(f"coord_scale must be positive and finite, got {self.coord_scale}")


def rope_frequencies(cfg: RopeConfig, block_dim: int) -> np.ndarray:
    """Geometric frequency ladder ``base**(-2m/block_dim)``, m = 0..block_dim/2 - 1."""
    if block_dim <= 0 or block_dim % 2 != 0:
        raise ValueError(f"block_dim must be a positive even integer, got {block_dim}")
    if block_dim > cfg.per_head_dim:
        raise ValueError(f"block_dim {block_dim} exceeds per_head_dim {cfg.per_head_dim}")
    m = np.arange(block_dim // 2, dtype=np.float64)
    return cfg.base ** (-2.0 * m / block_dim)


def rope_rotate_1d(x: np.ndarray, position: float, freqs) -> np.ndarray:
    """Rotate channel pairs (2m, 2m+1) of ``x`` by ``position * freqs[m]``."""
    x = np.asarray(x, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    if x.shape[-1] != 2 * freqs.shape[-1]:
        raise ValueError(
            f"dimension mismatch: vector dim {x.shape[-1]} vs 2*{freqs.shape[-1]} frequencies"
        )
    angles = position * freqs
    cos, sin = np.cos(angles), np.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _rotate_blocks(x: np.ndarray, positions, cfg: RopeConfig, mode: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n_blocks = positions.shape[-1]
    c = cfg.per_head_dim
    if x.shape[-1] != c:
        raise ValueError(f"vector dim {x.shape[-1]} does not match per_head_dim {c}")
    if c % (2 * n_blocks) != 0:
        raise ValueError(f"{mode} rotation needs per_head_dim divisible by {2 * n_blocks}, got {c}")
    block = c // n_blocks
    freqs = rope_frequencies(cfg, block)
    out = np.empty_like(x)
    for i in range(n_blocks):
        sl = slice(i * block, (i + 1) * block)
        out[..., sl] = rope_rotate_1d(x[..., sl], positions[i] * cfg.coord_scale, freqs)
    return out


def rope_rotate_2d(x: np.ndarray, u: float, v: float, cfg: RopeConfig) -> np.ndarray:
    """Image-plane rotation: first half of the channels at position ``u``,
    second half at ``v``, each with its own ladder of block_dim C/2."""
    return _rotate_blocks(x, (u, v), cfg, "2D")


def rope_rotate_3d(x: np.ndarray, p, cfg: RopeConfig) -> np.ndarray:
    """Three equal channel blocks rotated at positions x, y, z."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"p must be a 3-vector, got shape {p.shape}")
    return _rotate_blocks(x, p, cfg, "3D")


def rope_rotate_6d(x: np.ndarray, ray6, cfg: RopeConfig) -> np.ndarray:
    """Six equal channel blocks rotated at (origin, direction) components."""
    ray6 = np.asarray(ray6, dtype=np.float64)
    if ray6.shape != (6,):
        raise ValueError(f"ray6 must be a 6-vector (origin, direction), got shape {ray6.shape}")
    return _rotate_blocks(x, ray6, cfg, "6D")


@dataclass(frozen=True)
class AnchorSchedule:
    """Ordered depth anchors in ``[d_min, d_max]``.

    For ``count >= 2`` the endpoints are hit exactly; ``count == 1`` yields the
    single midpoint depth ``(d_min + d_max) / 2`` regardless of kind.
    """

    kind: str
    d_min: float
    d_max: float
    count: int
    depths: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.depths
        if d.shape != (self.count,):
            raise ValueError(f"depths shape {d.shape} does not match count {self.count}")
        if np.any(np.diff(d) <= 0.0):
            raise ValueError(f"anchor depths must be strictly increasing, got {d.tolist()}")


def make_anchor_schedule(kind: str, d_min: float, d_max: float, count: int) -> AnchorSchedule:
    """Build a depth-anchor schedule.

    * ``uniform``: evenly spaced, endpoints included.
    * ``log_uniform``: evenly spaced in log depth, endpoints included.
    * ``lid``: ``d_min + (d_max - d_min) * h*(h+1) / (K*(K-1))`` for
      h = 0..K-1, so consecutive gaps grow linearly with h (linear-increasing
      discretization) and the endpoints are hit exactly.
    """
    if kind not in ANCHOR_KINDS:
        raise ValueError(f"unknown anchor kind {kind!r}; expected one of {ANCHOR_KINDS}")
    if not (0.0 < d_min < d_max):
        raise ValueError(f"invalid depth range: need 0 < d_min < d_max, got [{d_min}, {d_max}]")
    if count < 1:
        raise ValueError(f"anchor count must be >= 1, got {count}")

    if count == 1:
        depths = np.array([(d_min + d_max) / 2.0])
    elif kind == "uniform":
        depths = np.linspace(d_min, d_max, count)
    elif kind == "log_uniform":
        depths = np.exp(np.linspace(math.log(d_min), math.log(d_max), count))
    else:
        h = np.arange(count, dtype=np.float64)
        depths = d_min + (d_max - d_min) * h * (h + 1.0) / (count * (count - 1.0))
    if count >= 2:
        # exact endpoint coverage regardless of rounding in the interior
        depths[0] = d_min
        depths[-1] = d_max
    return AnchorSchedule(kind, float(d_min), float(d_max), int(count), depths)
