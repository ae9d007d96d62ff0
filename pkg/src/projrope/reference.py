"""Brute-force reference implementations.

Everything here trades speed for obviousness: explicit loops, scalar rope
rotations, per-pair projections, no reshape tricks. These are the oracles the
fast paths are tested against; keep them boring.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import HeadAnchorAssignment, MultiviewLayout, lifted_key_points
from .geometry import EPS_PROJ, project_cross_view
from .rope import RopeConfig, rope_rotate_2d, rope_rotate_3d


def softmax_1d(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def sdpa_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                   scale: float | None = None) -> np.ndarray:
    """Triple-loop scaled dot-product attention over (B, L, H, C) tensors."""
    b, lq, h, c = q.shape
    lk = k.shape[1]
    if scale is None:
        scale = 1.0 / math.sqrt(c)
    out = np.zeros((b, lq, h, c))
    for bi in range(b):
        for hi in range(h):
            for qi in range(lq):
                scores = np.array([
                    float(np.dot(q[bi, qi, hi], k[bi, ki, hi])) * scale
                    for ki in range(lk)
                ])
                weights = softmax_1d(scores)
                for ki in range(lk):
                    out[bi, qi, hi] += weights[ki] * v[bi, ki, hi]
    return out


def pairwise_multiview_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                                 layout: MultiviewLayout,
                                 assignment: HeadAnchorAssignment,
                                 cfg: RopeConfig,
                                 *,
                                 eps: float = EPS_PROJ,
                                 rotate_vo: bool = False) -> np.ndarray:
    """Reshape-free multi-view self-attention.

    Each (query, key, head) pair gets its own rotation: the key rotation
    depends on (query view, key token, head) and is computed with the scalar
    geometry and rope paths. No view-to-batch rearrangement anywhere.
    """
    b, length, h, c = q.shape
    n = layout.n_views
    scale = 1.0 / math.sqrt(c)
    depths = assignment.depths

    # rotated keys/values per query view, built token by token
    k_rot = np.empty((n, b, length, h, c))
    v_rot = np.empty_like(k_rot) if rotate_vo else None
    for j in range(n):
        for t in range(length):
            view = int(layout.token_view[t])
            u, v_pix = layout.token_uv[t]
            for hi in range(h):
                if view == j:
                    pos = (float(u), float(v_pix))
                else:
                    proj = project_cross_view(layout.cameras[view], layout.cameras[j],
                                              float(u), float(v_pix), [depths[hi]], eps)[0]
                    pos = (proj.u, proj.v)
                for bi in range(b):
                    k_rot[j, bi, t, hi] = rope_rotate_2d(k[bi, t, hi], pos[0], pos[1], cfg)
                    if rotate_vo:
                        v_rot[j, bi, t, hi] = rope_rotate_2d(v[bi, t, hi], pos[0], pos[1], cfg)

    out = np.zeros_like(q, dtype=np.float64)
    for bi in range(b):
        for t in range(length):
            j = int(layout.token_view[t])
            uq, vq = layout.token_uv[t]
            for hi in range(h):
                q_rot = rope_rotate_2d(q[bi, t, hi], float(uq), float(vq), cfg)
                scores = np.array([
                    float(np.dot(q_rot, k_rot[j, bi, ki, hi])) * scale
                    for ki in range(length)
                ])
                weights = softmax_1d(scores)
                values = v_rot[j, bi] if rotate_vo else v[bi]
                acc = np.zeros(c)
                for ki in range(length):
                    acc += weights[ki] * values[ki, hi]
                if rotate_vo:
                    acc = rope_rotate_2d(acc, -float(uq), -float(vq), cfg)
                out[bi, t, hi] = acc
    return out


def pairwise_cross_attention_3d(q: np.ndarray, q_positions: np.ndarray,
                                k: np.ndarray, v: np.ndarray,
                                layout: MultiviewLayout,
                                assignment: HeadAnchorAssignment,
                                cfg: RopeConfig) -> np.ndarray:
    """Per-pair 3D-rope cross-attention oracle."""
    b, lq, h, c = q.shape
    lk = k.shape[1]
    scale = 1.0 / math.sqrt(c)
    anchors = lifted_key_points(layout, assignment)       # (L, H, 3)
    out = np.zeros_like(q, dtype=np.float64)
    for bi in range(b):
        for qi in range(lq):
            for hi in range(h):
                q_rot = rope_rotate_3d(q[bi, qi, hi], q_positions[qi], cfg)
                scores = np.array([
                    float(np.dot(q_rot, rope_rotate_3d(k[bi, ki, hi], anchors[ki, hi], cfg))) * scale
                    for ki in range(lk)
                ])
                weights = softmax_1d(scores)
                for ki in range(lk):
                    out[bi, qi, hi] += weights[ki] * v[bi, ki, hi]
    return out


def central_difference_grads(f, arrays: list[np.ndarray], step: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for idx, arr in enumerate(arrays):
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = grad.ravel()
        base = [a.copy() for a in arrays]
        for i in range(arr.size):
            for sign in (+1.0, -1.0):
                perturbed = base[idx].copy()
                perturbed.ravel()[i] += sign * step
                args = list(base)
                args[idx] = perturbed
                flat[i] += sign * f(*args)
        flat /= 2.0 * step
        grads.append(grad)
    return grads
