"""Multi-head attention with projective rotary embeddings.

The pipeline for multi-view self-attention follows the view-to-batch idea:
queries are reshaped so every attention call sees a single query view (the
view axis moves from sequence length into batch), keys/values are repeated
per query view, and each head rotates its keys at the coordinates obtained by
lifting the key pixel to that head's depth anchor and projecting it into the
query view. Same-view keys are rotated at their own pixel coordinates exactly
(the cross-view projection degenerates to the identity there).

Rotations are applied to Q and K before a completely standard scaled
dot-product attention, so any RoPE-capable attention kernel could host them;
the from-scratch kernel here exists to make forward and backward fully
checkable. All rotation angles depend only on token coordinates and camera
parameters, never on features, so every rotation is a constant orthonormal
linear map and its backward pass is the transpose rotation.

Behind-camera / near-plane keys keep their epsilon-clamped finite coordinates
by default (no masking, no control flow in the hot path); ``mask_invalid``
optionally forces -inf logits for those (key, head) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, EPS_PROJ, camera_center, project_cross_view_batch, ray_directions
from .rope import AnchorSchedule, RopeConfig, rope_frequencies
from .scene import Scene, patch_centers


@dataclass
class MultiviewLayout:
    """View-major token layout: which view and pixel each token comes from."""

    cameras: list[Camera]
    token_view: np.ndarray
    token_uv: np.ndarray
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.token_view = np.asarray(self.token_view, dtype=np.int64)
        self.token_uv = np.asarray(self.token_uv, dtype=np.float64)
        n = self.n_views
        length = self.token_view.shape[0]
        if self.token_uv.shape != (length, 2):
            raise ValueError(f"token_uv shape {self.token_uv.shape} != ({length}, 2)")
        if length % n != 0:
            raise ValueError(f"sequence length {length} not divisible by n_views {n}")
        lv = length // n
        expected = np.repeat(np.arange(n), lv)
        if not np.array_equal(self.token_view, expected):
            raise ValueError("token order must be view-major with equal tokens per view")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def tokens_per_view(self) -> int:
        return self.token_view.shape[0] // self.n_views

    @property
    def n_tokens(self) -> int:
        return self.token_view.shape[0]

    @classmethod
    def from_scene(cls, scene: Scene) -> "MultiviewLayout":
        grids = scene.patch_grid
        uv = np.concatenate(grids, axis=0)
        views = np.repeat(np.arange(scene.n_views), [len(g) for g in grids])
        return cls(scene.cameras, views, uv, grid_shape=scene.grid_shape)


@dataclass
class HeadAnchorAssignment:
    """Per-head depth anchors: contiguous head groups share one anchor."""

    depths: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 1 or self.depths.size == 0:
            raise ValueError("per-head depths must be a non-empty 1-D array")
        if np.any(np.diff(self.depths) < 0.0):
            raise ValueError("per-head depths must be nondecreasing with head index")

    @property
    def n_heads(self) -> int:
        return self.depths.shape[0]


def assign_anchors(schedule: AnchorSchedule, heads: int) -> HeadAnchorAssignment:
    """Partition ``heads`` into ``schedule.count`` contiguous groups, each
    sharing one anchor depth. Requires ``heads % count == 0``."""
    if heads < 1:
        raise ValueError(f"heads must be >= 1, got {heads}")
    k = schedule.count
    if k > heads or heads % k != 0:
        raise ValueError(f"head count {heads} not divisible into {k} anchor groups")
    return HeadAnchorAssignment(np.repeat(schedule.depths, heads // k))


def _rotate_tokens(x: np.ndarray, coords: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotate per-token features (vectorized form of the rope kernels).

    x: (B, L, H, C). coords: (L, n_blocks) for head-uniform positions or
    (L, H, n_blocks) for per-head positions; block i of the channels rotates
    at coords[..., i].
    """
    b, length, h, c = x.shape
    n_blocks = coords.shape[-1]
    if c % (2 * n_blocks) != 0:
        raise ValueError(f"per-head dim {c} not divisible by {2 * n_blocks}")
    block = c // n_blocks
    half = block // 2
    freqs = rope_frequencies(cfg, block)
    if coords.ndim == 2:
        coords = coords[:, None, :]
    angles = (cfg.coord_scale * coords)[..., None] * freqs      # (L, H|1, nb, half)
    cos = np.cos(angles)[None].astype(x.dtype, copy=False)
    sin = np.sin(angles)[None].astype(x.dtype, copy=False)
    xr = x.reshape(b, length, h, n_blocks, half, 2)
    x0, x1 = xr[..., 0], xr[..., 1]
    out = np.empty_like(xr)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(b, length, h, c)


def _query_coords(layout: MultiviewLayout, query_view: int) -> np.ndarray:
    if not 0 <= query_view < layout.n_views:
        raise ValueError(f"query_view {query_view} out of range for {layout.n_views} views")
    return layout.token_uv[layout.token_view == query_view]


def encode_query_rope(q: np.ndarray, layout: MultiviewLayout, query_view: int,
                      cfg: RopeConfig) -> np.ndarray:
    """Rotate query tokens at their own pixel coordinates (head-uniform)."""
    coords = _query_coords(layout, query_view)
    if q.shape[1] != coords.shape[0]:
        raise ValueError(
            f"mixed-view query batch: got {q.shape[1]} tokens, view {query_view} "
            f"has {coords.shape[0]}; route multiview tensors through multiview_self_attention"
        )
    return _rotate_tokens(q, coords, cfg)


def key_rope_coords(layout: MultiviewLayout, query_view: int,
                    assignment: HeadAnchorAssignment, eps: float = EPS_PROJ):
    """Per-(token, head) image-plane coordinates in the query view.

    Same-view tokens keep (u, v) exactly; tokens from other views are lifted
    to each head's depth anchor and projected. Returns ``(coords, valid)`` of
    shapes (L, H, 2) and (L, H).
    """
    n_heads = assignment.n_heads
    length = layout.n_tokens
    if not 0 <= query_view < layout.n_views:
        raise ValueError(f"query_view {query_view} out of range for {layout.n_views} views")
    dst = layout.cameras[query_view]
    coords = np.empty((length, n_heads, 2))
    valid = np.ones((length, n_heads), dtype=bool)
    for view in range(layout.n_views):
        sel = layout.token_view == view
        uv = layout.token_uv[sel]
        if view == query_view:
            coords[sel] = uv[:, None, :]
            continue
        # anchors repeat across grouped heads; project each unique depth once
        depths, inverse = np.unique(assignment.depths, return_inverse=True)
        uv_proj, _, ok = project_cross_view_batch(layout.cameras[view], dst, uv, depths, eps)
        coords[sel] = uv_proj[:, inverse, :]
        valid[sel] = ok[:, inverse]
    return coords, valid


def encode_key_rope(k: np.ndarray, layout: MultiviewLayout, query_view: int,
                    assignment: HeadAnchorAssignment, cfg: RopeConfig,
                    eps: float = EPS_PROJ) -> np.ndarray:
    """Rotate key tokens per head at their projected coordinates in the query view."""
    if k.shape[1] != layout.n_tokens:
        raise ValueError(f"key length {k.shape[1]} != layout tokens {layout.n_tokens}")
    if k.shape[2] != assignment.n_heads:
        raise ValueError(f"key heads {k.shape[2]} != assignment heads {assignment.n_heads}")
    coords, _ = key_rope_coords(layout, query_view, assignment, eps)
    return _rotate_tokens(k, coords, cfg)


def _check_finite(name: str, arr: np.ndarray):
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")


def sdpa_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                 scale: float | None = None, mask: np.ndarray | None = None):
    """Scaled dot-product attention over (B, L, H, C) tensors.

    Returns ``(out, weights)`` with weights of shape (B, H, Lq, Lk). ``mask``
    (broadcastable to the weights shape) marks allowed pairs; fully masked
    rows produce zero output rather than NaN.
    """
    for name, arr in (("q", q), ("k", k), ("v", v)):
        _check_finite(name, arr)
    if q.shape[0] != k.shape[0] or q.shape[2:] != k.shape[2:] or k.shape != v.shape:
        raise ValueError(f"inconsistent attention shapes {q.shape}, {k.shape}, {v.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("bqhc,bkhc->bhqk", q, k) * scale
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    finite_row = np.isfinite(row_max)
    shifted = np.where(finite_row, scores - np.where(finite_row, row_max, 0.0), -np.inf)
    weights = np.exp(shifted)
    denom = weights.sum(axis=-1, keepdims=True)
    weights = np.where(denom > 0.0, weights / np.where(denom > 0.0, denom, 1.0), 0.0)
    out = np.einsum("bhqk,bkhc->bqhc", weights, v)
    return out.astype(q.dtype, copy=False), weights


def sdpa_backward(q: np.ndarray, k: np.ndarray, v: np.ndarray, d_out: np.ndarray,
                  scale: float | None = None, mask: np.ndarray | None = None):
    """Analytic gradients of :func:`sdpa_forward` w.r.t. q, k, v."""
    if d_out.shape != q.shape:
        raise ValueError(f"d_out shape {d_out.shape} != q shape {q.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    _, weights = sdpa_forward(q, k, v, scale, mask)
    dv = np.einsum("bhqk,bqhc->bkhc", weights, d_out)
    d_weights = np.einsum("bqhc,bkhc->bhqk", d_out, v)
    # softmax Jacobian: dS = P * (dP - sum_k dP*P)
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
    dq = np.einsum("bhqk,bkhc->bqhc", d_scores, k) * scale
    dk = np.einsum("bhqk,bqhc->bkhc", d_scores, q) * scale
    return dq, dk, dv


def _negate(coords: np.ndarray) -> np.ndarray:
    return -coords


def multiview_self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                             layout: MultiviewLayout,
                             assignment: HeadAnchorAssignment,
                             cfg: RopeConfig,
                             *,
                             scale: float | None = None,
                             eps: float = EPS_PROJ,
                             mask_invalid: bool = False,
                             rotate_vo: bool = False,
                             return_weights: bool = False):
    """Self-attention over a multi-view token sequence, (B, L, H, C) in and out.

    Implements the view-to-batch schedule: query view j corresponds to
    pseudo-batch entries ``b * n_views + j``, each attending over the full
    key/value sequence with view-j rotations. Output token order matches the
    input. With ``return_weights`` the per-view weights are stacked into
    (B, N, H, L_v, L).
    """
    b, length, h, c = q.shape
    if k.shape != (b, length, h, c) or v.shape != (b, length, h, c):
        raise ValueError(f"q/k/v shapes must match for self-attention, got {q.shape}, {k.shape}, {v.shape}")
    if length != layout.n_tokens:
        raise ValueError(f"sequence length {length} != layout tokens {layout.n_tokens}")
    if h != assignment.n_heads:
        raise ValueError(f"heads {h} != assignment heads {assignment.n_heads}")
    n, lv = layout.n_views, layout.tokens_per_view
    if scale is None:
        scale = 1.0 / np.sqrt(c)

    out = np.empty_like(q)
    all_weights = np.empty((b, n, h, lv, length), dtype=np.float64) if return_weights else None
    for j in range(n):
        sel = slice(j * lv, (j + 1) * lv)
        q_coords = _query_coords(layout, j)
        k_coords, k_valid = key_rope_coords(layout, j, assignment, eps)
        qj = _rotate_tokens(q[:, sel], q_coords, cfg)
        kj = _rotate_tokens(k, k_coords, cfg)
        vj = _rotate_tokens(v, k_coords, cfg) if rotate_vo else v
        mask = None
        if mask_invalid:
            mask = k_valid.T[None, :, None, :]        # (1, H, 1, L)
        oj, wj = sdpa_forward(qj, kj, vj, scale, mask)
        if rotate_vo:
            oj = _rotate_tokens(oj, _negate(q_coords), cfg)
        out[:, sel] = oj
        if return_weights:
            all_weights[:, j] = wj
    if return_weights:
        return out, all_weights
    return out


def multiview_self_attention_grad(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                                  layout: MultiviewLayout,
                                  assignment: HeadAnchorAssignment,
                                  cfg: RopeConfig,
                                  d_out: np.ndarray,
                                  *,
                                  scale: float | None = None,
                                  eps: float = EPS_PROJ,
                                  mask_invalid: bool = False,
                                  rotate_vo: bool = False):
    """Analytic gradients of :func:`multiview_self_attention` w.r.t. q, k, v.

    Rotation coordinates are constants, so each rotation backpropagates as the
    rotation at the negated position; key/value gradients accumulate over the
    per-view replicas.
    """
    b, length, h, c = q.shape
    if d_out.shape != q.shape:
        raise ValueError(f"d_out shape {d_out.shape} != q shape {q.shape}")
    n, lv = layout.n_views, layout.tokens_per_view
    if scale is None:
        scale = 1.0 / np.sqrt(c)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for j in range(n):
        sel = slice(j * lv, (j + 1) * lv)
        q_coords = _query_coords(layout, j)
        k_coords, k_valid = key_rope_coords(layout, j, assignment, eps)
        qj = _rotate_tokens(q[:, sel], q_coords, cfg)
        kj = _rotate_tokens(k, k_coords, cfg)
        vj = _rotate_tokens(v, k_coords, cfg) if rotate_vo else v
        mask = k_valid.T[None, :, None, :] if mask_invalid else None
        d_oj = d_out[:, sel]
        if rotate_vo:
            d_oj = _rotate_tokens(d_oj, q_coords, cfg)
        dqj, dkj, dvj = sdpa_backward(qj, kj, vj, d_oj, scale, mask)
        dq[:, sel] = _rotate_tokens(dqj, _negate(q_coords), cfg)
        dk += _rotate_tokens(dkj, _negate(k_coords), cfg)
        dv += _rotate_tokens(dvj, _negate(k_coords), cfg) if rotate_vo else dvj
    return dq, dk, dv


def lifted_key_points(layout: MultiviewLayout, assignment: HeadAnchorAssignment) -> np.ndarray:
    """World points ``origin + d_h * direction`` per (token, head), shape (L, H, 3)."""
    length, n_heads = layout.n_tokens, assignment.n_heads
    points = np.empty((length, n_heads, 3))
    for view in range(layout.n_views):
        sel = layout.token_view == view
        cam = layout.cameras[view]
        dirs = ray_directions(cam, layout.token_uv[sel])
        origin = camera_center(cam)
        points[sel] = origin[None, None, :] + assignment.depths[None, :, None] * dirs[:, None, :]
    return points


def encode_query_rope_3d(q: np.ndarray, positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotate 3D-located query tokens at their (x, y, z), head-uniform."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (q.shape[1], 3):
        raise ValueError(f"positions shape {positions.shape} != ({q.shape[1]}, 3)")
    return _rotate_tokens(q, positions, cfg)


def encode_key_rope_3d(k: np.ndarray, layout: MultiviewLayout,
                       assignment: HeadAnchorAssignment, cfg: RopeConfig) -> np.ndarray:
    """Rotate image keys per head at their lifted world points (no projection)."""
    if k.shape[1] != layout.n_tokens or k.shape[2] != assignment.n_heads:
        raise ValueError(f"key shape {k.shape} inconsistent with layout/assignment")
    return _rotate_tokens(k, lifted_key_points(layout, assignment), cfg)


def cross_attention_2d3d(q: np.ndarray, q_positions: np.ndarray,
                         k: np.ndarray, v: np.ndarray,
                         layout: MultiviewLayout,
                         assignment: HeadAnchorAssignment,
                         cfg: RopeConfig,
                         *,
                         scale: float | None = None,
                         return_weights: bool = False):
    """Cross-attention from 3D-located queries to multi-view image keys.

    Instead of projecting into an image plane, relative positions are measured
    in 3D between the query point and each key's lifted anchor point; per-head
    channels split into three axis blocks (C divisible by 6).
    """
    if k.shape != v.shape:
        raise ValueError(f"k/v shapes must match, got {k.shape}, {v.shape}")
    q_enc = encode_query_rope_3d(q, q_positions, cfg)
    k_enc = encode_key_rope_3d(k, layout, assignment, cfg)
    out, weights = sdpa_forward(q_enc, k_enc, v, scale)
    if return_weights:
        return out, weights
    return out


def flop_estimate(b: int, n: int, l_v: int, h: int, c: int) -> int:
    """Multiply-accumulate count (x2 flops) of the view-batched pipeline.

    QK and AV stages over the (B*N) pseudo-batch:
    ``2 * B*N * H * L_v * L * C * 2`` with ``L = N * L_v``, which equals the
    standard attention count ``4 * B * H * L^2 * C`` identically.
    """
    for name, val in (("b", b), ("n", n), ("l_v", l_v), ("h", h), ("c", c)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    length = n * l_v
    return 2 * b * n * h * l_v * length * c * 2
