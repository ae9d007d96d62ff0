"""Pinhole cameras, rays, depth lifting, and cross-view projection.

Conventions used throughout the package:

* World and camera frames are right-handed. Extrinsics map world to camera
  coordinates: ``x_cam = R @ x_world + t``. The camera center in world
  coordinates is therefore ``-R.T @ t``.
* ``(u, v)`` are continuous pixel coordinates, principal point given by the
  intrinsics. Patch tokens use patch-center coordinates (see
  :mod:`projrope.scene`). No clamping to image bounds anywhere: coordinates
  outside the frame carry real geometric signal.
* Ray directions are NOT normalized. ``pixel_ray`` returns exactly
  ``R.T @ K^-1 @ [u, v, 1]``, so a depth value scales that vector as-is.
  Normalizing would silently change what a "depth anchor" means.
* Projection near the camera plane never raises. A sign-preserving epsilon
  clamp on the projective denominator keeps every output finite; a ``valid``
  flag records whether the clamp fired. Attention downstream must stay total.

Lens distortion and rolling shutter are out of scope; intrinsics are assumed
upper-triangular (zero skew in all defaults, but a skew entry is accepted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tolerance for rotation orthonormality checks (elementwise on R^T R - I and
# on |det - 1|).
ROTATION_TOL = 1e-9

# Default projective-denominator epsilon, in scene length units.
EPS_PROJ = 1e-6


def _as_matrix(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_rotation(rotation: np.ndarray, name: str) -> np.ndarray:
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > ROTATION_TOL:
        raise ValueError(
            f"{name} is not orthonormal: max|R^T R - I| = {err:.3e} > {ROTATION_TOL:.0e}"
        )
    det = np.linalg.det(rotation)
    if abs(det - 1.0) > ROTATION_TOL:
        raise ValueError(f"{name} must have determinant +1, got {det!r}")
    return rotation


@dataclass
class Camera:
    """Validated pinhole camera: intrinsics, world-to-camera pose, image size."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        self.intrinsics = _as_matrix(self.intrinsics, (3, 3), "intrinsics")
        self.rotation = _check_rotation(_as_matrix(self.rotation, (3, 3), "rotation"), "rotation")
        self.translation = _as_matrix(self.translation, (3,), "translation")
        k = self.intrinsics
        if k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0:
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError(f"non-positive focal length: fx={k[0, 0]!r}, fy={k[1, 1]!r}")
        if k[2, 2] != 1.0:
            raise ValueError(f"intrinsics[2][2] must be 1, got {k[2, 2]!r}")
        w, h = self.image_size
        if int(w) != w or int(h) != h or w < 1 or h < 1:
            raise ValueError(f"degenerate image size {self.image_size}")
        self.image_size = (int(w), int(h))

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def skew(self) -> float:
        return float(self.intrinsics[0, 1])

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]


@dataclass
class Ray:
    """World-frame ray: origin plus unnormalized direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = _as_matrix(self.origin, (3,), "origin")
        self.direction = _as_matrix(self.direction, (3,), "direction")


@dataclass
class ProjectedPixel:
    """Result of projecting one 3D point into a camera.

    ``w_tilde`` is the raw projective denominator before clamping; the
    returned ``(u, v)`` were divided by the sign-preserving clamped value.
    ``valid`` is False when the clamp fired (|w_tilde| < epsilon).
    """

    u: float
    v: float
    w_tilde: float
    valid: bool


@dataclass
class RigidTransform:
    """Rigid motion of world space: ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = _check_rotation(_as_matrix(self.rotation, (3, 3), "rotation"), "rotation")
        self.translation = _as_matrix(self.translation, (3,), "translation")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def make_camera(intrinsics, rotation, translation, image_size) -> Camera:
    """Construct a validated :class:`Camera`; raises on any violated invariant."""
    return Camera(intrinsics, rotation, translation, tuple(image_size))


def camera_center(cam: Camera) -> np.ndarray:
    """Camera center in world coordinates, ``-R.T @ t``."""
    return -cam.rotation.T @ cam.translation


def ray_directions(cam: Camera, uv: np.ndarray) -> np.ndarray:
    """Unnormalized world-frame ray directions for pixels ``uv`` of shape (n, 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    ones = np.ones(uv.shape[:-1] + (1,))
    pix = np.concatenate([uv, ones], axis=-1)
    # direction_i = R^T K^-1 pix_i, done row-wise
    kinv_pix = np.linalg.solve(cam.intrinsics, pix[..., None])[..., 0]
    return kinv_pix @ cam.rotation


def pixel_ray(cam: Camera, u: float, v: float) -> Ray:
    """Camera ray through pixel ``(u, v)``: origin at the camera center,
    direction ``R.T @ K^-1 @ [u, v, 1]`` (not normalized)."""
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError(f"pixel coordinates must be finite, got ({u}, {v})")
    direction = ray_directions(cam, np.array([[u, v]]))[0]
    return Ray(camera_center(cam), direction)


def _check_depths(depths) -> np.ndarray:
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim != 1 or depths.size == 0:
        raise ValueError("depths must be a non-empty 1-D sequence")
    if np.any(depths <= 0.0):
        raise ValueError(f"depths must be strictly positive, got {depths.tolist()}")
    if depths.size > 1 and np.any(np.diff(depths) <= 0.0):
        raise ValueError(f"depths must be strictly increasing, got {depths.tolist()}")
    return depths


def lift_along_ray(ray: Ray, depths) -> np.ndarray:
    """3D points ``origin + d * direction`` for each depth, shape (len(depths), 3)."""
    depths = _check_depths(depths)
    return ray.origin[None, :] + depths[:, None] * ray.direction[None, :]


def project_points(cam: Camera, points: np.ndarray, eps: float = EPS_PROJ):
    """Vectorized pinhole projection of ``points`` with shape (..., 3).

    Returns ``(uv, w_tilde, valid)`` where ``uv`` has shape (..., 2). The
    division uses a sign-preserving clamp ``sign(w) * max(|w|, eps)`` so the
    output is finite everywhere; ``valid`` marks where |w| >= eps. A zero
    denominator is treated as +eps.
    """
    points = np.asarray(points, dtype=np.float64)
    cam_pts = points @ cam.rotation.T + cam.translation
    uvw = cam_pts @ cam.intrinsics.T
    w = uvw[..., 2]
    sign = np.where(w < 0.0, -1.0, 1.0)
    w_clamped = sign * np.maximum(np.abs(w), eps)
    uv = uvw[..., :2] / w_clamped[..., None]
    valid = np.abs(w) >= eps
    return uv, w, valid


def project_point(cam: Camera, point, eps: float = EPS_PROJ) -> ProjectedPixel:
    """Project one world point; near-plane degeneracy is reported through
    ``valid``, never an exception."""
    point = _as_matrix(point, (3,), "point")
    uv, w, valid = project_points(cam, point[None, :], eps)
    return ProjectedPixel(float(uv[0, 0]), float(uv[0, 1]), float(w[0]), bool(valid[0]))


def project_cross_view_batch(src: Camera, dst: Camera, uv: np.ndarray, depths,
                             eps: float = EPS_PROJ):
    """Lift pixels ``uv`` (n, 2) of ``src`` at each depth and project into ``dst``.

    Returns ``(uv_out, w_tilde, valid)`` with shapes (n, k, 2), (n, k), (n, k)
    where k = len(depths).
    """
    depths = _check_depths(depths)
    uv = np.asarray(uv, dtype=np.float64)
    dirs = ray_directions(src, uv)                        # (n, 3)
    origin = camera_center(src)
    pts = origin[None, None, :] + depths[None, :, None] * dirs[:, None, :]
    return project_points(dst, pts, eps)


def project_cross_view(src: Camera, dst: Camera, u: float, v: float, depths,
                       eps: float = EPS_PROJ) -> list[ProjectedPixel]:
    """Project the ``src`` pixel into ``dst`` at each depth anchor, in order.

    Equals ``project_point(dst, .)`` over ``lift_along_ray(pixel_ray(src, u, v))``.
    When ``src`` and ``dst`` describe the same camera the output reproduces
    ``(u, v)`` for every depth (identity degeneration).
    """
    uv_out, w, valid = project_cross_view_batch(src, dst, np.array([[u, v]]), depths, eps)
    return [
        ProjectedPixel(float(uv_out[0, i, 0]), float(uv_out[0, i, 1]),
                       float(w[0, i]), bool(valid[0, i]))
        for i in range(uv_out.shape[1])
    ]


def relative_pose(src: Camera, dst: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking src-camera coordinates to dst-camera
    coordinates: ``x_dst = R_rel @ x_src + t_rel``."""
    r_rel = dst.rotation @ src.rotation.T
    t_rel = dst.translation - r_rel @ src.translation
    return r_rel, t_rel


def _cross_matrix(t: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def fundamental_matrix(src: Camera, dst: Camera) -> np.ndarray:
    """Fundamental matrix F with ``x_dst^T F x_src = 0`` for corresponding
    pixels. Raises for coincident camera centers (epipolar geometry undefined)."""
    r_rel, t_rel = relative_pose(src, dst)
    scale = max(1.0, float(np.linalg.norm(src.translation)), float(np.linalg.norm(dst.translation)))
    if np.linalg.norm(t_rel) <= 1e-12 * scale:
        raise ValueError("coincident camera centers: epipolar geometry undefined")
    essential = _cross_matrix(t_rel) @ r_rel
    return np.linalg.inv(dst.intrinsics).T @ essential @ np.linalg.inv(src.intrinsics)


def fundamental_residual(src: Camera, dst: Camera, u: float, v: float,
                         proj: ProjectedPixel) -> float:
    """Distance in dst pixels from ``proj`` to the epipolar line of ``(u, v)``.

    Points produced by :func:`project_cross_view` land on the line, so this
    residual is an independent consistency oracle for the projection chain.
    """
    if not proj.valid:
        raise ValueError("projected pixel is not valid; epipolar residual undefined")
    f = fundamental_matrix(src, dst)
    line = f @ np.array([u, v, 1.0])
    norm = float(np.hypot(line[0], line[1]))
    if norm < 1e-300:
        raise ValueError("degenerate epipolar line (zero image-plane gradient)")
    return float(abs(np.array([proj.u, proj.v, 1.0]) @ line)) / norm


def apply_global_rigid(cam: Camera, g: RigidTransform) -> Camera:
    """Camera observing the g-transformed world exactly as ``cam`` observes
    the original world: for every point p,
    ``project(apply_global_rigid(cam, g), g.apply(p)) == project(cam, p)``."""
    rot = cam.rotation @ g.rotation.T
    trans = cam.translation - rot @ g.translation
    return Camera(cam.intrinsics, rot, trans, cam.image_size)
