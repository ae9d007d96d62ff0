"""Deterministic synthetic camera rigs and patch grids.

Scenes exist so tests, golden files, and CLI demos share reproducible
geometry. Generation is a pure function of ``(seed, parameters)``:

* PRNG: numpy ``default_rng`` (PCG64), frozen as the scene PRNG. The draw
  order per camera is fixed (azimuth jitter, elevation jitter, focal scale)
  so adding parameters later cannot silently shift existing fixtures.
* Canonical rig: cameras on a sphere of radius 4 looking at the origin, base
  focal length equal to the image width, principal point at the image center.
  With zero spread the first camera sits at (0, 0, -4) with identity rotation.
* Depth range [2, 20] pairs with this rig as the default anchor range.

Patch-center convention, used everywhere tokens carry pixel coordinates:
``((col + 0.5) * patch_size - 0.5, (row + 0.5) * patch_size - 0.5)``,
row-major over the grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera

RIG_RADIUS = 4.0
_MAX_REDRAWS = 100
_N_TEST_POINTS = 8


def patch_centers(image_size, patch_size: int) -> np.ndarray:
    """Row-major patch-center pixel coordinates, shape ((W/p)*(H/p), 2)."""
    w, h = int(image_size[0]), int(image_size[1])
    p = int(patch_size)
    if p < 1 or w % p != 0 or h % p != 0:
        raise ValueError(f"image size {w}x{h} must be divisible by patch_size {p}")
    us = (np.arange(w // p) + 0.5) * p - 0.5
    vs = (np.arange(h // p) + 0.5) * p - 0.5
    grid_u, grid_v = np.meshgrid(us, vs)   # row-major: v varies slowest
    return np.stack([grid_u.ravel(), grid_v.ravel()], axis=-1)


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with the camera z-axis toward ``target``."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-9:     # looking straight along +-y
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(up, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass
class Scene:
    """Seeded camera rig plus tokenization metadata."""

    seed: int
    patch_size: int
    cameras: list[Camera]
    test_points: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) of the patch grid; all views share one image size."""
        cam = self.cameras[0]
        return (cam.height // self.patch_size, cam.width // self.patch_size)

    @property
    def patch_grid(self) -> list[np.ndarray]:
        """Per-view patch centers (identical grids when sizes match)."""
        return [patch_centers(cam.image_size, self.patch_size) for cam in self.cameras]

    def to_json_str(self) -> str:
        cams = []
        for cam in self.cameras:
            cams.append({
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "skew": cam.skew,
                "R": [float(x) for x in cam.rotation.ravel()],
                "t": [float(x) for x in cam.translation],
                "width": cam.width, "height": cam.height,
            })
        return json.dumps({"seed": self.seed, "patch_size": self.patch_size,
                           "cameras": cams}) + "\n"

    @classmethod
    def from_json_str(cls, text: str) -> "Scene":
        data = json.loads(text)
        try:
            seed = int(data["seed"])
            patch_size = int(data["patch_size"])
            raw_cams = data["cameras"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scene JSON: missing field {exc}") from exc
        cameras = []
        for entry in raw_cams:
            k = np.array([
                [entry["fx"], entry["skew"], entry["cx"]],
                [0.0, entry["fy"], entry["cy"]],
                [0.0, 0.0, 1.0],
            ])
            cameras.append(Camera(
                k,
                np.asarray(entry["R"], dtype=np.float64).reshape(3, 3),
                np.asarray(entry["t"], dtype=np.float64),
                (entry["width"], entry["height"]),
            ))
        return cls(seed=seed, patch_size=patch_size, cameras=cameras)


def gen_scene(seed: int, n_views: int, image_size, patch_size: int,
              pose_spread: float = 0.3, focal_jitter: float = 0.0,
              min_baseline: float = 0.5) -> Scene:
    """Generate a deterministic look-at rig.

    View k starts at azimuth ``2*pi*k/n_views`` on the canonical sphere;
    ``pose_spread`` (radians) jitters azimuth and elevation, ``focal_jitter``
    scales the base focal length by a uniform factor in
    ``[1 - focal_jitter, 1 + focal_jitter]``. Pairwise camera baselines below
    ``min_baseline`` trigger a redraw (bounded, deterministic).
    """
    w, h = int(image_size[0]), int(image_size[1])
    if patch_size < 1 or w % patch_size != 0 or h % patch_size != 0:
        raise ValueError(f"image size {w}x{h} must be divisible by patch_size {patch_size}")
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    if not 0.0 <= focal_jitter < 1.0:
        raise ValueError(f"focal_jitter must be in [0, 1), got {focal_jitter}")
    if pose_spread < 0.0:
        raise ValueError(f"pose_spread must be >= 0, got {pose_spread}")

    rng = np.random.default_rng(seed)
    target = np.zeros(3)
    base_focal = float(w)

    for _ in range(_MAX_REDRAWS):
        cameras = []
        positions = []
        for k in range(n_views):
            azimuth = 2.0 * np.pi * k / n_views + rng.uniform(-pose_spread, pose_spread)
            elevation = np.clip(rng.uniform(-pose_spread, pose_spread), -1.2, 1.2)
            focal = base_focal * rng.uniform(1.0 - focal_jitter, 1.0 + focal_jitter)
            position = RIG_RADIUS * np.array([
                np.sin(azimuth) * np.cos(elevation),
                np.sin(elevation),
                -np.cos(azimuth) * np.cos(elevation),
            ])
            rotation = _look_at(position, target)
            intrinsics = np.array([
                [focal, 0.0, w / 2.0],
                [0.0, focal, h / 2.0],
                [0.0, 0.0, 1.0],
            ])
            cameras.append(Camera(intrinsics, rotation, -rotation @ position, (w, h)))
            positions.append(position)
        if n_views == 1 or _min_pairwise_distance(np.array(positions)) >= min_baseline:
            break
    else:
        raise ValueError(
            f"could not draw a rig with pairwise baselines >= {min_baseline} "
            f"after {_MAX_REDRAWS} attempts (n_views={n_views}, pose_spread={pose_spread})"
        )

    test_points = rng.uniform(-1.5, 1.5, size=(_N_TEST_POINTS, 3))
    return Scene(seed=int(seed), patch_size=int(patch_size), cameras=cameras,
                 test_points=test_points)


def _min_pairwise_distance(positions: np.ndarray) -> float:
    diffs = positions[:, None, :] - positions[None, :, :]
    dists = np.linalg.norm(diffs, axis=-1)
    return float(dists[np.triu_indices(len(positions), k=1)].min())
