"""Pinhole camera, depth-map validity and back-projection to point clouds.

Depth maps are plain ``(H, W)`` float arrays in meters; ``0.0`` marks an
invalid pixel. Point clouds are ``(N, 3)`` float64 arrays in the camera
frame (x right, y down, z forward).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EmptyInputError

INVALID = 0.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    def cropped(self, top=0, left=0, height=None, width=None):
        return CameraIntrinsics(self.fx, self.fy, self.cx - left, self.cy - top,
                                self.width if width is None else width,
                                self.height if height is None else height)

    def to_list(self):
        return [self.fx, self.fy, self.cx, self.cy]


def validity_mask(depth):
    return np.asarray(depth) > INVALID


def check_sparse(depth):
    """Raise unless ``depth`` is a finite, non-negative 2D grid."""
    depth = np.asarray(depth)
    if depth.ndim != 2 or depth.shape[0] == 0 or depth.shape[1] == 0:
        raise ConfigurationError(f"depth map must be a non-empty 2D grid, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ConfigurationError("depth map must be finite and non-negative")
    return depth


def back_project(sparse, intr):
    """Lift every valid pixel to a camera-frame point, in row-major order."""
    sparse = np.asarray(sparse, dtype=np.float64)
    if sparse.shape != (intr.height, intr.width):
        raise ConfigurationError(
            f"depth map {sparse.shape} does not match intrinsics {intr.height}x{intr.width}")
    v, u = np.nonzero(sparse > INVALID)
    d = sparse[v, u]
    x = (u - intr.cx) * d / intr.fx
    y = (v - intr.cy) * d / intr.fy
    return np.stack([x, y, d], axis=1)


def project(points, intr):
    """Inverse of :func:`back_project`: ``(N, 3)`` points to ``(N, 2)`` (u, v)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    return np.stack([intr.fx * points[:, 0] / z + intr.cx, intr.fy * points[:, 1] / z + intr.cy], axis=1)


def sample_point_cloud(pc, n_max, seed):
    """Seeded uniform subsample without replacement to at most ``n_max``
    points; original order is kept."""
    if n_max <= 0:
        raise ConfigurationError("n_max must be positive")
    pc = np.asarray(pc)
    if len(pc) <= n_max:
        return pc
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(pc), size=n_max, replace=False))
    return pc[keep]


def normalize_point_cloud(pc):
    """Center on the mean point and scale to unit max radius.

    Returns ``(normalized, centroid, scale)``; ``scale`` is 1 for a
    degenerate cloud whose points all coincide.
    """
    pc = np.asarray(pc, dtype=np.float64)
    if len(pc) == 0:
        raise EmptyInputError("cannot normalize an empty point cloud")
    centroid = pc.mean(axis=0)
    centered = pc - centroid
    scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if scale == 0.0:
        scale = 1.0
    return centered / scale, centroid, scale
