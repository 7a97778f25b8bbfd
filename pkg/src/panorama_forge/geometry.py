"""Camera-ray geometry for the pose channels of the layout tensor.

Pixels use a corner origin: pixel ``(u, v)`` is column ``u``, row ``v`` and
its coordinate is the integer index itself (no half-pixel offset).
Frustum points are ``(u*d, v*d, d, 1)`` so that ``K^-1`` recovers a camera
point at depth ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraCalib

DEPTH_NEAR = 1.0
DEPTH_FAR = 2.0


class DegenerateGeometryError(ArithmeticError):
    pass


def _frustum_points(u, v, d) -> np.ndarray:
    u, v, d = np.broadcast_arrays(np.asarray(u, np.float64), np.asarray(v, np.float64), np.asarray(d, np.float64))
    return np.stack([u * d, v * d, d, np.ones_like(d)], axis=-1)


def _unproject_matrix(calib: CameraCalib) -> np.ndarray:
    try:
        k_inv = np.linalg.inv(calib.K)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("intrinsic matrix is singular") from exc
    return calib.E @ k_inv


def unproject(u, v, d, calib: CameraCalib) -> np.ndarray:
    """Lift pixel(s) at depth ``d`` into the ego frame as homogeneous points.

    ``u``, ``v`` and ``d`` broadcast; the result has a trailing axis of 4.
    """
    if np.any(np.asarray(d) <= 0):
        raise ValueError("depth must be positive")
    pts = _frustum_points(u, v, d) @ _unproject_matrix(calib).T
    return pts / pts[..., 3:4]


def direction_vector(u, v, calib: CameraCalib, d1: float = DEPTH_NEAR, d2: float = DEPTH_FAR) -> np.ndarray:
    """Unit ray direction through pixel(s) ``(u, v)`` in the ego frame."""
    if not 0 < d1 < d2:
        raise ValueError(f"need 0 < d1 < d2, got {d1}, {d2}")
    m = _unproject_matrix(calib)
    near = _frustum_points(u, v, d1) @ m.T
    far = _frustum_points(u, v, d2) @ m.T
    diff = far[..., :3] / far[..., 3:4] - near[..., :3] / near[..., 3:4]
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norm < 1e-300):
        raise DegenerateGeometryError("zero-length ray difference; calibration is degenerate")
    return diff / norm


@dataclass(frozen=True)
class DirectionField:
    width: int
    height: int
    directions: np.ndarray  # (height, width, 3)

    def __post_init__(self):
        if self.directions.shape != (self.height, self.width, 3):
            raise ValueError(f"directions shape {self.directions.shape} != {(self.height, self.width, 3)}")
        norms = np.linalg.norm(self.directions, axis=-1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("direction field contains non-unit vectors")


def direction_field(calib: CameraCalib, width: int, height: int) -> DirectionField:
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return DirectionField(width, height, direction_vector(u, v, calib))


def pose_pseudocolor(field) -> np.ndarray:
    """Map unit directions from [-1, 1] to RGB values in [0, 255]."""
    dirs = field.directions if isinstance(field, DirectionField) else np.asarray(field, np.float64)
    return np.clip((dirs + 1.0) * 0.5 * 255.0, 0.0, 255.0)
