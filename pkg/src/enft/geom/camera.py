"""Pinhole camera with two-term radial distortion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import CheiralityViolation
from .transforms import CameraPose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    def to_pixels(self, xn) -> np.ndarray:
        """Normalized (undistorted) image coordinates to pixels."""
        xn = np.asarray(xn)
        r2 = (xn ** 2).sum(axis=-1, keepdims=True)
        xd = xn * (1.0 + self.k1 * r2 + self.k2 * r2 * r2)
        return np.stack([self.fx * xd[..., 0] + self.cx, self.fy * xd[..., 1] + self.cy], axis=-1)

    def to_normalized(self, px, iters=20) -> np.ndarray:
        """Pixels to undistorted normalized coordinates (fixed-point inversion)."""
        px = np.asarray(px, dtype=float)
        xd = np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)
        if not self.has_distortion:
            return xd
        xn = xd.copy()
        for _ in range(iters):
            r2 = (xn ** 2).sum(axis=-1, keepdims=True)
            xn = xd / (1.0 + self.k1 * r2 + self.k2 * r2 * r2)
        return xn


def project(intrinsics: CameraIntrinsics, pose: CameraPose, X) -> np.ndarray:
    """Project one world point; raises if it is not in front of the camera."""
    Z = pose.R @ np.asarray(X, dtype=float) + pose.t
    if Z[2] <= 0:
        raise CheiralityViolation(f"point has camera depth {Z[2]:.3g}")
    return intrinsics.to_pixels(Z[:2] / Z[2])


def project_points(intrinsics: CameraIntrinsics, pose: CameraPose, X):
    """Vectorized projection. Returns ``(pixels, depths)``; no cheirality check."""
    Z = np.asarray(X, dtype=float) @ pose.R.T + pose.t
    return intrinsics.to_pixels(Z[..., :2] / Z[..., 2:3]), Z[..., 2]


def backproject(intrinsics: CameraIntrinsics, pose: CameraPose, pixel, depth) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    xn = intrinsics.to_normalized(np.asarray(pixel, dtype=float))
    Z = np.concatenate([xn * depth, [depth]]) if np.ndim(xn) == 1 else \
        np.concatenate([xn * depth[..., None], depth[..., None]], axis=-1)
    return (Z - pose.t) @ pose.R


def projection_jacobian(intrinsics: CameraIntrinsics, Z) -> np.ndarray:
    """d(pixel)/d(camera point) for an (N, 3) array of camera-frame points -> (N, 2, 3)."""
    Z = np.asarray(Z, dtype=float)
    iz = 1.0 / Z[:, 2]
    x = Z[:, 0] * iz
    y = Z[:, 1] * iz
    # d(normalized)/dZ
    dn = np.zeros((len(Z), 2, 3))
    dn[:, 0, 0] = iz
    dn[:, 0, 2] = -x * iz
    dn[:, 1, 1] = iz
    dn[:, 1, 2] = -y * iz
    k1, k2 = intrinsics.k1, intrinsics.k2
    r2 = x * x + y * y
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    dd = k1 + 2.0 * k2 * r2  # d(d)/d(r2)
    # d(distorted)/d(normalized)
    D = np.empty((len(Z), 2, 2))
    D[:, 0, 0] = d + 2.0 * x * x * dd
    D[:, 0, 1] = 2.0 * x * y * dd
    D[:, 1, 0] = D[:, 0, 1]
    D[:, 1, 1] = d + 2.0 * y * y * dd
    D[:, 0, :] *= intrinsics.fx
    D[:, 1, :] *= intrinsics.fy
    return D @ dn
