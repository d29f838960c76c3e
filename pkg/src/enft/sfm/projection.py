"""Vectorized pinhole projection with per-row intrinsics."""
from __future__ import annotations

import numpy as np


def intrinsics_rows(intrinsics) -> np.ndarray:
    """(n, 6) array ``fx fy cx cy k1 k2`` from a sequence of CameraIntrinsics."""
    return np.array([[k.fx, k.fy, k.cx, k.cy, k.k1, k.k2] for k in intrinsics], float).reshape(-1, 6)


def project_rows(Z, K6, jacobian=False):
    """Pixels of camera-frame points ``Z`` (M, 3); optionally d(pixel)/dZ (M, 2, 3)."""
    iz = 1.0 / Z[:, 2]
    x = Z[:, 0] * iz
    y = Z[:, 1] * iz
    fx, fy, cx, cy, k1, k2 = K6.T
    r2 = x * x + y * y
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    px = np.column_stack([fx * d * x + cx, fy * d * y + cy])
    if not jacobian:
        return px
    dd = k1 + 2.0 * k2 * r2
    a = d + 2.0 * x * x * dd
    b = 2.0 * x * y * dd
    c = d + 2.0 * y * y * dd
    J = np.empty((len(Z), 2, 3))
    J[:, 0, 0] = fx * a * iz
    J[:, 0, 1] = fx * b * iz
    J[:, 0, 2] = -fx * (a * x + b * y) * iz
    J[:, 1, 0] = fy * b * iz
    J[:, 1, 1] = fy * c * iz
    J[:, 1, 2] = -fy * (b * x + c * y) * iz
    return px, J


def pose_rows(poses):
    """Stacked rotations (n, 3, 3) and translations (n, 3)."""
    R = np.array([p.R for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    return R, t
