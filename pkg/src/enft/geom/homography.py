"""Homography fitting and greedy multi-plane segmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientMatches
from .epipolar import hartley_normalization, homogeneous
from .ransac import as_rng, hartley_batch, run_ransac


@dataclass(frozen=True)
class Homography:
    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        object.__setattr__(self, "H", H / np.linalg.norm(H))

    def apply(self, x) -> np.ndarray:
        return apply_homography(self.H, x)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))


def apply_homography(H, x) -> np.ndarray:
    p = homogeneous(np.asarray(x, dtype=float)) @ np.asarray(H).T
    return p[..., :2] / p[..., 2:3]


def fit_homography(x1, x2, cond_tol=1e-10):
    """Normalized DLT. Returns None for degenerate input."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    T1, T2 = hartley_normalization(x1), hartley_normalization(x2)
    p1 = homogeneous(x1) @ T1.T
    p2 = homogeneous(x2) @ T2.T
    n = len(p1)
    A = np.zeros((2 * n, 9))
    A[0::2, 3:6] = -p2[:, 2:3] * p1
    A[0::2, 6:9] = p2[:, 1:2] * p1
    A[1::2, 0:3] = p2[:, 2:3] * p1
    A[1::2, 6:9] = -p2[:, 0:1] * p1
    _, s, Vt = np.linalg.svd(A)
    if s[7] < cond_tol * s[0]:
        return None
    H = np.linalg.inv(T2) @ Vt[-1].reshape(3, 3) @ T1
    if abs(np.linalg.det(H / np.linalg.norm(H))) < 1e-12:
        return None
    return H / np.linalg.norm(H)


def dlt4_batch(x1, x2, cond_tol=1e-10):
    """Batched minimal homographies from (B, 4, 2) samples -> ``(H, valid)``."""
    T1, T2 = hartley_batch(x1), hartley_batch(x2)
    p1 = homogeneous(x1) @ T1.transpose(0, 2, 1)
    p2 = homogeneous(x2) @ T2.transpose(0, 2, 1)
    B = len(x1)
    A = np.zeros((B, 8, 9))
    A[:, 0:8:2, 3:6] = -p2[..., 2:3] * p1
    A[:, 0:8:2, 6:9] = p2[..., 1:2] * p1
    A[:, 1:8:2, 0:3] = p2[..., 2:3] * p1
    A[:, 1:8:2, 6:9] = -p2[..., 0:1] * p1
    _, s, Vt = np.linalg.svd(A)
    H = np.linalg.inv(T2) @ Vt[:, -1].reshape(B, 3, 3) @ T1
    H /= np.linalg.norm(H, axis=(1, 2), keepdims=True)
    valid = (s[:, 7] >= cond_tol * s[:, 0]) & (np.abs(np.linalg.det(H)) > 1e-12)
    return H, valid


def transfer_error(H, x1, x2) -> np.ndarray:
    return np.linalg.norm(apply_homography(H, x1) - x2, axis=1)


def estimate_homography_ransac(x1, x2, threshold=3.0, max_iters=2000, confidence=0.999, rng=None):
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    n = len(x1)
    if n < 4:
        raise InsufficientMatches(f"need at least 4 matches for a homography, got {n}")
    rng = as_rng(rng)

    def fit(samples):
        return dlt4_batch(x1[samples], x2[samples])

    def score(Hs):
        p = homogeneous(x1) @ Hs.transpose(0, 2, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.linalg.norm(p[..., :2] / p[..., 2:3] - x2, axis=2)
        masks = err <= threshold
        return masks.sum(axis=1), masks

    best_H, best_mask = run_ransac(n, 4, fit, score, max_iters, confidence, rng)
    best_count = -1 if best_mask is None else int(best_mask.sum())
    if best_H is None:
        return None, np.zeros(n, dtype=bool)
    if best_count >= 4:
        H = fit_homography(x1[best_mask], x2[best_mask])
        if H is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                mask = transfer_error(H, x1, x2) <= threshold
            if mask.sum() >= best_count:
                best_H, best_mask = H, mask
    return best_H, best_mask


def estimate_homographies_multi_ransac(x1, x2, max_planes=8, min_remaining=12, threshold=3.0,
                                       max_iters=2000, seed=None, rng=None):
    """Greedy planar segmentation of matches.

    Each round keeps the homography with most inliers among the remaining
    matches and removes those inliers. Returns a list of
    ``(Homography, inlier_indices)`` with pairwise disjoint index sets.
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    if len(x1) < 4:
        raise InsufficientMatches(f"need at least 4 matches, got {len(x1)}")
    rng = as_rng(rng, seed)
    remaining = np.arange(len(x1))
    planes = []
    while len(planes) < max_planes and len(remaining) >= 4:
        H, mask = estimate_homography_ransac(x1[remaining], x2[remaining], threshold,
                                             max_iters=max_iters, rng=rng)
        if H is None or mask.sum() < 4:
            break
        planes.append((Homography(H), remaining[mask]))
        remaining = remaining[~mask]
        if len(remaining) < min_remaining:
            break
    return planes
