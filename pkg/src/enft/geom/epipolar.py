"""Fundamental / essential matrix estimation and epipolar distances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateConfiguration, DegenerateLine, InsufficientMatches
from .ransac import as_rng, hartley_batch, run_ransac


def homogeneous(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def hartley_normalization(x):
    """Similarity ``T`` moving points to zero mean and mean distance sqrt(2)."""
    x = np.asarray(x, dtype=float)
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2 matrix with ``x2^T F x1 = 0``, scaled to unit Frobenius norm."""

    F: np.ndarray

    def __post_init__(self):
        F = enforce_rank2(np.asarray(self.F, dtype=float))
        object.__setattr__(self, "F", F / np.linalg.norm(F))

    def line_in_second(self, x1) -> np.ndarray:
        return homogeneous(x1) @ self.F.T

    def line_in_first(self, x2) -> np.ndarray:
        return homogeneous(x2) @ self.F


def enforce_rank2(F):
    U, s, Vt = np.linalg.svd(F)
    s[2] = 0.0
    return U @ np.diag(s) @ Vt


def point_line_distance(x, lines) -> np.ndarray:
    """Unsigned distance of pixels ``x`` (N, 2) to homogeneous ``lines`` (N, 3)."""
    lines = np.asarray(lines, dtype=float)
    x = np.asarray(x, dtype=float)
    n = np.hypot(lines[..., 0], lines[..., 1])
    return np.abs((homogeneous(x) * lines).sum(axis=-1)) / np.maximum(n, 1e-300)


def epipolar_distance(F, x1, x2) -> float:
    """Distance from ``x2`` to the epipolar line ``F x1``."""
    F = F.F if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    line = F @ homogeneous(np.asarray(x1, dtype=float))
    n = np.hypot(line[0], line[1])
    if n < 1e-12:
        raise DegenerateLine("epipolar line is undefined (F x1 vanishes)")
    return float(abs(line @ homogeneous(np.asarray(x2, dtype=float))) / n)


def symmetric_epipolar_distance(F, x1, x2) -> np.ndarray:
    """Per-match max of the two one-sided point-to-epipolar-line distances."""
    F = F.F if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    h1, h2 = homogeneous(x1), homogeneous(x2)
    l2 = h1 @ F.T
    l1 = h2 @ F
    alg = np.abs((h2 * l2).sum(axis=1))
    d2 = alg / np.maximum(np.hypot(l2[:, 0], l2[:, 1]), 1e-300)
    d1 = alg / np.maximum(np.hypot(l1[:, 0], l1[:, 1]), 1e-300)
    return np.maximum(d1, d2)


def eight_point(x1, x2, rank_tol=1e-9):
    """Normalized 8-point algorithm. Returns the rank-2 F or None if degenerate."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    T1, T2 = hartley_normalization(x1), hartley_normalization(x2)
    p1 = homogeneous(x1) @ T1.T
    p2 = homogeneous(x2) @ T2.T
    A = (p2[:, :, None] * p1[:, None, :]).reshape(len(p1), 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if len(s) < 8 or s[7] < rank_tol * s[0]:
        return None
    F = enforce_rank2(Vt[-1].reshape(3, 3))
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def eight_point_batch(x1, x2, rank_tol=1e-9):
    """Batched 8-point on (B, 8, 2) samples -> ``(F (B, 3, 3), valid (B,))``."""
    T1, T2 = hartley_batch(x1), hartley_batch(x2)
    p1 = homogeneous(x1) @ T1.transpose(0, 2, 1)
    p2 = homogeneous(x2) @ T2.transpose(0, 2, 1)
    A = (p2[..., :, None] * p1[..., None, :]).reshape(len(x1), -1, 9)
    A = np.concatenate([A, np.zeros((len(x1), max(0, 9 - A.shape[1]), 9))], axis=1)
    _, s, Vt = np.linalg.svd(A)
    valid = s[:, 7] >= rank_tol * s[:, 0]
    F = Vt[:, -1].reshape(-1, 3, 3)
    U, sf, Vft = np.linalg.svd(F)
    sf[:, 2] = 0.0
    F = U @ (sf[:, :, None] * Vft)
    F = np.transpose(T2, (0, 2, 1)) @ F @ T1
    F /= np.linalg.norm(F, axis=(1, 2), keepdims=True)
    return F, valid


def estimate_fundamental_ransac(x1, x2, threshold=2.0, max_iters=2000, confidence=0.999,
                                seed=None, rng=None):
    """Robust F from pixel correspondences.

    Returns ``(FundamentalMatrix, inlier_mask)``. Inliers are matches whose
    symmetric epipolar distance is within ``threshold``; the model is refit on
    the final inlier set.
    """
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    n = len(x1)
    if n < 8:
        raise InsufficientMatches(f"need at least 8 matches for F, got {n}")
    rng = as_rng(rng, seed)
    h1, h2 = homogeneous(x1), homogeneous(x2)

    def fit(samples):
        return eight_point_batch(x1[samples], x2[samples])

    def score(Fs):
        l2 = h1 @ Fs.transpose(0, 2, 1)
        l1 = h2 @ Fs
        alg = np.abs((l2 * h2).sum(axis=2))
        d = np.maximum(alg / np.maximum(np.hypot(l2[..., 0], l2[..., 1]), 1e-300),
                       alg / np.maximum(np.hypot(l1[..., 0], l1[..., 1]), 1e-300))
        masks = d <= threshold
        return masks.sum(axis=1), masks

    _, best_mask = run_ransac(n, 8, fit, score, max_iters, confidence, rng)
    if best_mask is None or best_mask.sum() < 8:
        raise DegenerateConfiguration("no non-degenerate 8-point sample found")
    mask = best_mask
    for _ in range(3):
        F = eight_point(x1[mask], x2[mask])
        if F is None:
            raise DegenerateConfiguration("inlier set does not determine F")
        new_mask = symmetric_epipolar_distance(F, x1, x2) <= threshold
        if new_mask.sum() < 8 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return FundamentalMatrix(F), mask


def essential_from_normalized(xn1, xn2):
    """Linear essential matrix from normalized coordinates (None if degenerate)."""
    E = eight_point(xn1, xn2)
    if E is None:
        return None
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def decompose_essential(E):
    """The four ``(R, t)`` candidates of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        out.append((R, t))
        out.append((R, -t))
    return out


def fundamental_from_poses(K1, pose1, K2, pose2) -> np.ndarray:
    """Ground-truth F mapping image-1 pixels to epipolar lines in image 2."""
    R = pose2.R @ pose1.R.T
    t = pose2.t - R @ pose1.t
    from .transforms import skew
    E = skew(t) @ R
    F = np.linalg.inv(K2).T @ E @ np.linalg.inv(K1)
    return F / np.linalg.norm(F)
