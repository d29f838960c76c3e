"""Triangulation, relative pose and absolute pose (resection)."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateConfiguration, InsufficientMatches, ResectionFailure
from .camera import CameraIntrinsics, project_points, projection_jacobian
from .epipolar import decompose_essential, estimate_fundamental_ransac
from .ransac import as_rng, ransac_iterations
from .transforms import CameraPose, orthonormalize, rodrigues


def triangulate_pair(pose1: CameraPose, pose2: CameraPose, xn1, xn2) -> np.ndarray:
    """Linear DLT triangulation of normalized coordinates, vectorized over points."""
    P1 = np.hstack([pose1.R, pose1.t[:, None]])
    P2 = np.hstack([pose2.R, pose2.t[:, None]])
    xn1 = np.atleast_2d(xn1)
    xn2 = np.atleast_2d(xn2)
    A = np.stack([
        xn1[:, 0:1] * P1[2] - P1[0],
        xn1[:, 1:2] * P1[2] - P1[1],
        xn2[:, 0:1] * P2[2] - P2[0],
        xn2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    return Xh[:, :3] / Xh[:, 3:4]


def triangulate_multiview(poses, xns) -> np.ndarray:
    """Linear triangulation of a single point seen in several views."""
    rows = []
    for pose, xn in zip(poses, xns):
        P = np.hstack([pose.R, pose.t[:, None]])
        rows.append(xn[0] * P[2] - P[0])
        rows.append(xn[1] * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    Xh = Vt[-1]
    return Xh[:3] / Xh[3]


def triangulation_angle(c1, c2, X) -> np.ndarray:
    """Angle (radians) between the viewing rays from centers ``c1``/``c2`` to ``X``."""
    r1 = X - c1
    r2 = X - c2
    cosang = (r1 * r2).sum(axis=-1) / (np.linalg.norm(r1, axis=-1) * np.linalg.norm(r2, axis=-1))
    return np.arccos(np.clip(cosang, -1.0, 1.0))


def relative_pose(intr1: CameraIntrinsics, intr2: CameraIntrinsics, px1, px2,
                  threshold=2.0, max_iters=2000, rng=None):
    """Second camera pose relative to the first (first is identity, |t| = 1).

    Returns ``(pose2, inlier_mask, points)`` where ``points`` holds the
    triangulated inliers in front of both cameras (NaN elsewhere).
    """
    px1 = np.asarray(px1, dtype=float)
    px2 = np.asarray(px2, dtype=float)
    xn1 = intr1.to_normalized(px1)
    xn2 = intr2.to_normalized(px2)
    f = 0.5 * (intr1.fx + intr1.fy)
    Fn, mask = estimate_fundamental_ransac(xn1, xn2, threshold / f, max_iters=max_iters, rng=rng)
    U, _, Vt = np.linalg.svd(Fn.F)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    pose1 = CameraPose.identity()
    best = None
    for R, t in decompose_essential(E):
        pose2 = CameraPose(R, t)
        X = triangulate_pair(pose1, pose2, xn1[mask], xn2[mask])
        z1 = X[:, 2]
        z2 = (X @ R.T + t)[:, 2]
        good = int(((z1 > 0) & (z2 > 0)).sum())
        if best is None or good > best[0]:
            best = (good, pose2, X, (z1 > 0) & (z2 > 0))
    good, pose2, X, front = best
    if good < 8:
        raise DegenerateConfiguration("no essential decomposition puts points in front")
    inliers = np.flatnonzero(mask)[front]
    final = np.zeros(len(px1), dtype=bool)
    final[inliers] = True
    points = np.full((len(px1), 3), np.nan)
    points[inliers] = X[front]
    return pose2, final, points


def pnp_dlt(X, xn):
    """Linear 6+-point resection in normalized coordinates (None if degenerate)."""
    X = np.asarray(X, dtype=float)
    xn = np.asarray(xn, dtype=float)
    n = len(X)
    # condition the 3D points
    c = X.mean(axis=0)
    sc = np.sqrt(3.0) / max(np.sqrt(((X - c) ** 2).sum(axis=1)).mean(), 1e-300)
    Xc = (X - c) * sc
    Xh = np.hstack([Xc, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        return None
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    scale = np.cbrt(np.linalg.det(M))
    if abs(scale) < 1e-300:
        return None
    P = P / scale
    R = orthonormalize(P[:, :3])
    t = P[:, 3]
    # undo conditioning: X' = sc (X - c)  =>  x ~ R sc X + (t - R sc c)
    t_world = (t - sc * R @ c) / sc
    return CameraPose(R, t_world)


def refine_pose(intr: CameraIntrinsics, pose: CameraPose, X, px, iters=10, weights=None):
    """Gauss-Newton on reprojection error over a 6-DoF pose (left perturbation)."""
    X = np.asarray(X, dtype=float)
    px = np.asarray(px, dtype=float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    R, t = pose.R, pose.t

    def cost(R, t):
        proj, z = project_points(intr, CameraPose(R, t), X)
        if (z <= 0).any():
            return np.inf
        return float((w * ((proj - px) ** 2).sum(axis=1)).sum())

    c0 = cost(R, t)
    lam = 1e-6
    for _ in range(iters):
        Z = X @ R.T + t
        proj = intr.to_pixels(Z[:, :2] / Z[:, 2:3])
        e = (proj - px)
        Jp = projection_jacobian(intr, Z)
        # dZ/d(omega, tau) for Z -> exp(omega) Z + tau
        dZ = np.zeros((len(Z), 3, 6))
        dZ[:, :, :3] = -skew_batch(Z)
        dZ[:, :, 3:] = np.eye(3)
        J = Jp @ dZ
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, e)
        accepted = False
        for _ in range(8):
            try:
                delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = rodrigues(delta[:3])
            Rn = dR @ R
            tn = dR @ t + delta[3:]
            c1 = cost(Rn, tn)
            if c1 <= c0:
                R, t, c0 = orthonormalize(Rn), tn, c1
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or np.linalg.norm(delta) < 1e-14:
            break
    return CameraPose(R, t)


def skew_batch(Z):
    """Stack of cross-product matrices ``[z]x`` for an (N, 3) array."""
    Z = np.asarray(Z)
    S = np.zeros((len(Z), 3, 3), dtype=Z.dtype)
    S[:, 0, 1] = -Z[:, 2]
    S[:, 0, 2] = Z[:, 1]
    S[:, 1, 0] = Z[:, 2]
    S[:, 1, 2] = -Z[:, 0]
    S[:, 2, 0] = -Z[:, 1]
    S[:, 2, 1] = Z[:, 0]
    return S


def resect(intr: CameraIntrinsics, X, px, threshold=3.0, max_iters=1000, confidence=0.999,
           rng=None, min_inliers=6):
    """Robust camera resection from 2D-3D correspondences.

    Returns ``(pose, inlier_mask)``.
    """
    X = np.asarray(X, dtype=float)
    px = np.asarray(px, dtype=float)
    n = len(X)
    if n < 6:
        raise InsufficientMatches(f"resection needs 6 correspondences, got {n}")
    rng = as_rng(rng)
    xn = intr.to_normalized(px)
    best_pose, best_mask, best_count = None, None, -1
    needed, it = max_iters, 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, 6, replace=False)
        pose = pnp_dlt(X[sample], xn[sample])
        if pose is None:
            continue
        proj, z = project_points(intr, pose, X)
        mask = (z > 0) & (np.linalg.norm(proj - px, axis=1) <= threshold)
        count = int(mask.sum())
        if count > best_count:
            best_pose, best_mask, best_count = pose, mask, count
            needed = ransac_iterations(count / n, 6, confidence)
    if best_pose is None or best_count < min_inliers:
        raise ResectionFailure(f"only {max(best_count, 0)} resection inliers")
    pose = pnp_dlt(X[best_mask], xn[best_mask]) or best_pose
    pose = refine_pose(intr, pose, X[best_mask], px[best_mask])
    proj, z = project_points(intr, pose, X)
    mask = (z > 0) & (np.linalg.norm(proj - px, axis=1) <= threshold)
    if mask.sum() < min_inliers:
        raise ResectionFailure(f"only {int(mask.sum())} inliers after refinement")
    pose = refine_pose(intr, pose, X[mask], px[mask])
    return pose, mask
