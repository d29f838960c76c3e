"""Closed-form absolute orientation with scale."""
import numpy as np

from ..errors import DegenerateGeometry
from .transforms import SimilarityTransform


def estimate_similarity(src, dst, weights=None, collinear_ok=False) -> SimilarityTransform:
    """Least-squares ``(s, R, t)`` minimizing ``sum w_i |dst_i - (s R src_i + t)|^2``.

    Umeyama's SVD solution generalized to per-point weights; zero weights drop
    a correspondence entirely. With ``collinear_ok`` a rank-1 configuration
    returns one of the equally good rotations instead of raising.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if (w > 0).sum() < 3 or w.sum() <= 0:
        raise DegenerateGeometry("need at least 3 weighted point pairs")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    cs = src - mu_s
    cd = dst - mu_d
    var_s = w @ (cs ** 2).sum(axis=1)
    cov = (cd * w[:, None]).T @ cs
    U, D, Vt = np.linalg.svd(cov)
    # rank < 2 means collinear or coincident points: rotation about the line is free
    if var_s <= 0 or (D[1] <= 1e-12 * max(D[0], 1e-300) and not collinear_ok):
        raise DegenerateGeometry("points are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, R, t)
