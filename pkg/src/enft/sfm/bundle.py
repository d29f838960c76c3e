"""Full bundle adjustment (poses and points) for incremental reconstruction."""
from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import csr_matrix
from scipy.spatial.transform import Rotation

from ..geom import CameraPose
from ..geom.twoview import skew_batch
from .model import Reconstruction
from .projection import intrinsics_rows, project_rows


def _left_jacobian(w):
    """SO(3) left Jacobians for a stack of rotation vectors (n, 3)."""
    th = np.linalg.norm(w, axis=1)
    W = skew_batch(w)
    W2 = W @ W
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    a = np.where(small, 0.5, (1.0 - np.cos(ts)) / ts ** 2)
    b = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / ts ** 3)
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * W2


def bundle_adjust(rec: Reconstruction, free_frames, free_points=None, max_nfev=50,
                  tol=1e-12) -> Reconstruction:
    """Jointly refine the poses of ``free_frames`` and the ``free_points`` mask.

    Only observations touching a free unknown enter the problem. Poses are
    parameterized by absolute rotation vector and translation.
    """
    free_frames = [f for f in rec.frames if f in set(free_frames)]
    free_pts = np.ones(len(rec.points), bool) if free_points is None else np.asarray(free_points)
    slot = {f: i for i, f in enumerate(free_frames)}
    fslot = np.array([slot.get(int(f), -1) for f in rec.obs_frame], int)
    use = (fslot >= 0) | free_pts[rec.obs_point]
    if not use.any():
        return rec.copy()
    pidx = np.flatnonzero(free_pts)
    pslot = np.full(len(rec.points), -1)
    pslot[pidx] = np.arange(len(pidx))
    op = rec.obs_point[use]
    of = rec.obs_frame[use]
    ofs = fslot[use]
    ops = pslot[op]
    obs = rec.obs_px[use]
    fids = np.unique(of)
    fmap = {int(f): i for i, f in enumerate(fids)}
    frow = np.array([fmap[int(f)] for f in of], int)
    K6 = intrinsics_rows([rec.intrinsics[int(f)] for f in fids])[frow]
    R0 = np.array([rec.poses[int(f)].R for f in fids])[frow]
    t0 = np.array([rec.poses[int(f)].t for f in fids])[frow]
    nF, nP, M = len(free_frames), len(pidx), len(op)
    x0 = np.concatenate([
        np.array([np.r_[Rotation.from_matrix(rec.poses[f].R).as_rotvec(), rec.poses[f].t]
                  for f in free_frames]).reshape(-1),
        rec.points[pidx].reshape(-1)])

    isf = ofs >= 0
    isp = ops >= 0

    def unpack(x):
        cams = x[:6 * nF].reshape(nF, 6)
        pts = rec.points.copy()
        pts[pidx] = x[6 * nF:].reshape(nP, 3)
        R, t = R0.copy(), t0.copy()
        if nF:
            Rc = Rotation.from_rotvec(cams[:, :3]).as_matrix()
            R[isf] = Rc[ofs[isf]]
            t[isf] = cams[ofs[isf], 3:]
        return cams, pts, R, t

    def fun(x):
        _, pts, R, t = unpack(x)
        Z = np.einsum("nij,nj->ni", R, pts[op]) + t
        return (project_rows(Z, K6) - obs).ravel()

    def jac(x):
        cams, pts, R, t = unpack(x)
        X = pts[op]
        RX = np.einsum("nij,nj->ni", R, X)
        _, Jp = project_rows(RX + t, K6, jacobian=True)
        rows, cols, vals = [], [], []
        r = np.arange(M)
        if nF and isf.any():
            Jl = _left_jacobian(cams[:, :3])[ofs[isf]]
            Jw = Jp[isf] @ (-skew_batch(RX[isf]) @ Jl)
            Jc = np.concatenate([Jw, Jp[isf]], axis=2)                   # (m, 2, 6)
            rr = (2 * r[isf])[:, None, None] + np.arange(2)[None, :, None]
            cc = (6 * ofs[isf])[:, None, None] + np.arange(6)[None, None, :]
            rows.append(np.broadcast_to(rr, Jc.shape).ravel())
            cols.append(np.broadcast_to(cc, Jc.shape).ravel())
            vals.append(Jc.ravel())
        if nP and isp.any():
            JX = Jp[isp] @ R[isp]
            rr = (2 * r[isp])[:, None, None] + np.arange(2)[None, :, None]
            cc = (6 * nF + 3 * ops[isp])[:, None, None] + np.arange(3)[None, None, :]
            rows.append(np.broadcast_to(rr, JX.shape).ravel())
            cols.append(np.broadcast_to(cc, JX.shape).ravel())
            vals.append(JX.ravel())
        return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * M, len(x0)))

    sol = least_squares(fun, x0, jac=jac, method="trf", tr_solver="lsmr", x_scale="jac",
                        ftol=tol, xtol=tol, gtol=tol, max_nfev=max_nfev)
    cams, pts, _, _ = unpack(sol.x)
    out = rec.copy()
    Rc = Rotation.from_rotvec(cams[:, :3]).as_matrix() if nF else []
    for i, f in enumerate(free_frames):
        out.poses[f] = CameraPose(Rc[i], cams[i, 3:])
    out.points = pts
    return out
