"""Segment-based bundle adjustment.

Every segment carries one similarity ``T_j`` (world -> segment-local); the
frame poses inside a segment are frozen. Unknowns are the transforms and
the world points. Each Levenberg-Marquardt step eliminates the points by
the Schur complement, solves the 7n' reduced system with block-Jacobi
preconditioned conjugate gradients (matrix-free products), then recovers
every point from its own 3x3 system.

Transform updates are left-multiplied: ``T <- D(delta) T`` where
``D(omega, v, sigma): Y -> exp(sigma) rodrigues(omega) Y + v``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import SingularSystem
from ..geom import SimilarityTransform, rodrigues
from ..geom.twoview import skew_batch
from .projection import intrinsics_rows, pose_rows, project_rows

log = logging.getLogger(__name__)

PROBLEM_HEADER = "enft-segba"
PROBLEM_VERSION = 1


@dataclass
class SegmentBAProblem:
    transforms: list            # SimilarityTransform per segment, world -> local
    frame_segment: np.ndarray   # (F,) segment of each frame slot
    frame_poses: list           # CameraPose per frame slot, local -> camera (fixed)
    intrinsics: list            # CameraIntrinsics per frame slot
    points: np.ndarray          # (N, 3) world
    obs_point: np.ndarray       # (M,)
    obs_frame: np.ndarray       # (M,) frame slot
    obs_px: np.ndarray          # (M, 2)
    fixed_segments: frozenset = frozenset({0})
    fixed_points: np.ndarray = None
    weights: np.ndarray = None
    frame_ids: list = None      # original frame id per slot (bookkeeping only)
    point_ids: np.ndarray = None

    def __post_init__(self):
        self.frame_segment = np.asarray(self.frame_segment, dtype=int)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.obs_point = np.asarray(self.obs_point, dtype=int)
        self.obs_frame = np.asarray(self.obs_frame, dtype=int)
        self.obs_px = np.asarray(self.obs_px, dtype=float).reshape(-1, 2)
        self.fixed_segments = frozenset(int(j) for j in self.fixed_segments)
        if self.fixed_points is None:
            self.fixed_points = np.zeros(len(self.points), bool)
        if self.weights is None:
            self.weights = np.ones(len(self.obs_point))
        self._cache()

    def _cache(self):
        R, t = pose_rows(self.frame_poses)
        K6 = intrinsics_rows(self.intrinsics)
        f = self.obs_frame
        self._R = R[f]
        self._t = t[f]
        self._K = K6[f]
        self._seg = self.frame_segment[f]
        # observation groupings used to accumulate the normal equations
        N = len(self.points)
        key = self._seg.astype(np.int64) * max(N, 1) + self.obs_point
        self._pair_order = np.argsort(key, kind="stable")
        k_sorted = key[self._pair_order]
        first = np.flatnonzero(np.r_[True, k_sorted[1:] != k_sorted[:-1]]) if len(key) else \
            np.zeros(0, int)
        self._pair_starts = first
        self._pair_seg = (k_sorted[first] // max(N, 1)).astype(int)
        self._pair_pt = (k_sorted[first] % max(N, 1)).astype(int)
        self._pt_order = np.argsort(self.obs_point, kind="stable")
        p_sorted = self.obs_point[self._pt_order]
        self._pt_starts = np.flatnonzero(np.r_[True, p_sorted[1:] != p_sorted[:-1]]) \
            if len(p_sorted) else np.zeros(0, int)
        self._pt_ids = p_sorted[self._pt_starts]
        self._seg_rows = [np.flatnonzero(self._seg == j) for j in range(len(self.transforms))]

    @property
    def n_segments(self) -> int:
        return len(self.transforms)

    @property
    def dimension(self) -> int:
        """Size of the reduced (Schur complement) system."""
        return 7 * self.n_segments

    def with_state(self, transforms, points) -> "SegmentBAProblem":
        return replace(self, transforms=list(transforms), points=np.array(points, dtype=float))

    # ------------------------------------------------------------------ evaluation

    def _local(self, transforms, points):
        s = np.array([T.s for T in transforms])
        Rs = np.array([T.R for T in transforms]).reshape(-1, 3, 3)
        ts = np.array([T.t for T in transforms]).reshape(-1, 3)
        g = self._seg
        X = points[self.obs_point]
        RX = np.einsum("nij,nj->ni", Rs[g], X)
        Y = s[g, None] * RX + ts[g]
        Z = np.einsum("nij,nj->ni", self._R, Y) + self._t
        return s, Rs, Y, Z

    def residuals(self, transforms=None, points=None) -> np.ndarray:
        """Projected minus observed pixels (M, 2); ``nan`` rows behind a camera."""
        transforms = self.transforms if transforms is None else transforms
        points = self.points if points is None else points
        _, _, _, Z = self._local(transforms, points)
        r = project_rows(Z, self._K) - self.obs_px
        r[Z[:, 2] <= 0] = np.nan
        return r

    def cost(self, transforms=None, points=None) -> float:
        r = self.residuals(transforms, points)
        if np.isnan(r).any():
            return np.inf
        return float(np.dot(self.weights, (r * r).sum(axis=1)))

    def jacobians(self, transforms=None, points=None):
        """Residuals, d r / d delta_T (M, 2, 7) and d r / d X (M, 2, 3)."""
        transforms = self.transforms if transforms is None else transforms
        points = self.points if points is None else points
        s, Rs, Y, Z = self._local(transforms, points)
        px, Jp = project_rows(Z, self._K, jacobian=True)
        r = px - self.obs_px
        A = Jp @ self._R                                   # d r / d Y
        dY = np.zeros((len(Y), 3, 7))
        dY[:, :, :3] = -skew_batch(Y)
        dY[:, :, 3:6] = np.eye(3)
        dY[:, :, 6] = Y
        JT = A @ dY
        JX = A @ (s[self._seg, None, None] * Rs[self._seg])
        return r, JT, JX

    def mean_reprojection_error(self) -> float:
        r = self.residuals()
        return float(np.linalg.norm(r, axis=1).mean()) if len(r) else 0.0


def apply_delta(T: SimilarityTransform, delta) -> SimilarityTransform:
    D = SimilarityTransform(float(np.exp(delta[6])), rodrigues(np.asarray(delta[:3], float)),
                            delta[3:6])
    return D.compose(T)


@dataclass
class NormalEquations:
    """Blocks of J^T W J and J^T W r with points still present."""

    U: np.ndarray               # (S, 7, 7)
    V: np.ndarray               # (N, 3, 3)
    W: np.ndarray               # (P, 7, 3), one per (segment, point) pair
    pair_seg: np.ndarray
    pair_pt: np.ndarray
    gT: np.ndarray              # (S, 7)
    gX: np.ndarray              # (N, 3)


def _group_sum(values, order, starts):
    if not len(order):
        return np.zeros((0,) + values.shape[1:])
    return np.add.reduceat(values[order], starts, axis=0)


def build_normal_equations(problem: SegmentBAProblem, r, JT, JX) -> NormalEquations:
    w = problem.weights
    S, N = problem.n_segments, len(problem.points)
    sw = np.sqrt(w)[:, None, None]
    aT = JT * sw
    aX = JX * sw
    ar = r * sw[:, :, 0]
    U = np.zeros((S, 7, 7))
    gT = np.zeros((S, 7))
    for j, rows in enumerate(problem._seg_rows):
        A = aT[rows].reshape(-1, 7)
        U[j] = A.T @ A
        gT[j] = A.T @ ar[rows].ravel()
    XtX = np.matmul(aX.transpose(0, 2, 1), aX)
    Xtr = np.matmul(aX.transpose(0, 2, 1), ar[:, :, None])[:, :, 0]
    V = np.zeros((N, 3, 3))
    gX = np.zeros((N, 3))
    V[problem._pt_ids] = _group_sum(XtX, problem._pt_order, problem._pt_starts)
    gX[problem._pt_ids] = _group_sum(Xtr, problem._pt_order, problem._pt_starts)
    TtX = np.matmul(aT.transpose(0, 2, 1), aX)
    W = _group_sum(TtX, problem._pair_order, problem._pair_starts)
    return NormalEquations(U, V, W, problem._pair_seg, problem._pair_pt, gT, gX)


def _scatter(index, values, n):
    """Row sums of ``values`` grouped by ``index`` into an (n, k) array."""
    return np.stack([np.bincount(index, values[:, c], n) for c in range(values.shape[1])], axis=1) \
        if len(values) else np.zeros((n, values.shape[1]))


def _damped(blocks, lam):
    out = blocks.copy()
    d = np.einsum("nii->ni", out)
    d *= 1.0 + lam
    return out


def _inv3(V):
    det = np.linalg.det(V)
    scale = np.einsum("nii->n", V)
    if (~np.isfinite(det)).any() or (np.abs(det) <= 1e-14 * np.maximum(scale, 1e-300) ** 3).any():
        bad = np.flatnonzero(np.abs(det) <= 1e-14 * np.maximum(scale, 1e-300) ** 3)
        raise SingularSystem(f"{len(bad)} point block(s) are singular, first {bad[:5].tolist()}")
    return np.linalg.inv(V)


@dataclass
class ReducedSystem:
    """The Schur complement ``S = U - W V^-1 W^T`` kept in factored form."""

    U: np.ndarray
    W: np.ndarray
    Vinv: np.ndarray
    pair_seg: np.ndarray
    pair_pt: np.ndarray
    free_seg: np.ndarray        # bool per segment
    n_points: int

    def matvec(self, x):
        """``S x`` for ``x`` of shape (S, 7) without forming S."""
        y = np.einsum("sij,sj->si", self.U, x)
        t = np.einsum("pij,pi->pj", self.W, x[self.pair_seg])          # W^T x per pair
        u = _scatter(self.pair_pt, t, self.n_points)
        v = np.einsum("nij,nj->ni", self.Vinv, u)
        back = np.einsum("pij,pj->pi", self.W, v[self.pair_pt])
        y -= _scatter(self.pair_seg, back, len(y))
        y[~self.free_seg] = x[~self.free_seg]
        return y

    def block_diagonal(self):
        """Diagonal 7x7 blocks of S (the block-Jacobi preconditioner)."""
        D = self.U.copy()
        WV = np.einsum("pij,pjk->pik", self.W, self.Vinv[self.pair_pt])
        D -= _scatter(self.pair_seg, np.matmul(WV, self.W.transpose(0, 2, 1)).reshape(-1, 49),
                      len(D)).reshape(-1, 7, 7)
        D[~self.free_seg] = np.eye(7)
        return D

    def dense(self):
        """Explicit S (tests and small problems only)."""
        S = self.U.shape[0]
        out = np.zeros((7 * S, 7 * S))
        for j in range(S):
            e = np.zeros((S, 7))
            for k in range(7):
                e[:] = 0.0
                e[j, k] = 1.0
                out[:, 7 * j + k] = self.matvec(e).ravel()
        return out


def reduce_system(problem: SegmentBAProblem, ne: NormalEquations, lam: float):
    """Damp, pin fixed unknowns and eliminate points. Returns (system, rhs, damped V^-1, W_ok)."""
    free_seg = np.ones(problem.n_segments, bool)
    free_seg[list(problem.fixed_segments)] = False
    U = _damped(ne.U, lam)
    U[~free_seg] = np.eye(7)
    V = _damped(ne.V, lam)
    fixed_pt = problem.fixed_points
    V[fixed_pt] = np.eye(3)
    W = ne.W.copy()
    W[fixed_pt[ne.pair_pt] | ~free_seg[ne.pair_seg]] = 0.0
    Vinv = _inv3(V)
    gT = ne.gT.copy()
    gT[~free_seg] = 0.0
    gX = ne.gX.copy()
    gX[fixed_pt] = 0.0
    sysm = ReducedSystem(U, W, Vinv, ne.pair_seg, ne.pair_pt, free_seg, len(problem.points))
    # rhs of S dT = -(gT - W V^-1 gX)
    VgX = np.einsum("nij,nj->ni", Vinv, gX)
    rhs = -gT + _scatter(ne.pair_seg, np.einsum("pij,pj->pi", W, VgX[ne.pair_pt]), len(gT))
    rhs[~free_seg] = 0.0
    return sysm, rhs, gX


def back_substitute(sysm: ReducedSystem, gX, dT):
    """Point updates ``dX = -V^-1 (gX + W^T dT)`` from independent 3x3 systems."""
    t = np.einsum("pij,pi->pj", sysm.W, dT[sysm.pair_seg])
    u = gX + _scatter(sysm.pair_pt, t, len(gX))
    return -np.einsum("nij,nj->ni", sysm.Vinv, u)


def pcg(sysm: ReducedSystem, rhs, tol=1e-8, max_iters=500):
    """Block-Jacobi preconditioned conjugate gradients; returns (x, iterations, converged)."""
    D = sysm.block_diagonal()
    try:
        Minv = np.linalg.inv(D)
    except np.linalg.LinAlgError:
        raise SingularSystem("reduced system has a singular diagonal block") from None
    x = np.zeros_like(rhs)
    r = rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x, 0, True
    z = np.einsum("sij,sj->si", Minv, r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, max_iters + 1):
        Ap = sysm.matvec(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            raise SingularSystem("reduced system is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it, True
        z = np.einsum("sij,sj->si", Minv, r)
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iters, False


@dataclass
class SegmentBAResult:
    problem: SegmentBAProblem           # final state
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int
    converged: bool
    costs: list = field(default_factory=list)        # cost after each accepted step
    iterates: list = field(default_factory=list)     # (transforms, points) when recorded
    pcg_iterations: list = field(default_factory=list)

    @property
    def transforms(self):
        return self.problem.transforms

    @property
    def points(self):
        return self.problem.points


def segment_ba(problem: SegmentBAProblem, max_iters=50, tol=1e-12, lam0=1e-3,
               pcg_tol=1e-8, pcg_max_iters=500, record=False) -> SegmentBAResult:
    """Levenberg-Marquardt on the segment objective (multiplicative damping x10 / x0.1).

    Stops when a step improves the cost by less than ``tol`` relative, the
    damping saturates, the gradient vanishes, or after ``max_iters`` outer
    iterations (``converged`` False in that case).
    """
    T = list(problem.transforms)
    X = problem.points.copy()
    cost = problem.cost(T, X)
    if not np.isfinite(cost):
        raise SingularSystem("initial state puts points behind a camera")
    res = SegmentBAResult(problem, cost, cost, 0, 0, False)
    lam = lam0
    free = [j for j in range(problem.n_segments) if j not in problem.fixed_segments]
    rounding = 64 * np.finfo(float).eps * max(np.abs(problem.obs_px).max(initial=0.0), 1.0)
    for it in range(1, max_iters + 1):
        res.iterations = it
        r, JT, JX = problem.jacobians(T, X)
        ne = build_normal_equations(problem, r, JT, JX)
        gnorm = np.sqrt((ne.gT[free] ** 2).sum() + (ne.gX[~problem.fixed_points] ** 2).sum())
        # residuals at rounding level of the pixel coordinates: nothing left to fit
        if gnorm == 0.0 or cost == 0.0 or np.abs(r).max() <= rounding:
            res.converged = True
            break
        stepped = False
        while lam < 1e16:
            sysm, rhs, gX = reduce_system(problem, ne, lam)
            dT, n_cg, _ = pcg(sysm, rhs, pcg_tol, pcg_max_iters)
            res.pcg_iterations.append(n_cg)
            dX = back_substitute(sysm, gX, dT)
            T_new = [T[j] if j in problem.fixed_segments else apply_delta(T[j], dT[j])
                     for j in range(problem.n_segments)]
            X_new = X + dX
            c_new = problem.cost(T_new, X_new)
            if c_new < cost:
                stepped = True
                gain = (cost - c_new) / cost
                T, X, cost = T_new, X_new, c_new
                lam = max(lam * 0.1, 1e-15)
                res.accepted_steps += 1
                res.costs.append(cost)
                if record:
                    res.iterates.append((list(T), X.copy()))
                break
            lam *= 10.0
        if not stepped:
            res.converged = True
            break
        if gain < tol:
            res.converged = True
            break
    res.problem = problem.with_state(T, X)
    res.final_cost = cost
    if not res.converged:
        log.info("segment BA stopped after %d iterations (cost %.6g)", res.iterations, cost)
    return res


# ----------------------------------------------------------------------------- text dump

def dump_problem(problem: SegmentBAProblem, path) -> None:
    """Versioned text serialization.

    Grammar (one record per line, whitespace separated, floats as repr)::

        enft-segba 1
        segments <S> fixed <j...>
        T <j> <s> <r00..r22> <t0 t1 t2>
        frames <F>
        F <slot> <frame_id> <segment> <fx fy cx cy k1 k2> <r00..r22> <t0 t1 t2>
        points <N>
        X <i> <point_id> <fixed 0|1> <x y z>
        observations <M>
        O <point> <slot> <u> <v> <weight>
    """
    out = [f"{PROBLEM_HEADER} {PROBLEM_VERSION}",
           f"segments {problem.n_segments} fixed " + " ".join(map(str, sorted(problem.fixed_segments)))]
    for j, T in enumerate(problem.transforms):
        out.append(" ".join(["T", str(j), repr(float(T.s))]
                            + [repr(float(v)) for v in (*T.R.ravel(), *T.t)]))
    fids = problem.frame_ids or list(range(len(problem.frame_poses)))
    out.append(f"frames {len(problem.frame_poses)}")
    for k, (p, K) in enumerate(zip(problem.frame_poses, problem.intrinsics)):
        vals = [K.fx, K.fy, K.cx, K.cy, K.k1, K.k2, *p.R.ravel(), *p.t]
        out.append(" ".join(["F", str(k), str(fids[k]), str(int(problem.frame_segment[k]))]
                            + [repr(float(v)) for v in vals]))
    pids = problem.point_ids if problem.point_ids is not None else np.arange(len(problem.points))
    out.append(f"points {len(problem.points)}")
    for i, X in enumerate(problem.points):
        out.append(" ".join(["X", str(i), str(int(pids[i])), str(int(problem.fixed_points[i]))]
                            + [repr(float(v)) for v in X]))
    out.append(f"observations {len(problem.obs_point)}")
    for i, f, x, w in zip(problem.obs_point, problem.obs_frame, problem.obs_px, problem.weights):
        out.append(f"O {i} {f} {float(x[0])!r} {float(x[1])!r} {float(w)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def load_problem(path) -> SegmentBAProblem:
    from ..errors import ParseError
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or lines[0] != [PROBLEM_HEADER, str(PROBLEM_VERSION)]:
        raise ParseError(f"{path}: expected header '{PROBLEM_HEADER} {PROBLEM_VERSION}'")
    try:
        return _parse_problem(lines)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed problem dump ({exc})") from None


def _parse_problem(lines) -> SegmentBAProblem:
    from ..errors import ParseError
    from ..geom import CameraIntrinsics, CameraPose
    fixed = [int(v) for v in lines[1][3:]]
    T, poses, intr, seg, fids = [], [], [], [], []
    pts, pids, pfix = [], [], []
    op, of, ox, ow = [], [], [], []
    for ln in lines[2:]:
        tag, vals = ln[0], ln[1:]
        if tag == "T":
            v = list(map(float, vals[1:]))
            T.append(SimilarityTransform(v[0], np.reshape(v[1:10], (3, 3)), v[10:13]))
        elif tag == "F":
            fids.append(int(vals[1]))
            seg.append(int(vals[2]))
            v = list(map(float, vals[3:]))
            intr.append(CameraIntrinsics(*v[:6]))
            poses.append(CameraPose(np.reshape(v[6:15], (3, 3)), v[15:18]))
        elif tag == "X":
            pids.append(int(vals[1]))
            pfix.append(vals[2] == "1")
            pts.append(list(map(float, vals[3:6])))
        elif tag == "O":
            op.append(int(vals[0]))
            of.append(int(vals[1]))
            ox.append((float(vals[2]), float(vals[3])))
            ow.append(float(vals[4]))
        elif tag not in ("frames", "points", "observations"):
            raise ParseError(f"unknown record {tag!r}")
    return SegmentBAProblem(T, seg, poses, intr, np.array(pts).reshape(-1, 3), op, of,
                            np.array(ox).reshape(-1, 2), frozenset(fixed), np.array(pfix, bool),
                            np.array(ow), fids, np.array(pids, int))
