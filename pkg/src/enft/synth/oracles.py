"""Brute-force reference implementations.

Nothing here calls into the matcher or solver code it is used to check:
nearest neighbours are dense distance matrices, the fundamental matrix comes
from a plain looped 8-point RANSAC, and the track merge is a separate
union-find.
"""
from __future__ import annotations

import numpy as np


# ----------------------------------------------------------------------------- epipolar

def _normalize_pts(x):
    c = x.mean(axis=0)
    s = np.sqrt(2) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return np.column_stack([x, np.ones(len(x))]) @ T.T, T


def _fit_f(x1, x2):
    p1, T1 = _normalize_pts(x1)
    p2, T2 = _normalize_pts(x2)
    A = np.einsum("ni,nj->nij", p2, p1).reshape(len(x1), 9)
    _, s, Vt = np.linalg.svd(A)
    if len(s) >= 8 and s[7] < 1e-9 * s[0]:
        return None
    F = Vt[-1].reshape(3, 3)
    U, sv, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([sv[0], sv[1], 0]) @ Vt2
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def _sym_dist(F, x1, x2):
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    l2 = h1 @ F.T
    l1 = h2 @ F
    r = np.abs(np.sum(h2 * l2, axis=1))
    return np.maximum(r / np.hypot(l2[:, 0], l2[:, 1]), r / np.hypot(l1[:, 0], l1[:, 1]))


def oracle_fundamental(x1, x2, tau, iters=400, seed=0):
    """Looped 8-point RANSAC (adaptive count, capped at ``iters``); returns (F, inlier mask) or (None, None)."""
    rng = np.random.default_rng(seed)
    n = len(x1)
    if n < 8:
        return None, None
    best, best_mask = None, None
    needed, k = iters, 0
    while k < min(iters, needed):
        k += 1
        s = rng.choice(n, 8, replace=False)
        F = _fit_f(x1[s], x2[s])
        if F is None:
            continue
        mask = _sym_dist(F, x1, x2) <= tau
        if best_mask is None or mask.sum() > best_mask.sum():
            best, best_mask = F, mask
            w = (mask.sum() / n) ** 8
            needed = np.inf if w <= 0 else (1 if w >= 1 else np.log(1e-3) / np.log(1 - w))
    if best is None:
        return None, None
    F = _fit_f(x1[best_mask], x2[best_mask])
    if F is not None:
        mask = _sym_dist(F, x1, x2) <= tau
        if mask.sum() >= best_mask.sum():
            best, best_mask = F, mask
    return best, best_mask


def oracle_2nn(d1, d2, ratio):
    """Dense ratio test with one-to-one enforcement (closest claimant wins)."""
    if len(d1) == 0 or len(d2) < 2:
        return []
    sq = (d1 ** 2).sum(1)[:, None] + (d2 ** 2).sum(1)[None, :] - 2.0 * d1 @ d2.T
    D = np.sqrt(np.maximum(sq, 0.0))
    two = np.argpartition(D, 1, axis=1)[:, :2]
    rows = np.arange(len(d1))
    first = np.where(D[rows, two[:, 0]] <= D[rows, two[:, 1]], two[:, 0], two[:, 1])
    second = np.where(first == two[:, 0], two[:, 1], two[:, 0])
    good = np.flatnonzero(D[rows, first] < ratio * D[rows, second])
    out = {}
    for a in good:
        b = first[a]
        if b not in out or (D[a, b], a) < (D[out[b], b], out[b]):
            out[b] = a
    return sorted((int(a), int(b)) for b, a in out.items())


# ----------------------------------------------------------------------------- track merge

def brute_force_track_merge(tracks, frames, keyframes, band=1, ratio=0.8, tau_e=2.0,
                            min_inliers=16, max_distance=0.9, s_vote=2.0, seed=0):
    """Match every keyframe pair farther apart than ``band`` and merge tracks.

    Each pair: ratio matching of track descriptors, RANSAC F, then epipolar
    guided search for the rest; votes as in the production matcher. Returns
    ``(groups, n_matchings)`` with ``groups`` a list of sorted track-id lists
    (singletons included).
    """
    by_id = {t.track_id: t for t in tracks}
    desc = {}
    for t in tracks:
        ds = [frames[f].descriptors[i] for f, i in t.observations.items()]
        m = np.mean(ds, axis=0)
        desc[t.track_id] = m / np.linalg.norm(m)
    seen = {f: [] for f in keyframes}
    for t in tracks:
        for f in t.observations:
            if f in seen:
                seen[f].append(t.track_id)
    n_in, n_out = {}, {}
    n_matchings = 0
    kf = list(keyframes)
    for i in range(len(kf)):
        for j in range(i + band + 1, len(kf)):
            n_matchings += 1
            f1, f2 = kf[i], kf[j]
            a_ids = sorted(seen[f1])
            b_ids = sorted(seen[f2])
            if len(a_ids) < 8 or len(b_ids) < 8:
                continue
            x1 = np.array([frames[f1].positions[by_id[t].observations[f1]] for t in a_ids])
            x2 = np.array([frames[f2].positions[by_id[t].observations[f2]] for t in b_ids])
            d1 = np.array([desc[t] for t in a_ids])
            d2 = np.array([desc[t] for t in b_ids])
            ok_pair = lambda a, b: a != b and not (by_id[a].observations.keys()
                                                   & by_id[b].observations.keys())
            m = [(a, b) for a, b in oracle_2nn(d1, d2, ratio) if ok_pair(a_ids[a], b_ids[b])]
            if len(m) < min_inliers:
                continue
            ia = np.array([a for a, _ in m])
            ib = np.array([b for _, b in m])
            F, mask = oracle_fundamental(x1[ia], x2[ib], tau_e, seed=seed + 7919 * i + j)
            if F is None or mask.sum() < min_inliers:
                continue
            evaluated = [(a_ids[a], b_ids[b], bool(ok)) for a, b, ok in zip(ia, ib, mask)]
            used_a, used_b = set(ia.tolist()), set(ib.tolist())
            h2 = np.column_stack([x2, np.ones(len(x2))])
            props = []
            for a in range(len(a_ids)):
                if a in used_a:
                    continue
                l = F @ np.array([x1[a, 0], x1[a, 1], 1.0])
                l = l / np.hypot(l[0], l[1])
                cands = [b for b in np.flatnonzero(np.abs(h2 @ l) <= tau_e)
                         if b not in used_b and ok_pair(a_ids[a], b_ids[b])]
                if not cands:
                    continue
                dd = sorted((np.linalg.norm(d2[b] - d1[a]), b) for b in cands)
                if dd[0][0] > max_distance or (len(dd) > 1 and dd[0][0] >= ratio * dd[1][0]):
                    continue
                props.append((dd[0][0], a, dd[0][1]))
            for _, a, b in sorted(props):
                if a in used_a or b in used_b:
                    continue
                if _sym_dist(F, x1[a:a + 1], x2[b:b + 1])[0] > tau_e:
                    continue
                used_a.add(a)
                used_b.add(b)
                evaluated.append((a_ids[a], b_ids[b], True))
            for a, b, ok in evaluated:
                k = (min(a, b), max(a, b))
                n_in.setdefault(k, 0)
                n_out.setdefault(k, 0)
                if ok:
                    n_in[k] += 1
                else:
                    n_out[k] += 1

    keep = [k for k in n_in if n_in[k] > 0 and n_in[k] >= s_vote * n_out[k]]
    keep.sort(key=lambda k: (-n_in[k], n_out[k], k))
    comp = {t: {t} for t in by_id}
    owner = {t: t for t in by_id}
    for a, b in keep:
        ca, cb = owner[a], owner[b]
        if ca == cb:
            continue
        fa = set().union(*(by_id[t].observations.keys() for t in comp[ca]))
        fb = set().union(*(by_id[t].observations.keys() for t in comp[cb]))
        if fa & fb:
            continue
        comp[ca] |= comp.pop(cb)
        for t in comp[ca]:
            owner[t] = ca
    groups = sorted(sorted(g) for g in comp.values())
    return groups, n_matchings


# ----------------------------------------------------------------------------- dense BA

def _rot(w):
    """Complex-safe axis-angle to matrix (series near zero)."""
    th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=w.dtype)
    if abs(th2) < 1e-16:
        return np.eye(3, dtype=w.dtype) + K + 0.5 * K @ K
    th = np.sqrt(th2)
    return np.eye(3, dtype=w.dtype) + np.sin(th) / th * K + (1 - np.cos(th)) / th2 * K @ K


class DenseSolution:
    def __init__(self, transforms, points, cost, accepted_steps, costs):
        self.transforms = transforms      # list of (s, R, t)
        self.points = points
        self.cost = cost
        self.accepted_steps = accepted_steps
        self.costs = costs


def dense_ba_oracle(problem, max_iters=50, tol=1e-12, lam0=1e-3):
    """Plain Levenberg-Marquardt on the full dense normal equations.

    Jacobians come from complex-step differentiation of a from-scratch
    residual function; the damped system is factored by Cholesky. The
    damping schedule and stopping rules mirror the production solver so
    the two can be compared iterate by iterate. Raises SingularSystem when
    the damped matrix is not positive definite.
    """
    from ..errors import SingularSystem
    nS = len(problem.transforms)
    fixed_seg = set(problem.fixed_segments)
    free_seg = [j for j in range(nS) if j not in fixed_seg]
    free_pt = [i for i in range(len(problem.points)) if not problem.fixed_points[i]]
    n_par = 7 * len(free_seg) + 3 * len(free_pt)
    if n_par > 2000:
        raise ValueError(f"dense oracle limited to 2000 parameters, got {n_par}")
    state_T = [(T.s, T.R.copy(), T.t.copy()) for T in problem.transforms]
    X = problem.points.astype(float).copy()
    fr = problem.obs_frame
    Rf = np.array([problem.frame_poses[k].R for k in range(len(problem.frame_poses))])
    tf = np.array([problem.frame_poses[k].t for k in range(len(problem.frame_poses))])
    Kf = np.array([[c.fx, c.fy, c.cx, c.cy, c.k1, c.k2] for c in problem.intrinsics])
    segs = problem.frame_segment[fr]
    w = problem.weights

    def residual(Ts, P):
        dt = np.result_type(P.dtype, *(np.asarray(R).dtype for _, R, _ in Ts))
        sv = np.array([T[0] for T in Ts], dtype=dt)
        Rv = np.array([T[1] for T in Ts], dtype=dt)
        tv = np.array([T[2] for T in Ts], dtype=dt)
        Pm = P[problem.obs_point]
        Y = sv[segs, None] * np.einsum("mij,mj->mi", Rv[segs], Pm) + tv[segs]
        Zc = np.einsum("mij,mj->mi", Rf[fr], Y) + tf[fr]
        x, y = Zc[:, 0] / Zc[:, 2], Zc[:, 1] / Zc[:, 2]
        fx, fy, cx, cy, k1, k2 = Kf[fr].T
        r2 = x * x + y * y
        d = 1 + k1 * r2 + k2 * r2 * r2
        out = np.empty((len(fr), 2), dtype=dt)
        out[:, 0] = fx * d * x + cx - problem.obs_px[:, 0]
        out[:, 1] = fy * d * y + cy - problem.obs_px[:, 1]
        return out.ravel()

    def perturbed(Ts, P, theta):
        Ts = list(Ts)
        P = P.astype(theta.dtype)
        for k, j in enumerate(free_seg):
            d = theta[7 * k:7 * k + 7]
            s, R, t = Ts[j]
            E = _rot(d[:3])
            g = np.exp(d[6])
            Ts[j] = (g * s, E @ R, g * (E @ t) + d[3:6])
        off = 7 * len(free_seg)
        for k, i in enumerate(free_pt):
            P[i] = P[i] + theta[off + 3 * k:off + 3 * k + 3]
        return Ts, P

    def cost_of(Ts, P):
        r = residual(Ts, P).reshape(-1, 2)
        return float(np.dot(w, (r * r).sum(axis=1)))

    cost = cost_of(state_T, X)
    costs, accepted = [], 0
    lam = lam0
    h = 1e-30
    for _ in range(max_iters):
        r = residual(state_T, X)
        J = np.empty((len(r), n_par))
        for p in range(n_par):
            th = np.zeros(n_par, complex)
            th[p] = 1j * h
            Ts, P = perturbed(state_T, X, th)
            J[:, p] = residual(Ts, P).imag / h
        Wd = np.repeat(w, 2)
        H = J.T @ (Wd[:, None] * J)
        g = J.T @ (Wd * r)
        if not np.any(g) or cost == 0.0:
            break
        stepped = False
        while lam < 1e16:
            A = H + lam * np.diag(np.diag(H))
            try:
                L = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                raise SingularSystem("dense normal equations are not positive definite") from None
            delta = -np.linalg.solve(L.T, np.linalg.solve(L, g))
            Ts, P = perturbed(state_T, X, delta)
            Ts = [(float(s), np.real(R), np.real(t)) for s, R, t in Ts]
            c_new = cost_of(Ts, P.real)
            if c_new < cost:
                gain = (cost - c_new) / cost
                state_T, X, cost = Ts, P.real.copy(), c_new
                lam = max(lam * 0.1, 1e-15)
                accepted += 1
                costs.append(cost)
                stepped = True
                break
            lam *= 10.0
        if not stepped or gain < tol:
            break
    return DenseSolution(state_T, X, cost, accepted, costs)


# ----------------------------------------------------------------------------- sequences

def greedy_sequences_reference(counts):
    """Plain-loop version of the head/tail chain growth (lowest index wins ties)."""
    n = len(counts)
    c = [[max(counts[i][j], counts[j][i]) for j in range(n)] for i in range(n)]
    left = set(range(n))
    out = []
    while left:
        best = None
        for i in sorted(left):
            for j in sorted(left):
                if j > i and c[i][j] > 0 and (best is None or c[i][j] > best[0]):
                    best = (c[i][j], i, j)
        if best is None:
            out += [[i] for i in sorted(left)]
            break
        chain = [best[1], best[2]]
        left -= set(chain)
        while True:
            pick = None
            for k in sorted(left):
                for side, end in ((0, chain[0]), (1, chain[-1])):
                    if c[end][k] > 0 and (pick is None or c[end][k] > pick[0]):
                        pick = (c[end][k], k, side)
            if pick is None:
                break
            _, k, side = pick
            chain = [k] + chain if side == 0 else chain + [k]
            left.discard(k)
        out.append(chain)
    return out
