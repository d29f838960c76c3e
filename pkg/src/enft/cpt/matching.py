"""Two-pass matching between a frame and its successor.

First pass: descriptor ratio matching filtered by a robust fundamental
matrix. Second pass: for the remaining features, planar-motion-guided search
that minimizes a windowed intensity cost plus epipolar and homography
penalties, followed by three rejection gates.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DegenerateConfiguration, InsufficientMatches, NoIntensitySource
from ..features import FrameFeatures, match_2nn
from ..geom import FundamentalMatrix, Homography, estimate_fundamental_ransac
from ..geom.homography import estimate_homographies_multi_ransac

FIRST, SECOND = 0, 1


@dataclass(frozen=True)
class MatchingWeights:
    sigma_c: float = 0.1
    sigma_e: float = 2.0
    sigma_h: float = 10.0
    w: int = 5
    tau_c: float = 0.02
    tau_e: float = 2.0
    tau_h: float = 10.0

    def __post_init__(self):
        for name in ("sigma_c", "sigma_e", "sigma_h", "tau_c", "tau_e", "tau_h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.w < 1:
            raise ValueError("window half-width must be >= 1")

    @property
    def window_size(self) -> int:
        return (2 * self.w + 1) ** 2

    @property
    def lambda_e(self) -> float:
        return self.window_size * self.sigma_c ** 2 / self.sigma_e ** 2

    @property
    def lambda_h(self) -> float:
        return self.window_size * self.sigma_c ** 2 / self.sigma_h ** 2


@dataclass
class PairMatchResult:
    frame_a: int
    frame_b: int
    idx_a: np.ndarray
    idx_b: np.ndarray
    passes: np.ndarray             # FIRST / SECOND per match
    costs: np.ndarray              # descriptor distance (first) or mean |diff| (second)
    F: FundamentalMatrix | None = None
    homographies: list = field(default_factory=list)
    illumination: float = 1.0
    degenerate: bool = False
    mode: str = "image"            # "image" or "geometric" for the second pass
    second_pass: list = field(default_factory=list)

    @property
    def matches(self):
        tag = ("first", "second")
        return [(int(a), int(b), tag[p]) for a, b, p in zip(self.idx_a, self.idx_b, self.passes)]

    def __len__(self):
        return len(self.idx_a)


# ----------------------------------------------------------------------------- sampling

def sample_bilinear(img, x, y, grad=False):
    """Bilinear lookup at float coordinates; optional exact derivative of the interpolant."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.000001)
    y = np.clip(y, 0.0, h - 1.000001)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    I00 = img[y0, x0]
    I01 = img[y0, x0 + 1]
    I10 = img[y0 + 1, x0]
    I11 = img[y0 + 1, x0 + 1]
    top = I00 + fx * (I01 - I00)
    bot = I10 + fx * (I11 - I10)
    v = top + fy * (bot - top)
    if not grad:
        return v
    gx = (1 - fy) * (I01 - I00) + fy * (I11 - I10)
    gy = bot - top
    return v, gx, gy


def window_offsets(w):
    r = np.arange(-w, w + 1, dtype=float)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.column_stack([dx.ravel(), dy.ravel()])


def normalized_line(l):
    l = np.asarray(l, dtype=float)
    n = np.hypot(l[0], l[1])
    return l / n


def project_to_line(x, l):
    return x - (l[0] * x[0] + l[1] * x[1] + l[2]) * l[:2]


# ----------------------------------------------------------------------------- cost

class MatchingCost:
    """S(x) = sum_W (T - I_B(x + y))^2 + lam_e d(x, l)^2 + lam_h |x_hat - x|^2.

    ``template`` holds the rectified, illumination-scaled window of frame A
    centred at ``x_hat``; ``line`` is the epipolar line of the feature in B.
    """

    def __init__(self, template, image, line, x_hat, weights: MatchingWeights):
        self.T = np.asarray(template, dtype=float)
        self.img = image
        self.l = normalized_line(line)
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.lam_e = weights.lambda_e
        self.lam_h = weights.lambda_h
        self.offsets = window_offsets(weights.w)
        self.w = weights.w

    def inside(self, x) -> bool:
        h, wd = self.img.shape
        m = self.w + 1
        return m <= x[0] <= wd - 1 - m and m <= x[1] <= h - 1 - m

    def _residual(self, x, grad=False):
        p = x + self.offsets
        if grad:
            v, gx, gy = sample_bilinear(self.img, p[:, 0], p[:, 1], grad=True)
            return self.T - v, np.column_stack([gx, gy])
        return self.T - sample_bilinear(self.img, p[:, 0], p[:, 1])

    def epipolar_distance(self, x) -> float:
        return float(abs(self.l[0] * x[0] + self.l[1] * x[1] + self.l[2]))

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        r = self._residual(x)
        d = self.l[0] * x[0] + self.l[1] * x[1] + self.l[2]
        return float(r @ r + self.lam_e * d * d + self.lam_h * np.sum((x - self.x_hat) ** 2))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r, g = self._residual(x, grad=True)
        d = self.l[0] * x[0] + self.l[1] * x[1] + self.l[2]
        return -2.0 * (g.T @ r) + 2.0 * self.lam_e * d * self.l[:2] + 2.0 * self.lam_h * (x - self.x_hat)

    def sad(self, x) -> float:
        return float(np.abs(self._residual(np.asarray(x, dtype=float))).sum())

    def initial_point(self) -> np.ndarray:
        return 0.5 * (self.x_hat + project_to_line(self.x_hat, self.l))

    def solve(self, x0=None, max_iters=20, tol=0.01, max_halvings=10):
        """Gauss-Newton from the linearized intensity term, with step halving.

        Returns ``(x, values, ok)``; ``values`` lists the objective at each
        accepted iterate and never increases.
        """
        x = self.initial_point() if x0 is None else np.asarray(x0, dtype=float)
        if not self.inside(x):
            return x, [], False
        n = self.l[:2]
        f = self.value(x)
        values = [f]
        for _ in range(max_iters):
            r, g = self._residual(x, grad=True)
            d = n @ x + self.l[2]
            H = g.T @ g + self.lam_e * np.outer(n, n) + self.lam_h * np.eye(2)
            b = g.T @ r - self.lam_e * d * n - self.lam_h * (x - self.x_hat)
            try:
                step = np.linalg.solve(H, b)
            except np.linalg.LinAlgError:
                break
            accepted = False
            for _ in range(max_halvings):
                xn = x + step
                if self.inside(xn):
                    fn = self.value(xn)
                    if fn <= f:
                        accepted = True
                        break
                step = 0.5 * step
            if not accepted:
                break
            x, f = xn, fn
            values.append(f)
            if np.linalg.norm(step) < tol:
                break
        return x, values, True


# ----------------------------------------------------------------------------- passes

def first_pass_match(A: FrameFeatures, B: FrameFeatures, ratio=0.8, threshold=2.0,
                     max_iters=2000, rng=None) -> PairMatchResult:
    """Descriptor 2NN matching filtered to inliers of a RANSAC fundamental matrix.

    Raises InsufficientMatches when fewer than 8 inliers remain. A pair whose
    correspondences carry no parallax information (e.g. identical frames) keeps
    all ratio-test matches and is flagged ``degenerate`` with ``F = None``.
    """
    if len(A) < 8 or len(B) < 8:
        raise InsufficientMatches(f"frames {A.frame_id}/{B.frame_id}: need >= 8 features each")
    ia, ib, dist = match_2nn(A.descriptors, B.descriptors, ratio)
    if len(ia) < 8:
        raise InsufficientMatches(f"frames {A.frame_id}/{B.frame_id}: {len(ia)} ratio-test matches")
    x1, x2 = A.positions[ia], B.positions[ib]
    try:
        F, mask = estimate_fundamental_ransac(x1, x2, threshold, max_iters, rng=rng)
    except DegenerateConfiguration:
        return PairMatchResult(A.frame_id, B.frame_id, ia, ib, np.zeros(len(ia), int), dist,
                               None, degenerate=True)
    if mask.sum() < 8:
        raise InsufficientMatches(f"frames {A.frame_id}/{B.frame_id}: {int(mask.sum())} inliers")
    return PairMatchResult(A.frame_id, B.frame_id, ia[mask], ib[mask],
                           np.zeros(int(mask.sum()), int), dist[mask], F)


def illumination_ratio(A: FrameFeatures, B: FrameFeatures, idx_a, idx_b) -> float:
    """Median of I_B / I_A at matched feature positions (1.0 without images)."""
    if A.image is None or B.image is None:
        warnings.warn("no intensity source, illumination ratio defaults to 1", NoIntensitySource)
        return 1.0
    pa, pb = A.positions[idx_a], B.positions[idx_b]
    ia = sample_bilinear(A.image, pa[:, 0], pa[:, 1])
    ib = sample_bilinear(B.image, pb[:, 0], pb[:, 1])
    ok = ia > 1e-6
    if not ok.any():
        return 1.0
    return float(np.median(ib[ok] / ia[ok]))


@dataclass
class SecondPassCandidate:
    idx_a: int
    position: np.ndarray
    sad: float                # sum of absolute differences over the window
    epipolar: float
    homography_shift: float
    plane: int
    idx_b: int = -1

    def passes_gates(self, weights: MatchingWeights) -> bool:
        return (self.sad <= weights.tau_c * weights.window_size
                and self.epipolar <= weights.tau_e
                and self.homography_shift <= weights.tau_h)


def rectified_template(A: FrameFeatures, H: np.ndarray, x_hat, illumination, w):
    """L * I_A(H^-1 (x_hat + y)) over the window; None when it leaves image A."""
    q = window_offsets(w) + x_hat
    Hinv = np.linalg.inv(H)
    p = np.column_stack([q, np.ones(len(q))]) @ Hinv.T
    src = p[:, :2] / p[:, 2:3]
    h, wd = A.image.shape
    if (src < 0).any() or (src[:, 0] > wd - 1).any() or (src[:, 1] > h - 1).any():
        return None
    return illumination * sample_bilinear(A.image, src[:, 0], src[:, 1])


def search_feature(A: FrameFeatures, B: FrameFeatures, i, F: FundamentalMatrix, homographies,
                   illumination, weights: MatchingWeights):
    """Best candidate for feature ``i`` of A over all admissible homographies, or None."""
    x = A.positions[i]
    l = F.line_in_second(x)
    if np.hypot(l[0], l[1]) < 1e-12:
        return None
    l = normalized_line(l)
    best = None
    for k, Hk in enumerate(homographies):
        H = Hk.H
        p = H @ np.array([x[0], x[1], 1.0])
        x_hat = p[:2] / p[2]
        if abs(l @ np.array([x_hat[0], x_hat[1], 1.0])) > weights.tau_e:
            continue
        T = rectified_template(A, H, x_hat, illumination, weights.w)
        if T is None:
            continue
        cost = MatchingCost(T, B.image, l, x_hat, weights)
        xb, _, ok = cost.solve()
        if not ok:
            continue
        cand = SecondPassCandidate(int(i), xb, cost.sad(xb), cost.epipolar_distance(xb),
                                   float(np.linalg.norm(xb - x_hat)), k)
        if best is None or cand.sad < best.sad:
            best = cand
    return best


def geometric_candidate(A: FrameFeatures, B: FrameFeatures, i, F, homographies, weights,
                        free_b, tree, ratio=0.8, max_distance=0.9):
    """Image-free fallback: minimize the two geometric terms and pick a B feature
    within both gates by descriptor distance (ratio-tested among the candidates)."""
    x = A.positions[i]
    l = F.line_in_second(x)
    if np.hypot(l[0], l[1]) < 1e-12:
        return None
    l = normalized_line(l)
    best = None
    for k, Hk in enumerate(homographies):
        x_hat = Hk.apply(x)
        d = l @ np.array([x_hat[0], x_hat[1], 1.0])
        if abs(d) > weights.tau_e:
            continue
        near = [j for j in tree.query_ball_point(x_hat, weights.tau_h) if free_b[j]]
        near = [j for j in near if abs(l @ np.append(B.positions[j], 1.0)) <= weights.tau_e]
        if not near:
            continue
        dd = np.linalg.norm(B.descriptors[near] - A.descriptors[i], axis=1)
        order = np.argsort(dd, kind="stable")
        j = near[order[0]]
        if dd[order[0]] > max_distance or (len(near) > 1 and dd[order[0]] >= ratio * dd[order[1]]):
            continue
        pb = B.positions[j]
        cand = SecondPassCandidate(int(i), pb, float(dd[order[0]]), float(abs(l @ np.append(pb, 1.0))),
                                   float(np.linalg.norm(pb - x_hat)), k, int(j))
        if best is None or cand.sad < best.sad:
            best = cand
    return best


def second_pass_match(A: FrameFeatures, B: FrameFeatures, first: PairMatchResult,
                      weights: MatchingWeights = MatchingWeights(), snap_radius=2.0,
                      append_new=True):
    """Recover matches for features the first pass left out.

    Returns ``(accepted, mode)`` where ``accepted`` is a list of
    :class:`SecondPassCandidate` with ``idx_b`` set. Accepted locations snap to
    a free feature of B within ``snap_radius``; otherwise (image mode only) a
    new feature is appended to B when ``append_new``.
    """
    if first.F is None or not first.homographies:
        return [], "none"
    geometric = A.image is None or B.image is None
    matched_a = np.zeros(len(A), bool)
    matched_a[first.idx_a] = True
    free_b = np.ones(len(B), bool)
    free_b[first.idx_b] = False
    tree = cKDTree(B.positions) if len(B) else None
    cands = []
    for i in np.flatnonzero(~matched_a):
        if geometric:
            c = geometric_candidate(A, B, i, first.F, first.homographies, weights, free_b, tree)
        else:
            c = search_feature(A, B, i, first.F, first.homographies, first.illumination, weights)
        if c is None or (not geometric and not c.passes_gates(weights)):
            continue
        cands.append(c)
    cands.sort(key=lambda c: (c.sad, c.idx_a))
    accepted, claimed = [], []
    for c in cands:
        if geometric:
            if not free_b[c.idx_b]:
                continue
        else:
            if claimed and np.min(np.linalg.norm(np.asarray(claimed) - c.position, axis=1)) < snap_radius:
                continue
            if tree is not None:
                near = [j for j in tree.query_ball_point(c.position, snap_radius) if free_b[j]]
                if near:
                    dist = np.linalg.norm(B.positions[near] - c.position, axis=1)
                    c.idx_b = int(near[int(np.argmin(dist))])
            if c.idx_b < 0 and not append_new:
                continue
        if c.idx_b >= 0:
            free_b[c.idx_b] = False
        claimed.append(c.position)
        accepted.append(c)
    if append_new and not geometric:
        new = [c for c in accepted if c.idx_b < 0]
        if new:
            idx = B.append(np.array([c.position for c in new]),
                           A.descriptors[[c.idx_a for c in new]])
            for c, j in zip(new, idx):
                c.idx_b = int(j)
            free_b = np.concatenate([free_b, np.zeros(len(idx), bool)])
    accepted.sort(key=lambda c: c.idx_a)
    return accepted, "geometric" if geometric else "image"


def match_pair(A: FrameFeatures, B: FrameFeatures, weights: MatchingWeights = MatchingWeights(),
               ratio=0.8, ransac_threshold=2.0, second_pass=True, append_new=True, rng=None,
               max_planes=8, min_remaining=12, homography_threshold=3.0) -> PairMatchResult:
    """Both passes for one frame pair."""
    res = first_pass_match(A, B, ratio, ransac_threshold, rng=rng)
    if res.degenerate or not second_pass:
        return res
    planes = estimate_homographies_multi_ransac(A.positions[res.idx_a], B.positions[res.idx_b],
                                                max_planes, min_remaining, homography_threshold,
                                                rng=rng)
    res.homographies = [H for H, _ in planes]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoIntensitySource)
        res.illumination = illumination_ratio(A, B, res.idx_a, res.idx_b)
    extra, res.mode = second_pass_match(A, B, res, weights, append_new=append_new)
    if extra:
        res.idx_a = np.concatenate([res.idx_a, [c.idx_a for c in extra]]).astype(int)
        res.idx_b = np.concatenate([res.idx_b, [c.idx_b for c in extra]]).astype(int)
        res.passes = np.concatenate([res.passes, np.ones(len(extra), int)])
        res.costs = np.concatenate([res.costs, [c.sad / weights.window_size for c in extra]])
    res.second_pass = extra
    return res
