import warnings

import numpy as np
import pytest

from conftest import look_at, random_cost
from enft.cpt import (MatchingWeights, PairMatchResult, first_pass_match, illumination_ratio,
                      link_tracks, match_pair, select_keyframes, track_sequence)
from enft.cpt.linking import shared_counts
from enft.errors import InsufficientMatches, NoIntensitySource
from enft.features import FeatureTrack, FrameFeatures, normalize
from enft.geom import CameraIntrinsics, project_points
from enft.synth import two_plane_pair


def test_weights_derived():
    w = MatchingWeights()
    assert w.window_size == 121
    assert w.lambda_e == pytest.approx(0.3025, abs=1e-12)
    assert w.lambda_h == pytest.approx(121 * 0.01 / 100, abs=1e-12)
    w2 = MatchingWeights(sigma_e=1.0)
    assert w2.lambda_e == pytest.approx(1.21)
    with pytest.raises(ValueError):
        MatchingWeights(sigma_c=0)


# ---------------------------------------------------------------- cost and solver

def test_cost_gradient_matches_central_differences(rng):
    for _ in range(20):
        cost, _ = random_cost(rng)
        x = cost.initial_point() + rng.uniform(-1, 1, 2)
        g = cost.gradient(x)
        h = 1e-6
        fd = np.array([(cost.value(x + h * e) - cost.value(x - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_solver_never_increases_objective(rng):
    for _ in range(30):
        cost, _ = random_cost(rng)
        x, values, ok = cost.solve()
        assert ok
        assert all(b <= a for a, b in zip(values, values[1:]))
        # converged to a stationary point of the full objective
        g0 = np.linalg.norm(cost.gradient(cost.initial_point()))
        assert np.linalg.norm(cost.gradient(x)) <= 1e-2 * g0


def test_solver_starts_at_midpoint(rng):
    cost, _ = random_cost(rng)
    x0 = cost.initial_point()
    foot = cost.x_hat - (cost.l @ np.append(cost.x_hat, 1)) * cost.l[:2]
    assert np.allclose(x0, (cost.x_hat + foot) / 2)
    assert cost.epipolar_distance(x0) == pytest.approx(cost.epipolar_distance(cost.x_hat) / 2)


# ---------------------------------------------------------------- illumination

def _frames_with_images(img_a, img_b, pts):
    d = normalize(np.ones((len(pts), 64)))
    return (FrameFeatures(0, pts, d, image=img_a), FrameFeatures(1, pts, d, image=img_b))


def test_illumination_ratio_scaled(rng):
    img = rng.uniform(0.2, 0.6, size=(40, 40))
    pts = rng.uniform(2, 37, size=(15, 2))
    A, B = _frames_with_images(img, 1.2 * img, pts)
    idx = np.arange(15)
    assert illumination_ratio(A, B, idx, idx) == pytest.approx(1.2)
    A, B = _frames_with_images(img, img, pts)
    assert illumination_ratio(A, B, idx, idx) == pytest.approx(1.0)


def test_illumination_ratio_median():
    img_a = np.full((20, 20), 0.25)
    img_b = img_a.copy()
    img_b[:, 10:] = 0.5                     # ratio 2 on the right half
    pts = np.array([[2, 5], [4, 5], [6, 5], [14, 5], [16, 5]], float)
    A, B = _frames_with_images(img_a, img_b, pts)
    idx = np.arange(5)
    assert illumination_ratio(A, B, idx, idx) == pytest.approx(1.0)


def test_illumination_ratio_without_images_warns():
    A = FrameFeatures(0, np.zeros((1, 2)), np.ones((1, 64)) / 8)
    with pytest.warns(NoIntensitySource):
        assert illumination_ratio(A, A, [0], [0]) == 1.0


# ---------------------------------------------------------------- first pass

def _synthetic_pair(rng, n=500, sigma=0.05, outliers=0):
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
    X = rng.uniform([-3, -2, 5], [3, 2, 9], size=(n, 3))
    p1 = look_at([0, 0, 0], [0, 0, 7])
    p2 = look_at([0.7, 0.1, 0.1], [0, 0, 7])
    x1, _ = project_points(K, p1, X)
    x2, _ = project_points(K, p2, X)
    base = normalize(rng.normal(size=(n, 64)))
    A = FrameFeatures(0, x1, normalize(base + rng.normal(scale=sigma, size=base.shape)),
                      gt_ids=np.arange(n))
    perm = rng.permutation(n)
    B = FrameFeatures(1, x2[perm], normalize(base[perm] + rng.normal(scale=sigma, size=base.shape)),
                      gt_ids=perm)
    return A, B


def test_first_pass_identical_frames(rng):
    A, _ = _synthetic_pair(rng, n=60)
    res = first_pass_match(A, A)
    assert res.degenerate and res.F is None
    assert np.array_equal(res.idx_a, res.idx_b) and len(res) == 60


def test_first_pass_recall(rng):
    A, B = _synthetic_pair(rng)
    res = first_pass_match(A, B, threshold=3.0, rng=np.random.default_rng(0))
    correct = A.gt_ids[res.idx_a] == B.gt_ids[res.idx_b]
    assert correct.all()
    assert correct.sum() >= 0.95 * 500


def test_first_pass_high_noise_regime_yields_few_matches(rng):
    A, B = _synthetic_pair(rng, sigma=0.13)
    res = first_pass_match(A, B, rng=np.random.default_rng(0))
    assert 8 <= len(res) < 0.5 * 500


def test_first_pass_too_few_features(rng):
    A, B = _synthetic_pair(rng, n=7)
    with pytest.raises(InsufficientMatches):
        first_pass_match(A, B)


# ---------------------------------------------------------------- second pass

def _correct(pair, res):
    out = []
    for a, b in zip(res.idx_a, res.idx_b):
        g = pair.B.gt_ids[b]
        if g >= 0:
            out.append(g == pair.A.gt_ids[a])
        else:
            t = pair.truth_b[a]
            out.append(bool(np.isfinite(t).all()) and np.linalg.norm(pair.B.positions[b] - t) < 1.0)
    return np.array(out, bool)


@pytest.fixture(scope="module")
def planar_runs():
    out = {}
    for tau in (0.02, 0.06):
        pair = two_plane_pair(seed=0)
        res = match_pair(pair.A, pair.B, MatchingWeights(tau_c=tau), rng=np.random.default_rng(0))
        out[tau] = (pair, res)
    return out


def test_second_pass_recovers_dropped_features(planar_runs):
    pair, res = planar_runs[0.02]
    visible = ~pair.occluded
    first = res.passes == 0
    dropped = visible.copy()
    dropped[res.idx_a[first]] = False
    ok = _correct(pair, res)
    recovered = np.zeros(len(pair.A), bool)
    recovered[res.idx_a[(~first) & ok]] = True
    assert res.illumination == pytest.approx(1.1, abs=0.01)
    assert (recovered & dropped).sum() >= 0.9 * dropped.sum()


def test_second_pass_gates_hold_on_recheck(planar_runs):
    from enft.cpt.matching import normalized_line
    for tau, (pair, res) in planar_runs.items():
        w = MatchingWeights(tau_c=tau)
        for c in res.second_pass:
            x = pair.A.positions[c.idx_a]
            H = res.homographies[c.plane]
            x_hat = H.apply(x)
            l = normalized_line(res.F.line_in_second(x))
            assert abs(l @ np.append(c.position, 1)) <= w.tau_e
            assert np.linalg.norm(c.position - x_hat) <= w.tau_h
            assert c.sad <= w.tau_c * w.window_size


def test_smaller_color_threshold_removes_outliers(planar_runs):
    pair_lo, lo = planar_runs[0.02]
    pair_hi, hi = planar_runs[0.06]
    assert len(lo) < len(hi)
    bad_lo = (~_correct(pair_lo, lo)).sum()
    bad_hi = (~_correct(pair_hi, hi)).sum()
    assert bad_lo < bad_hi
    assert bad_lo <= 0.2 * bad_hi


def test_occluded_correspondence_rejected_by_color_gate():
    from enft.cpt.matching import search_feature
    pair = two_plane_pair(seed=0)
    res = match_pair(pair.A, pair.B, MatchingWeights(), rng=np.random.default_rng(0))
    board = pair.scene.boards[0]
    w = MatchingWeights()
    # occluded features whose whole window in B lands well inside the board
    inner = []
    for i in np.flatnonzero(pair.occluded):
        X = pair.points[i]
        C = pair.pose_b.center
        l = (board.z - C[2]) / (X - C)[2]
        P = C + l * (X - C)
        if board.x0 + 0.15 < P[0] < board.x1 - 0.15 and board.y0 + 0.15 < P[1] < board.y1 - 0.15:
            inner.append(i)
    assert len(inner) >= 5
    for i in inner:
        assert i not in set(res.idx_a.tolist())
        c = search_feature(pair.A, pair.B, i, res.F, res.homographies, res.illumination, w)
        if c is not None:
            assert c.sad > w.tau_c * w.window_size


def test_second_pass_geometric_mode():
    pair = two_plane_pair(seed=1, descriptor_sigma=0.10)
    pair.A.image = None
    pair.B.image = None
    res = match_pair(pair.A, pair.B, rng=np.random.default_rng(0))
    assert res.mode == "geometric"
    second = res.passes == 1
    assert second.sum() > 0
    ok = _correct(pair, res)
    assert ok[second].mean() >= 0.95


# ---------------------------------------------------------------- linking

def _pair(a, b, ia, ib, passes=None, costs=None):
    ia, ib = np.asarray(ia), np.asarray(ib)
    return PairMatchResult(a, b, ia, ib, np.zeros(len(ia), int) if passes is None else np.asarray(passes),
                           np.zeros(len(ia)) if costs is None else np.asarray(costs, float))


def test_link_chain():
    k = 6
    pairs = [_pair(t, t + 1, [0], [0]) for t in range(k)]
    tracks = link_tracks(pairs)
    assert len(tracks) == 1 and len(tracks[0]) == k + 1


def test_link_dropout_breaks_track():
    pairs = [_pair(0, 1, [0], [0]), _pair(1, 2, [], []), _pair(2, 3, [0], [0])]
    tracks = link_tracks(pairs)
    assert [t.frames for t in tracks] == [[0, 1], [2, 3]]


def test_link_two_past_bridges_dropout():
    pairs = [_pair(0, 1, [0], [0]), _pair(1, 3, [0], [2]), _pair(3, 4, [2], [1])]
    tracks = link_tracks(pairs)
    assert len(tracks) == 1 and tracks[0].observations == {0: 0, 1: 0, 3: 2, 4: 1}


def test_link_conflict_keeps_lower_cost():
    # feature 0 of frame 2 claimed by frame-1 features 0 and 1 via different routes
    pairs = [_pair(0, 1, [0, 1], [0, 1]), _pair(1, 2, [0, 1], [0, 0], passes=[1, 1], costs=[0.01, 0.005])]
    tracks = link_tracks(pairs)
    owner = [t for t in tracks if 2 in t.observations][0]
    assert owner.observations == {0: 1, 1: 1, 2: 0}


def test_link_order_invariant(rng):
    from enft.synth import SceneSpec, generate
    d = generate(SceneSpec(trajectory="arc", n_frames=10, n_points=150, dropout=0.1), 3)
    r = track_sequence(d.frames, seed=0)
    ref = [(t.observations, t.track_id) for t in link_tracks(r.pairs)]
    for _ in range(3):
        order = rng.permutation(len(r.pairs))
        got = [(t.observations, t.track_id) for t in link_tracks([r.pairs[i] for i in order])]
        assert got == ref


def test_track_sequence_on_arc_is_pure():
    from enft.synth import SceneSpec, generate
    d = generate(SceneSpec(trajectory="arc", n_frames=12, n_points=200, dropout=0.05,
                           pixel_sigma=0.3), 5)
    r = track_sequence(d.frames, seed=0)
    fm = d.frame_map()
    assert not r.failed
    for t in r.tracks:
        assert len({fm[f].gt_ids[i] for f, i in t.observations.items()}) == 1
    assert np.mean([len(t) for t in r.tracks]) > 5


# ---------------------------------------------------------------- keyframes

def _tracks(spans):
    return [FeatureTrack(i, {f: 0 for f in range(a, b + 1)}) for i, (a, b) in enumerate(spans)]


def test_keyframes_full_overlap():
    tracks = _tracks([(0, 19)] * 150)
    assert select_keyframes(tracks, range(20), 100, 50) == [0, 19]


def test_keyframes_no_overlap():
    tracks = _tracks([(f, f) for f in range(10)])
    assert select_keyframes(tracks, range(10), 100, 50) == list(range(10))


def test_keyframes_validate_thresholds():
    with pytest.raises(ValueError):
        select_keyframes([], range(3), 50, 50)


def _oracle_keyframes(tracks, n, m1, m2):
    inc = shared_counts(tracks, list(range(n))).astype(int)
    N1 = inc @ inc.T

    def farthest(ok_from):
        # largest j such that every frame in (start, j] passes
        j = ok_from
        while j + 1 < n and ok(j + 1):
            j += 1
        return j

    keys = [0]
    ok = lambda j: N1[0, j] >= m1
    if n > 1:
        keys.append(farthest(1) if ok(1) else 1)
    while keys[-1] < n - 1:
        i1, i2 = keys[-2], keys[-1]
        N2 = (inc[i1] * inc[i2]) @ inc.T
        ok = lambda j: N1[i1, j] >= m1 and N2[j] >= m2
        keys.append(farthest(i2 + 1) if ok(i2 + 1) else i2 + 1)
    return keys


def test_keyframes_match_rule_oracle(rng):
    n = 300
    starts = rng.integers(-30, n, size=6000)
    lens = rng.integers(5, 60, size=6000)
    spans = [(max(0, s), min(n - 1, s + l)) for s, l in zip(starts, lens) if s + l > 0 and s < n]
    tracks = _tracks(spans)
    got = select_keyframes(tracks, range(n), 100, 50)
    assert got == _oracle_keyframes(tracks, n, 100, 50)
    assert 2 < len(got) < n
