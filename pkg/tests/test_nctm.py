from collections import defaultdict

import numpy as np
import pytest

from enft.errors import InsufficientMatches
from enft.features import FeatureTrack, FrameFeatures, normalize
from enft.geom import fundamental_from_poses, project_points
from enft.nctm import (MatchMatrix, NCTMParams, TrackIndex, build_vocab_tree, count_matrix,
                       init_match_matrix, load_pgm, long_tracks, match_frame_pair, nctm_main,
                       resolve_votes, run_nctm)
from enft.nctm.main import TrackPairSet
from enft.synth import SceneSpec, fragment_tracks, generate
from enft.synth.oracles import brute_force_track_merge


@pytest.fixture(scope="module")
def loop():
    data = generate(SceneSpec(trajectory="loop", n_frames=100, n_points=1500, loop_overlap=0.15), 7)
    tracks, owner = fragment_tracks(data)
    return data, tracks, owner


def _tracks_from_desc(desc, frames_per_track=None):
    out = []
    for i, d in enumerate(desc):
        obs = {f: 0 for f in (frames_per_track[i] if frames_per_track else [i])}
        out.append(FeatureTrack(i, obs, normalize(d)))
    return out


def _true_pairs(owner):
    by = defaultdict(list)
    for tid, o in enumerate(owner):
        by[int(o)].append(tid)
    return {(a, b) for ids in by.values() for i, a in enumerate(ids) for b in ids[i + 1:]}


def _recall(groups, pairs):
    g = {t: k for k, grp in enumerate(groups) for t in grp}
    return sum(g[a] == g[b] for a, b in pairs) / max(len(pairs), 1)


def _false_groups(groups, owner):
    return sum(len({int(owner[t]) for t in g}) > 1 for g in groups)


# ----------------------------------------------------------------------------- vocabulary tree

def test_identical_descriptors_single_leaf():
    tracks = _tracks_from_desc(np.tile(np.eye(64)[0], (40, 1)))
    tree = build_vocab_tree(tracks, 8, 4)
    assert len(tree) == 1 and len(next(iter(tree.leaves.values()))) == 40


def test_separated_clusters_become_leaves():
    rng = np.random.default_rng(0)
    c = normalize(rng.normal(size=(2, 64)))
    desc = np.vstack([c[0] + 0.01 * rng.normal(size=(30, 64)), c[1] + 0.01 * rng.normal(size=(25, 64))])
    tree = build_vocab_tree(_tracks_from_desc(desc), branching=2, depth=1, seed=3)
    assert sorted(map(sorted, tree.leaves.values())) == [list(range(30)), list(range(30, 55))]


def test_vocab_tree_deterministic_and_covering():
    rng = np.random.default_rng(1)
    tracks = _tracks_from_desc(rng.normal(size=(500, 64)))
    a = build_vocab_tree(tracks, 4, 3, seed=5)
    b = build_vocab_tree(tracks, 4, 3, seed=5)
    assert a.leaves == b.leaves
    assert sorted(t for m in a.leaves.values() for t in m) == list(range(500))
    assert all(len(p) <= 3 for p in a.leaves)


def test_too_few_tracks_single_leaf():
    rng = np.random.default_rng(2)
    tree = build_vocab_tree(_tracks_from_desc(rng.normal(size=(5, 64))), branching=8)
    assert list(tree.leaves) == [()]


def test_long_tracks_filter():
    ts = [FeatureTrack(0, {f: 0 for f in range(10)}), FeatureTrack(1, {0: 0, 2: 0, 4: 0})]
    assert [t.track_id for t in long_tracks(ts, [0, 2, 4, 6, 8], 5)] == [0]


# ----------------------------------------------------------------------------- initial matrix

def test_init_matrix_single_pair():
    d = np.eye(64)[0]
    tracks = [FeatureTrack(0, {1: 0, 2: 0}, d), FeatureTrack(1, {10: 0, 11: 0}, d)]
    tree = build_vocab_tree(tracks)
    M = init_match_matrix(tree, tracks, list(range(15)))
    nz = sorted(zip(*np.nonzero(M.values)))
    assert nz == sorted([(1, 10), (1, 11), (2, 10), (2, 11), (10, 1), (11, 1), (10, 2), (11, 2)])
    assert np.all(M.values[M.values > 0] == 1)


def test_init_matrix_empty_when_no_pairs():
    tracks = _tracks_from_desc(np.eye(64)[:20])
    M = init_match_matrix(build_vocab_tree(tracks, 2, 2), tracks, list(range(20)))
    assert not M.values.any() and M.is_symmetric()


def test_init_matrix_matches_bruteforce_coleaf_count(loop):
    data, tracks, _ = loop
    kf = [f.frame_id for f in data.frames]
    tree = build_vocab_tree(long_tracks(tracks, kf), 8, 4)
    M = init_match_matrix(tree, tracks, kf)
    by = {t.track_id: t for t in tracks}
    ref = np.zeros((len(kf), len(kf)))
    for members in tree.leaves.values():
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                ta, tb = by[a], by[b]
                if set(ta.observations) & set(tb.observations):
                    continue
                if np.linalg.norm(ta.mean_descriptor - tb.mean_descriptor) >= 0.5:
                    continue
                for f in ta.observations:
                    for g in tb.observations:
                        ref[f, g] += 1
                        ref[g, f] += 1
    idx = np.arange(len(kf))
    ref[np.abs(np.subtract.outer(idx, idx)) <= 1] = 0
    assert np.array_equal(M.values, ref)
    assert M.is_symmetric()
    # loop closure shows up far from the diagonal
    i, j = np.unravel_index(np.argmax(M.values), M.values.shape)
    assert abs(i - j) > 70


def test_pgm_roundtrip(tmp_path):
    M = MatchMatrix(range(6), np.arange(36, dtype=float).reshape(6, 6), band=0)
    M.values = M.values + M.values.T
    M.save_pgm(tmp_path / "m.pgm")
    img = load_pgm(tmp_path / "m.pgm")
    assert img.shape == (6, 6) and img.max() == 255
    assert np.array_equal(img, np.round(255 * M.values / M.values.max()).astype(np.uint8))


# ----------------------------------------------------------------------------- frame-pair matching

def _split_two_frame(data, t1, t2):
    """Per-frame tracks for frames t1 and t2 (ids offset by frame) plus the true pairs."""
    frames = data.frame_map()
    tracks, pairs = [], []
    for f in (t1, t2):
        for i, g in enumerate(frames[f].gt_ids):
            tracks.append(FeatureTrack(f * 100000 + i, {f: i}, frames[f].descriptors[i]))
    pos2 = {int(g): i for i, g in enumerate(frames[t2].gt_ids)}
    for i, g in enumerate(frames[t1].gt_ids):
        if int(g) in pos2:
            pairs.append((t1 * 100000 + i, t2 * 100000 + pos2[int(g)]))
    return frames, tracks, pairs


def test_guided_recovers_f_and_remaining_tracks(loop):
    data, _, _ = loop
    t1, t2 = 4, 90
    frames, tracks, pairs = _split_two_frame(data, t1, t2)
    assert len(pairs) > 100
    rng = np.random.default_rng(0)
    prior = [pairs[k] for k in rng.choice(len(pairs), 60, replace=False)]
    res = match_frame_pair(TrackIndex.build(tracks, frames), t1, t2, "guided", prior,
                           rng=np.random.default_rng(1))
    Ft = fundamental_from_poses(data.intrinsics.K, data.poses[t1], data.intrinsics.K, data.poses[t2])
    F = res.F.F
    assert min(np.abs(F - Ft).max(), np.abs(F + Ft).max()) < 1e-6
    truth = set(pairs)
    new = set(res.pairs) - set(prior)
    remaining = truth - set(prior)
    assert len(new & remaining) >= 0.9 * len(remaining)
    assert not new - truth


def test_no_common_content_raises():
    rng = np.random.default_rng(3)
    fa = FrameFeatures(0, rng.uniform(0, 600, (80, 2)), normalize(rng.normal(size=(80, 64))))
    fb = FrameFeatures(5, rng.uniform(0, 600, (80, 2)), normalize(rng.normal(size=(80, 64))))
    frames = {0: fa, 5: fb}
    tracks = [FeatureTrack(i, {0: i}, fa.descriptors[i]) for i in range(80)]
    tracks += [FeatureTrack(100 + i, {5: i}, fb.descriptors[i]) for i in range(80)]
    with pytest.raises(InsufficientMatches):
        match_frame_pair(TrackIndex.build(tracks, frames), 0, 5, "fresh_2nn",
                         rng=np.random.default_rng(0))
    with pytest.raises(InsufficientMatches):
        match_frame_pair(TrackIndex.build(tracks, frames), 0, 5, "guided", [])


def test_guided_ratio_gate_on_repeated_candidates(two_view, intrinsics):
    X, pose1, pose2, x1, x2 = two_view
    rng = np.random.default_rng(4)
    desc = normalize(rng.normal(size=(100, 64)))
    desc_b = normalize(desc + 0.05 * rng.normal(size=desc.shape))
    F = fundamental_from_poses(intrinsics.K, pose1, intrinsics.K, pose2)
    target = 90
    # a distractor in frame 2 on the target's epipolar line, 30 px from the true point
    l = F @ np.array([*x1[target], 1.0])
    along = np.array([l[1], -l[0]]) / np.hypot(l[0], l[1])
    distractor = x2[target] + 30 * along

    def run(distractor_desc):
        fa = FrameFeatures(0, x1, desc)
        fb = FrameFeatures(1, np.vstack([x2, distractor]), np.vstack([desc_b, distractor_desc]))
        frames = {0: fa, 1: fb}
        tracks = [FeatureTrack(i, {0: i}, desc[i]) for i in range(100)]
        tracks += [FeatureTrack(1000 + i, {1: i}, fb.descriptors[i]) for i in range(101)]
        prior = [(i, 1000 + i) for i in range(60)]
        res = match_frame_pair(TrackIndex.build(tracks, frames), 0, 1, "guided", prior,
                               rng=np.random.default_rng(0))
        return dict(res.pairs)

    # near-duplicate texture: best and second best too close, no match for the target
    dup = normalize(desc[target] + 0.05 * rng.normal(size=64))
    assert target not in run(dup)
    # distinct distractor: best descriptor wins
    got = run(normalize(rng.normal(size=64)))
    assert got[target] == 1000 + target
    assert all(got[i] == 1000 + i for i in got)


# ----------------------------------------------------------------------------- main procedure

def test_revisit_recall_and_precision(loop):
    data, tracks, owner = loop
    fm = data.frame_map()
    kf = [f.frame_id for f in data.frames]
    res = run_nctm(tracks, fm, kf)
    truth = _true_pairs(owner)
    assert _recall(res.merge_groups, truth) >= 0.95
    assert _false_groups(res.merge_groups, owner) == 0
    for t in res.tracks:
        assert len(set(t.observations)) == len(t.observations)
    assert res.final.is_symmetric()


def test_oracle_dominates_nctm(loop):
    data, tracks, owner = loop
    fm = data.frame_map()
    kf = [f.frame_id for f in data.frames][::2]
    res = run_nctm(tracks, fm, kf)
    groups, n = brute_force_track_merge(tracks, fm, kf)
    truth = _true_pairs(owner)
    assert _recall(groups, truth) >= _recall(res.merge_groups, truth)
    assert res.n_matchings <= n


def test_disjoint_sequences_no_merge():
    spec = SceneSpec(trajectory="multi", n_sequences=2, n_frames=30, n_points=1200,
                     sequence_span=0.3)
    data = generate(spec, 2)
    # keep the sequences on opposite halves by using points seen by only one of them
    tracks, owner = fragment_tracks(data)
    seen = defaultdict(set)
    seq_of = {f: s for s, ids in enumerate(data.sequences) for f in ids}
    for t, o in zip(tracks, owner):
        seen[int(o)] |= {seq_of[f] for f in t.observations}
    keep = [k for k, o in enumerate(owner) if len(seen[int(o)]) == 1]
    sub = [tracks[k] for k in keep]
    for i, t in enumerate(sub):
        t.track_id = i
    res = run_nctm(sub, data.frame_map(), [f.frame_id for f in data.frames])
    assert all(len(g) == 1 for g in res.merge_groups)


def test_incremental_mstar_matches_recount(loop):
    data, tracks, _ = loop
    fm = data.frame_map()
    kf = [f.frame_id for f in data.frames][:40] + [f.frame_id for f in data.frames][-20:]
    sub = [t for t in tracks if set(t.observations) & set(kf)]
    res = run_nctm(sub, fm, kf)
    by = {t.track_id: t for t in sub}
    live = res.votes.matched()
    ref = count_matrix(live, by, kf, res.updating.band).values
    idx = {f: i for i, f in enumerate(kf)}
    for t1, t2, _, _ in res.processed:
        ref[idx[t1], idx[t2]] = ref[idx[t2], idx[t1]] = 0
    assert np.array_equal(res.updating.values, ref)


def test_each_pair_processed_once(loop):
    data, tracks, _ = loop
    res = run_nctm(tracks, data.frame_map(), [f.frame_id for f in data.frames])
    keys = [tuple(sorted(p[:2])) for p in res.processed]
    assert len(keys) == len(set(keys))


def test_all_below_floor_gives_empty_result(loop):
    data, tracks, _ = loop
    kf = [f.frame_id for f in data.frames]
    res = nctm_main(MatchMatrix(kf), tracks, data.frame_map())
    assert res.n_matchings == 0 and all(len(g) == 1 for g in res.merge_groups)


def test_vote_resolution_order_invariant():
    rng = np.random.default_rng(0)
    tracks = {i: FeatureTrack(i, {i: 0, 50 + i % 3: 0}, descriptor_sum=np.ones(4)) for i in range(12)}
    pairs = [(a, b) for a in range(12) for b in range(a + 1, 12) if rng.random() < 0.4]
    results = set()
    for _ in range(5):
        votes = TrackPairSet()
        for k in rng.permutation(len(pairs)):
            a, b = pairs[k]
            for _ in range((a * 7 + b) % 5 + 1):
                votes.vote(b, a, True)
            if (a + b) % 4 == 0:
                votes.vote(a, b, False)
        _, groups, merged = resolve_votes(votes, tracks, 2)
        results.add(tuple(map(tuple, groups)))
        for t in merged:
            assert len(t.observations) == sum(len(tracks[g].observations) for g in groups[t.track_id])
    assert len(results) == 1


def test_vote_threshold():
    tracks = {i: FeatureTrack(i, {i: 0}, descriptor_sum=np.ones(4)) for i in range(4)}
    votes = TrackPairSet()
    for _ in range(3):
        votes.vote(0, 1, True)
    votes.vote(0, 1, False)
    votes.vote(2, 3, True)
    votes.vote(2, 3, False)
    accepted, _, _ = resolve_votes(votes, tracks, 2)
    assert accepted == [(0, 1)]


def test_pgm_dump_of_result(loop, tmp_path):
    data, tracks, _ = loop
    kf = [f.frame_id for f in data.frames]
    res = run_nctm(tracks, data.frame_map(), kf, NCTMParams(seed=1))
    res.initial.save_pgm(tmp_path / "init.pgm")
    res.final.save_pgm(tmp_path / "final.pgm")
    assert load_pgm(tmp_path / "final.pgm").shape == (len(kf), len(kf))
