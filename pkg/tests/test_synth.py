import numpy as np
import pytest

from enft.errors import SpecError
from enft.geom import project_points
from enft.synth import (SceneSpec, format_scene_spec, fragment_tracks, generate,
                        parse_scene_spec)


def test_noise_free_observations_are_projections():
    data = generate(SceneSpec(trajectory="arc", n_frames=12, n_points=200), seed=3)
    for fr in data.frames:
        px, _ = project_points(data.intrinsics, data.poses[fr.frame_id], data.points[fr.gt_ids])
        assert np.array_equal(fr.positions, px)


def test_generation_is_bitwise_reproducible():
    spec = SceneSpec(n_frames=15, n_points=300, pixel_sigma=0.5, dropout=0.1, outlier_rate=0.05)
    a, b = generate(spec, 11), generate(spec, 11)
    assert all(x.equals(y) and np.array_equal(x.gt_ids, y.gt_ids) for x, y in zip(a.frames, b.frames))
    c = generate(spec, 12)
    assert not all(x.equals(y) for x, y in zip(a.frames, c.frames))


def _visible_runs(data):
    """Lengths of contiguous per-point visibility windows before dropout."""
    spec = data.spec
    vis = []
    for fr in data.frames:
        px, z = project_points(data.intrinsics, data.poses[fr.frame_id], data.points)
        vis.append((z > 0.1) & (px[:, 0] >= spec.margin) & (px[:, 0] < spec.width - spec.margin)
                   & (px[:, 1] >= spec.margin) & (px[:, 1] < spec.height - spec.margin))
    vis = np.array(vis)
    runs = []
    for p in range(vis.shape[1]):
        col = np.concatenate([[0], vis[:, p].astype(int), [0]])
        d = np.diff(col)
        runs += (np.flatnonzero(d == -1) - np.flatnonzero(d == 1)).tolist()
    return np.array(runs)


def test_dropout_fragment_count_matches_bernoulli_runs():
    # fragments kept by fragment_tracks(max_gap=0) are kept-runs of length >= 2;
    # within a visible window of n frames: E = q^2 + (n - 2) p q^2
    p = 0.3
    q = 1 - p
    observed = expected = 0.0
    for seed in range(20):
        data = generate(SceneSpec(trajectory="arc", n_frames=25, n_points=150, dropout=p), seed)
        tracks, _ = fragment_tracks(data, max_gap=0)
        observed += len(tracks)
        n = _visible_runs(data)
        n = n[n >= 2]
        expected += np.sum(q * q + (n - 2) * p * q * q)
    assert abs(observed - expected) / expected < 0.05


def test_loop_revisits_start():
    data = generate(SceneSpec(trajectory="loop", n_frames=100, n_points=1500), seed=0)
    k = len(data.frames) // 10
    first = set(np.concatenate([f.gt_ids for f in data.frames[:k]]).tolist())
    last = set(np.concatenate([f.gt_ids for f in data.frames[-k:]]).tolist())
    assert len(first & last) >= 0.5 * min(len(first), len(last))


def test_multi_sequences_split_frames():
    data = generate(SceneSpec(trajectory="multi", n_sequences=3, n_frames=20, n_points=600), seed=0)
    assert [len(s) for s in data.sequences] == [20, 20, 20]
    tracks, _ = fragment_tracks(data)
    seq_of = {f: s for s, ids in enumerate(data.sequences) for f in ids}
    assert all(len({seq_of[f] for f in t.observations}) == 1 for t in tracks)


def test_spec_roundtrip_and_errors():
    spec = SceneSpec(trajectory="arc", n_frames=7, pixel_sigma=0.25)
    assert parse_scene_spec(format_scene_spec(spec)) == spec
    with pytest.raises(SpecError):
        parse_scene_spec("n_frames = 3")
    with pytest.raises(SpecError):
        parse_scene_spec("enft-scene 1\nbogus = 2")
    with pytest.raises(SpecError, match="n_points"):
        generate(SceneSpec(n_points=5), 0)
    with pytest.raises(SpecError, match="dropout"):
        generate(SceneSpec(dropout=1.5), 0)
