import numpy as np
import pytest

from enft.errors import EmptyImage, ParseError
from enft.features import (FeatureTrack, FrameFeatures, extract_features, load_features,
                           load_tracks, match_2nn, merge_tracks, normalize, save_features,
                           save_tracks, update_track_descriptor)


def random_frames(rng, n_frames=3, n=20):
    frames = []
    for f in range(n_frames):
        desc = normalize(rng.normal(size=(n, 64))).astype(np.float32).astype(float)
        frames.append(FrameFeatures(
            f * 7 + 1,
            rng.uniform(0, 640, size=(n, 2)).astype(np.float32).astype(float),
            desc,
            rng.uniform(1, 4, n).astype(np.float32).astype(float),
            rng.uniform(-3, 3, n).astype(np.float32).astype(float)))
    return frames


def test_uniform_image_has_no_features():
    assert len(extract_features(np.full((64, 64), 0.5))) == 0


def test_empty_image_raises():
    with pytest.raises(EmptyImage):
        extract_features(np.zeros((0, 0)))


def test_checkerboard_corners_on_lattice():
    sq = 16
    yy, xx = np.mgrid[0:128, 0:128]
    img = (((xx // sq) + (yy // sq)) % 2).astype(float) * 0.6 + 0.2
    fr = extract_features(img)
    # interior lattice corners sit on the pixel boundary between k*sq-1 and k*sq
    lattice = np.arange(sq, 128, sq) - 0.5
    interior = [(x, y) for x in lattice for y in lattice if 10 < x < 117 and 10 < y < 117]
    assert len(fr) >= len(interior)
    for c in interior:
        assert np.linalg.norm(fr.positions - c, axis=1).min() <= 1.0
    for p in fr.positions:
        assert np.abs(p[0] - lattice).min() <= 1.0 and np.abs(p[1] - lattice).min() <= 1.0
    assert np.allclose(np.linalg.norm(fr.descriptors, axis=1), 1.0, atol=1e-6)


def test_extract_is_deterministic(rng):
    img = rng.uniform(size=(80, 90))
    a, b = extract_features(img), extract_features(img)
    assert a.equals(b)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_feature_file_round_trip(tmp_path, rng):
    frames = random_frames(rng)
    path = tmp_path / "f.bin"
    save_features(path, frames)
    loaded = load_features(path)
    assert len(loaded) == len(frames)
    assert all(a.equals(b) for a, b in zip(frames, loaded))


def test_feature_file_truncated(tmp_path, rng):
    path = tmp_path / "f.bin"
    save_features(path, random_frames(rng))
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ParseError, match="byte offset"):
        load_features(path)
    path.write_bytes(data[:10])
    with pytest.raises(ParseError, match="byte offset"):
        load_features(path)


def test_feature_file_wrong_dimension(tmp_path, rng):
    frames = random_frames(rng)
    for fr in frames:
        fr.descriptors = normalize(rng.normal(size=(len(fr), 32)))
    path = tmp_path / "f.bin"
    save_features(path, frames)
    with pytest.raises(ParseError, match="record"):
        load_features(path)


def test_feature_file_bad_descriptor_names_record(tmp_path, rng):
    frames = random_frames(rng)
    frames[1].descriptors[4] *= 3.0
    path = tmp_path / "f.bin"
    save_features(path, frames)
    with pytest.raises(ParseError, match="frame record 1 feature record 4"):
        load_features(path)


def _frames_with(descs):
    return {f: FrameFeatures(f, np.zeros((1, 2)), d[None, :]) for f, d in enumerate(descs)}


def test_track_descriptor_single_observation(rng):
    d = normalize(rng.normal(size=64))
    frames = _frames_with([d])
    tr = FeatureTrack(0, {0: 0})
    assert np.allclose(update_track_descriptor(tr, frames), d)


def test_track_descriptor_symmetric_perturbation(rng):
    d0 = normalize(rng.normal(size=64))
    e = rng.normal(size=64) * 0.1
    frames = _frames_with([d0 + e, d0 - e])
    tr = FeatureTrack(0, {0: 0, 1: 0})
    assert np.allclose(update_track_descriptor(tr, frames), d0, atol=1e-12)


def test_merged_descriptor_equals_recompute(rng):
    descs = normalize(rng.normal(size=(6, 64)))
    frames = _frames_with(list(descs))
    a = FeatureTrack(0, {0: 0, 1: 0, 2: 0})
    b = FeatureTrack(1, {3: 0, 4: 0, 5: 0})
    update_track_descriptor(a, frames)
    update_track_descriptor(b, frames)
    m = merge_tracks([a, b], 0)
    ref = FeatureTrack(9, dict(m.observations))
    assert np.allclose(m.mean_descriptor, update_track_descriptor(ref, frames), atol=1e-12)
    with pytest.raises(ValueError):
        merge_tracks([a, a], 0)


def test_track_file_round_trip(tmp_path, rng):
    descs = normalize(rng.normal(size=(4, 64))).astype(np.float32).astype(float)
    tracks = [FeatureTrack(i, {i: 2 * i, i + 5: 1}, descs[i]) for i in range(4)]
    save_tracks(tmp_path / "t.bin", tracks)
    back = load_tracks(tmp_path / "t.bin")
    for a, b in zip(tracks, back):
        assert a.observations == b.observations and np.array_equal(a.mean_descriptor, b.mean_descriptor)
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(ParseError, match="byte offset"):
        load_tracks(tmp_path / "t.bin")


def test_match_2nn_is_injective(rng):
    base = normalize(rng.normal(size=(50, 64)))
    a = normalize(base + rng.normal(scale=0.02, size=base.shape))
    b = normalize(base[::-1] + rng.normal(scale=0.02, size=base.shape))
    ia, ib, _ = match_2nn(a, b)
    assert len(ia) == 50 and np.array_equal(ib, 49 - ia)
    # duplicate query rows all claim the same b; only one survives
    ia, ib, _ = match_2nn(np.vstack([a[:1], a[:1]]), b)
    assert len(set(ib.tolist())) == len(ib)
