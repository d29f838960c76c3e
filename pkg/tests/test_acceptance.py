"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import os
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import random_cost  # noqa: E402

from enft.cli import RunConfig, evaluate_trajectory, run_pipeline  # noqa: E402
from enft.cpt import MatchingWeights, match_pair  # noqa: E402
from enft.cpt.matching import normalized_line  # noqa: E402
from enft.features import FeatureTrack  # noqa: E402
from enft.geom import SimilarityTransform, rodrigues, triangulate_multiview  # noqa: E402
from enft.nctm import (MatchMatrix, NCTMParams, build_vocab_tree, init_match_matrix,  # noqa: E402
                       long_tracks, nctm_main)
from enft.sfm import (RefineParams, bundle_adjust, coarse_to_fine_refine,  # noqa: E402
                      direction_angles, incremental_sfm, register_submaps,
                      reprojection_joint_errors, segment_ba, steepest_descent_directions)
from enft.synth import (SceneSpec, closure_gap, dense_ba_oracle, format_scene_spec,  # noqa: E402
                        fragment_tracks, generate, ground_truth_submap, inject_drift,
                        random_segment_problem, two_plane_pair)
from enft.synth.oracles import brute_force_track_merge  # noqa: E402

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _groups_recall(groups, owner):
    by = defaultdict(list)
    for tid, o in enumerate(owner):
        by[int(o)].append(tid)
    truth = [(a, b) for ids in by.values() for i, a in enumerate(ids) for b in ids[i + 1:]]
    g = {t: k for k, grp in enumerate(groups) for t in grp}
    return sum(g[a] == g[b] for a, b in truth) / max(len(truth), 1)


def _false_merges(groups, owner):
    return sum(len({int(owner[t]) for t in grp}) > 1 for grp in groups)


# ----------------------------------------------------------------------------- 1

def test_criterion_01_two_pass_matching():
    t0 = time.perf_counter()
    pair = two_plane_pair(seed=0)
    w = MatchingWeights(tau_c=0.02, tau_e=2.0, tau_h=10.0)
    res = match_pair(pair.A, pair.B, w, rng=np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    ok = []
    for a, b in zip(res.idx_a, res.idx_b):
        g = pair.B.gt_ids[b]
        if g >= 0:
            ok.append(g == pair.A.gt_ids[a])
        else:
            t = pair.truth_b[a]
            ok.append(bool(np.isfinite(t).all()) and np.linalg.norm(pair.B.positions[b] - t) < 1.0)
    ok = np.array(ok, bool)
    visible = int((~pair.occluded).sum())
    first = res.passes == 0
    r1 = (ok & first).sum() / visible
    r_all = ok.sum() / visible
    violations = 0
    for c in res.second_pass:
        x_hat = res.homographies[c.plane].apply(pair.A.positions[c.idx_a])
        line = normalized_line(res.F.line_in_second(pair.A.positions[c.idx_a]))
        violations += not (abs(line @ np.append(c.position, 1)) <= w.tau_e
                           and np.linalg.norm(c.position - x_hat) <= w.tau_h
                           and c.sad <= w.tau_c * w.window_size)
    report(1, r1 < 0.5 and r_all >= 0.9 and violations == 0 and elapsed < 10,
           f"first-pass recall {r1:.3f} (<0.5), total {r_all:.3f} (>=0.9), "
           f"gate violations {violations}, {elapsed:.1f}s (<10s)")


# ----------------------------------------------------------------------------- 2

def test_criterion_02_patch_objective():
    rng = np.random.default_rng(2024)
    worst, monotone = 0.0, 0
    for _ in range(100):
        cost, _ = random_cost(rng)
        x = cost.initial_point() + rng.uniform(-1, 1, 2)
        g = cost.gradient(x)
        h = 1e-6
        fd = np.array([(cost.value(x + h * e) - cost.value(x - h * e)) / (2 * h) for e in np.eye(2)])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
        _, values, _ = cost.solve()
        monotone += all(b <= a for a, b in zip(values, values[1:]))
    report(2, worst <= 1e-4 and monotone == 100,
           f"max relative gradient error {worst:.2e} (<=1e-4), non-increasing runs {monotone}/100")


# ----------------------------------------------------------------------------- 3

@pytest.fixture(scope="module")
def loop100():
    data = generate(SceneSpec(trajectory="loop", n_frames=100, n_points=1500, loop_overlap=0.15), 7)
    tracks, owner = fragment_tracks(data)
    return data, tracks, owner


def test_criterion_03_nctm_vs_oracle(loop100):
    data, tracks, owner = loop100
    fm = data.frame_map()
    kf = [f.frame_id for f in data.frames]
    t0 = time.perf_counter()
    tree = build_vocab_tree(long_tracks(tracks, kf, 5), 8, 4, 0)
    M = init_match_matrix(tree, tracks, kf, 1, 0.9)
    res = nctm_main(M, tracks, fm, NCTMParams(s_vote=2.0))
    elapsed = time.perf_counter() - t0
    groups, n_oracle = brute_force_track_merge(tracks, fm, kf, s_vote=2.0)
    r_nctm = _groups_recall(res.merge_groups, owner)
    r_oracle = _groups_recall(groups, owner)
    false = _false_merges(res.merge_groups, owner)
    frac = res.n_matchings / n_oracle
    report(3, r_nctm >= 0.95 * r_oracle and false == 0 and frac <= 0.25 and elapsed < 60,
           f"recall {r_nctm:.3f} vs oracle {r_oracle:.3f} (>=0.95x), false merges {false}, "
           f"matchings {res.n_matchings}/{n_oracle} = {frac:.3f} (<=0.25), {elapsed:.1f}s (<60s)")


# ----------------------------------------------------------------------------- 4

def test_criterion_04_match_matrix_robustness(loop100):
    data, tracks, _ = loop100
    fm = data.frame_map()
    kf = [f.frame_id for f in data.frames]
    tree = build_vocab_tree(long_tracks(tracks, kf, 5), 8, 4, 0)
    full = init_match_matrix(tree, tracks, kf, 1, 0.9)
    rng = np.random.default_rng(4)
    keep = np.triu(rng.random(full.values.shape) < 0.2, 1)
    v = np.where(keep, full.values, 0.0)
    sparse = MatchMatrix(kf, v + v.T, full.band)
    params = NCTMParams()
    a = nctm_main(full, tracks, fm, params).final.values >= params.min_confidence
    b = nctm_main(sparse, tracks, fm, params).final.values >= params.min_confidence
    agree = (a & b).sum() / max((a | b).sum(), 1)
    report(4, agree >= 0.9 and a.sum() > 0,
           f"above-threshold agreement {agree:.3f} (>=0.9) over {int((a | b).sum())} entries")


# ----------------------------------------------------------------------------- 5

def test_criterion_05_segment_ba_equivalence():
    t0 = time.perf_counter()
    worst_step, worst_final, n_conv = 0.0, 0.0, 0
    for s in range(20):
        p = random_segment_problem(s, n_segments=2 + s % 7, n_points=30 + s)
        a = segment_ba(p)
        b = dense_ba_oracle(p)
        for ca, cb in zip(a.costs, b.costs):
            worst_step = max(worst_step, abs(ca - cb) / max(abs(cb), 1e-300))
        if a.converged and b.accepted_steps < 50:
            n_conv += 1
            worst_final = max(worst_final, abs(a.final_cost - b.cost) / max(abs(b.cost), 1e-300))
    elapsed = time.perf_counter() - t0
    report(5, worst_step <= 1e-6 and worst_final <= 1e-10 and elapsed < 30,
           f"per-step relative cost gap {worst_step:.1e} (<=1e-6), final {worst_final:.1e} "
           f"(<=1e-10, {n_conv}/20 converged), {elapsed:.1f}s (<30s)")


# ----------------------------------------------------------------------------- 6

def test_criterion_06_split_detection():
    spec = SceneSpec(trajectory="arc", n_frames=40, n_points=400, pixel_sigma=0.5)
    hits_c = hits_e = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        sm = ground_truth_submap(generate(spec, 1000 + trial))
        seq = sm.sequences[0]
        k = int(rng.integers(5, len(seq) - 6))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        D = SimilarityTransform(1.02, rodrigues(axis * np.radians(2.0)), rng.normal(scale=0.05, size=3))
        for f in seq[k + 1:]:
            sm.poses[f] = sm.poses[f].after_similarity(D.inverse())
        # points settle to the corrupted cameras before the joint is searched for
        sm = bundle_adjust(sm, [], None, max_nfev=20)
        g = steepest_descent_directions(sm)
        hits_c += int(np.argmax(direction_angles([g[f] for f in seq]))) == k
        hits_e += int(np.argmax(reprojection_joint_errors(sm, seq))) == k
    report(6, hits_c >= 95 and hits_e < hits_c,
           f"arccos criterion first in {hits_c}/100 (>=95), reprojection criterion {hits_e}/100")


# ----------------------------------------------------------------------------- 7

def test_criterion_07_drift_removal():
    data = generate(SceneSpec(trajectory="loop", n_frames=1000, n_points=1500), 0)
    gt = ground_truth_submap(data)
    drifted = inject_drift(gt, scale=0.02, rotation_deg=2.0)
    seq = gt.sequences[0]
    gap0 = closure_gap(drifted.poses, gt.poses, seq)
    t0 = time.perf_counter()
    # noise-free data: the stop threshold sits below the 1 px used for real imagery
    out, rep = coarse_to_fine_refine([drifted], [SimilarityTransform.identity()],
                                     params=RefineParams(error_threshold=0.1, max_levels=4))
    elapsed = time.perf_counter() - t0
    gap1 = closure_gap(out[0].poses, gt.poses, seq)
    ratio = gap1 / gap0
    report(7, ratio <= 0.05 and rep.final_error <= 1.0 and rep.doublings <= 4 and elapsed < 120,
           f"gap {gap0:.4f} -> {gap1:.5f} ({100 * ratio:.2f}% <= 5%), mean reprojection "
           f"{rep.final_error:.3f} px (<=1), doublings {rep.doublings} (<=4), {elapsed:.1f}s (<120s)")


# ----------------------------------------------------------------------------- 8

def test_criterion_08_multi_sequence_registration():
    spec = SceneSpec(trajectory="multi", n_sequences=3, n_frames=25, n_points=1500, sequence_span=0.3)
    d = generate(spec, 5)
    tracks = [FeatureTrack(p, obs) for p, obs in sorted(d.gt_tracks.items())]
    fm = d.frame_map()
    subs = [incremental_sfm(tracks, {f: fm[f] for f in seq}, d.intrinsics, sequence=seq,
                            sequence_id=j) for j, seq in enumerate(d.sequences)]
    T = register_submaps(subs)
    ref, _ = coarse_to_fine_refine(subs, T, params=RefineParams(error_threshold=1e-6, max_levels=3))
    # each sequence triangulates the shared points from its own refined cameras
    worst, n_common = 0.0, 0
    for i in range(3):
        for j in range(i + 1, 3):
            common = sorted(ref[i].point_index().keys() & ref[j].point_index().keys())
            n_common += len(common)
            for pid in common:
                X = []
                for s in (ref[i], ref[j]):
                    m = s.obs_point == s.point_index()[pid]
                    fs, px = s.obs_frame[m], s.obs_px[m]
                    X.append(triangulate_multiview([s.poses[f] for f in fs],
                                                   [s.intrinsics[f].to_normalized(p) for f, p in zip(fs, px)]))
                worst = max(worst, float(np.linalg.norm(X[0] - X[1])))
    report(8, worst <= 1e-3 and n_common > 0,
           f"max cross-sequence discrepancy {worst:.2e} (<=1e-3) over {n_common} shared points")


# ----------------------------------------------------------------------------- 9

def test_criterion_09_evaluation_gauge():
    data = generate(SceneSpec(trajectory="loop", n_frames=80, n_points=50), 9)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        axis = rng.normal(size=3)
        S = SimilarityTransform(float(np.exp(rng.uniform(-3, 3))),
                                rodrigues(axis / np.linalg.norm(axis) * rng.uniform(0, np.pi)),
                                rng.normal(scale=100.0, size=3))
        est = {f: p.after_similarity(S) for f, p in data.poses.items()}
        worst = max(worst, evaluate_trajectory(est, data.poses).rmse)
    report(9, worst <= 1e-9, f"max RMSE over 20 similarity copies {worst:.1e} (<=1e-9)")


# ----------------------------------------------------------------------------- 10

def _snapshot(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.txt":
                # wall-clock timings are the one intended difference between reruns
                data = b"\n".join(l for l in data.split(b"\n") if not l.startswith(b"timing."))
            out[str(p.relative_to(root))] = data
    return out


def test_criterion_10_reproducibility(tmp_path):
    spec = SceneSpec(trajectory="loop", n_frames=60, n_points=1500, pixel_sigma=0.3)
    (tmp_path / "scene.txt").write_text(format_scene_spec(spec))
    cfg = RunConfig(synth_spec=str(tmp_path / "scene.txt"), output=str(tmp_path / "out"), seed=10,
                    m1=200, m2=120)
    run_pipeline(cfg)
    first = _snapshot(tmp_path / "out")
    run_pipeline(cfg)
    second = _snapshot(tmp_path / "out")
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    report(10, not differ and len(first) >= 10,
           f"{len(first)} artifacts compared, {len(differ)} differ {differ if differ else ''}".rstrip())


# ----------------------------------------------------------------------------- 11

KITTI = os.environ.get("ENFT_KITTI_04", "")


def test_criterion_11_kitti_04(tmp_path):
    if not (KITTI and Path(KITTI).is_dir()):
        line = "criterion 11: SKIP  no dataset (set ENFT_KITTI_04 to a KITTI odometry sequence 04 directory)"
        RESULTS.append(line)
        print(line)
        pytest.skip("KITTI sequence 04 not available")
    cfg = RunConfig(dataset_format="kitti", dataset_path=KITTI, output=str(tmp_path / "kitti"),
                    keyframes=True, max_features=2000)
    art = run_pipeline(cfg)
    rep = art.evaluation
    report(11, rep is not None and rep.rmse <= 2.0,
           f"RMSE {rep.rmse:.3f} m (<=2), completeness {rep.completeness:.3f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
