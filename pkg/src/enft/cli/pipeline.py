"""End-to-end driver: tracking, non-consecutive matching, reconstruction, refinement."""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..cpt import MatchingWeights, select_keyframes, track_sequence
from ..errors import ConfigError, DisconnectedSequences, InitFailure, StageError
from ..features import (FeatureTrack, extract_features, load_features, save_features,
                        save_tracks, update_track_descriptor)
from ..geom import CameraIntrinsics, SimilarityTransform
from ..nctm import NCTMParams, run_nctm, save_pgm
from ..sfm import (IncrementalParams, RefineParams, coarse_to_fine_refine, direction_angles,
                   incremental_sfm, merge_submaps, read_trajectory, register_remaining_frames,
                   register_submaps,
                   reprojection_joint_errors, split_long_sequence, steepest_descent_directions,
                   write_trajectory)
from ..synth import fragment_tracks, generate, load_scene_spec
from .config import RunConfig, format_config
from .datasets import import_dataset
from .evaluate import evaluate_trajectory
from .plots import emit_plots

log = logging.getLogger(__name__)

MANIFEST_HEADER = "enft-manifest 1"


def stage_seed(seed, name) -> int:
    """Independent, named random substream for one stage."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class RunArtifacts:
    output: Path
    files: dict = field(default_factory=dict)       # artifact name -> path
    timings: dict = field(default_factory=dict)     # stage -> seconds
    frames: dict = field(default_factory=dict)
    sequences: list = field(default_factory=list)
    tracks: list = field(default_factory=list)
    merged_tracks: list = None
    keyframes: list = field(default_factory=list)
    nctm: object = None
    submaps: list = None
    pieces: list = None                 # frame lists behind each submap
    transforms: list = None
    reconstruction: object = None
    refine_report: object = None
    trajectory: dict = None
    ground_truth: dict = None
    evaluation: object = None
    synthetic: object = None
    notes: list = field(default_factory=list)


class _Stage:
    def __init__(self, art: RunArtifacts, cfg: RunConfig, name: str):
        self.art, self.cfg, self.name = art, cfg, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        self.art.timings[self.name] = time.perf_counter() - self.t0
        if exc is None:
            return False
        write_manifest(self.art, self.cfg, failed=self.name)
        if isinstance(exc, StageError):
            return False
        raise StageError(self.name, exc) from exc


def _parse_intrinsics(text) -> CameraIntrinsics:
    return CameraIntrinsics(*[float(v) for v in text.split()])


def _load_input(art: RunArtifacts, cfg: RunConfig):
    if cfg.synth_spec:
        data = generate(load_scene_spec(cfg.synth_spec), cfg.seed)
        art.frames = data.frame_map()
        seqs = data.sequences
        intr = data.intrinsics
        art.ground_truth = dict(data.poses)
        art.synthetic = data
    elif cfg.features:
        frames = load_features(cfg.features)
        art.frames = {f.frame_id: f for f in frames}
        seqs = [sorted(art.frames)]
        intr = _parse_intrinsics(cfg.intrinsics)
    else:
        ds = import_dataset(cfg.dataset_format, cfg.dataset_path)
        ids = ds.frame_ids[::cfg.frame_step]
        art.frames = {f: extract_features(ds.image(f), f, cfg.max_features) for f in ids}
        seqs = [ids]
        intr = ds.intrinsics
        art.ground_truth = {f: p for f, p in ds.ground_truth.items() if f in art.frames} or None
    if cfg.ground_truth:
        art.ground_truth = read_trajectory(cfg.ground_truth)
    if not cfg.dataset_path:
        seqs = [list(s)[::cfg.frame_step] for s in seqs]
        art.frames = {f: art.frames[f] for s in seqs for f in s}
    art.sequences = [list(s) for s in seqs]
    if art.ground_truth:
        art.ground_truth = {f: p for f, p in art.ground_truth.items() if f in art.frames}
    return intr


def _renumber(tracks, start, frames):
    out = []
    for k, t in enumerate(tracks):
        nt = FeatureTrack(start + k, dict(t.observations))
        update_track_descriptor(nt, frames)
        out.append(nt)
    return out


def run_pipeline(cfg: RunConfig) -> RunArtifacts:
    """Run the enabled stages and write every artifact under ``cfg.output``.

    Stage failures raise StageError after writing a manifest that names the
    failed stage; artifacts from earlier stages stay on disk.
    """
    cfg.validate()
    if not cfg.cpt and not cfg.synth_spec:
        raise ConfigError("cpt can only be disabled for synthetic input (ideal tracks)", ["cpt"])
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(out)

    with _Stage(art, cfg, "input"):
        intr = _load_input(art, cfg)

    with _Stage(art, cfg, "cpt"):
        if cfg.cpt:
            weights = MatchingWeights(cfg.sigma_c, cfg.sigma_e, cfg.sigma_h, cfg.window,
                                      cfg.tau_c, cfg.tau_e, cfg.tau_h)
            seed = stage_seed(cfg.seed, "cpt")
            for seq in art.sequences:
                res = track_sequence([art.frames[f] for f in seq], weights, seed, cfg.two_past,
                                     second_pass=cfg.second_pass, ratio=cfg.ratio,
                                     ransac_threshold=cfg.ransac_threshold)
                art.tracks += _renumber(res.tracks, len(art.tracks), art.frames)
                for a, b, why in res.failed:
                    art.notes.append(f"cpt pair {a}-{b} skipped: {why}")
        else:
            tracks, _ = fragment_tracks(art.synthetic, max_gap=cfg.frame_step,
                                        frames=art.frames)
            art.tracks = _renumber(tracks, 0, art.frames)
        for seq in art.sequences:
            art.keyframes += (select_keyframes(art.tracks, seq, cfg.m1, cfg.m2)
                              if cfg.keyframes else list(seq))
        _save(art, "features", "features.bin", save_features,
              [art.frames[f] for s in art.sequences for f in s])
        _save(art, "tracks", "tracks.bin", save_tracks, art.tracks)
        _save_lines(art, "keyframes", "keyframes.txt", [str(f) for f in art.keyframes])

    if cfg.nctm:
        with _Stage(art, cfg, "nctm"):
            params = NCTMParams(min_confidence=cfg.min_confidence, s_vote=cfg.s_vote,
                                ratio=cfg.ratio, tau_e=cfg.tau_e, seed=stage_seed(cfg.seed, "nctm"))
            res = run_nctm(art.tracks, art.frames, art.keyframes, params, cfg.vocab_branching,
                           cfg.vocab_depth, cfg.min_span)
            art.nctm = res
            art.merged_tracks = res.tracks
            _save(art, "merged_tracks", "merged_tracks.bin", save_tracks, res.tracks)
            for name, M in (("initial", res.initial), ("final", res.final)):
                _save(art, f"match_matrix_{name}", f"match_matrix_{name}.pgm", save_pgm, M.values)

    if cfg.sfm:
        with _Stage(art, cfg, "sfm"):
            _reconstruct(art, cfg, intr)
        if cfg.refine:
            with _Stage(art, cfg, "refine"):
                params = RefineParams(cfg.error_threshold, cfg.max_segments or None,
                                      cfg.max_levels, robust=cfg.robust)
                subs, rep = coarse_to_fine_refine(art.submaps, art.transforms, params=params)
                art.refine_report = rep
                art.reconstruction = merge_submaps(subs, [SimilarityTransform.identity()] * len(subs))
                lines = [f"initial_error {rep.initial_error!r}", f"final_error {rep.final_error!r}",
                         f"capped {str(rep.capped).lower()}"]
                lines += [f"level t={lv.t} mode={lv.mode} segments={lv.n_segments} "
                          f"error={lv.error_before!r}->{lv.error_after!r}" for lv in rep.levels]
                _save_lines(art, "refine_report", "refine_report.txt", lines)
        if cfg.keyframes:
            with _Stage(art, cfg, "register_frames"):
                tracks = art.merged_tracks if art.merged_tracks is not None else art.tracks
                art.reconstruction, missing = register_remaining_frames(
                    art.reconstruction, tracks, art.frames, intr, art.pieces,
                    cfg.max_reprojection, stage_seed(cfg.seed, "register_frames"))
                if missing:
                    art.notes.append(f"{len(missing)} non-keyframes not registered")
        art.trajectory = dict(art.reconstruction.poses)
        _save(art, "trajectory", "trajectory.txt", write_trajectory, art.trajectory)

    with _Stage(art, cfg, "report"):
        if art.ground_truth:
            _save(art, "ground_truth", "ground_truth.txt", write_trajectory, art.ground_truth)
            if art.trajectory:
                art.evaluation = evaluate_trajectory(art.trajectory, art.ground_truth)
                (out / "evaluation.txt").write_text(art.evaluation.format())
                art.files["evaluation"] = out / "evaluation.txt"
        plots = {"trajectory": art.trajectory or {}}
        if art.reconstruction is not None:
            rec = art.reconstruction
            plots["frame_errors"] = rec.frame_errors()
            g = steepest_descent_directions(rec)
            plots["split_curves"] = [(j, s, direction_angles([g[f] for f in s]),
                                      reprojection_joint_errors(rec, s))
                                     for j, s in enumerate(rec.sequences)]
        if art.nctm is not None:
            plots["match_matrices"] = {"initial": art.nctm.initial.values,
                                       "final": art.nctm.final.values}
        for p in emit_plots(plots, out / "plots"):
            art.files[f"plot:{p.name}"] = p
    write_manifest(art, cfg)
    return art


def _reconstruct(art: RunArtifacts, cfg: RunConfig, intr):
    tracks = art.merged_tracks if art.merged_tracks is not None else art.tracks
    keyset = set(art.keyframes)
    params = IncrementalParams(cfg.min_init_matches, min_parallax_deg=cfg.min_parallax_deg,
                               max_error=cfg.max_reprojection, local_ba_every=cfg.local_ba_every,
                               seed=stage_seed(cfg.seed, "sfm"))
    submaps, used = [], []
    pieces = [p for s in art.sequences
              for p in split_long_sequence(s, cfg.max_sequence_frames, cfg.min_sequence_frames)]
    for j, piece in enumerate(pieces):
        use = [f for f in piece if f in keyset]
        try:
            sm = incremental_sfm(tracks, {f: art.frames[f] for f in use}, intr, sequence=use,
                                 sequence_id=j, params=params)
        except InitFailure as exc:
            art.notes.append(f"sequence {j} not reconstructed: {exc}")
            continue
        submaps.append(sm)
        used.append(piece)
    if not submaps:
        raise InitFailure("no sequence could be initialized")
    try:
        T = register_submaps(submaps)
    except DisconnectedSequences as exc:
        sizes = [sum(len(submaps[i].poses) for i in range(len(submaps))
                     if submaps[i].sequence_id in comp) for comp in exc.components]
        keep = set(exc.components[int(np.argmax(sizes))])
        art.notes.append(f"kept sequences {sorted(keep)} of components {exc.components}")
        used = [p for p, s in zip(used, submaps) if s.sequence_id in keep]
        submaps = [s for s in submaps if s.sequence_id in keep]
        T = register_submaps(submaps)
    art.submaps, art.transforms, art.pieces = submaps, T, used
    art.reconstruction = merge_submaps(submaps, T)
    _save(art, "trajectory_sfm", "trajectory_sfm.txt", write_trajectory,
          dict(art.reconstruction.poses))


def _save(art, name, filename, writer, obj):
    path = art.output / filename
    writer(path, obj)
    art.files[name] = path


def _save_lines(art, name, filename, lines):
    path = art.output / filename
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    art.files[name] = path


def write_manifest(art: RunArtifacts, cfg: RunConfig, failed=None) -> Path:
    """Versions, seed, per-stage timings, artifact list and the verbatim config."""
    lines = [MANIFEST_HEADER, f"enft_version = {__version__}", f"numpy_version = {np.__version__}",
             f"scipy_version = {scipy.__version__}", f"seed = {cfg.seed}"]
    lines += [f"status = failed:{failed}" if failed else "status = ok"]
    lines += [f"timing.{k} = {v:.6f}" for k, v in art.timings.items()]
    lines += [f"artifact.{k} = {Path(v).relative_to(art.output)}" for k, v in sorted(art.files.items())]
    lines += [f"note = {n}" for n in art.notes]
    lines += ["[config]"] + format_config(cfg).splitlines()
    path = art.output / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
