"""Command-line entry point: ``enft run | eval | synth | import``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import (ConfigError, InsufficientOverlap, LayoutError, ParseError, SpecError,
                      StageError)
from .config import RunConfig, format_config, load_config
from .datasets import Dataset, import_dataset
from .evaluate import EvalReport, evaluate_trajectory
from .pipeline import RunArtifacts, run_pipeline, stage_seed, write_manifest
from .plots import emit_plots

__all__ = ["Dataset", "EvalReport", "RunArtifacts", "RunConfig", "emit_plots",
           "evaluate_trajectory", "format_config", "import_dataset", "load_config", "main",
           "run_pipeline", "stage_seed", "write_manifest"]

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 2, 3
_INPUT_ERRORS = (ConfigError, ParseError, LayoutError, InsufficientOverlap, SpecError)


def _cmd_run(args):
    art = run_pipeline(load_config(args.config))
    print(f"wrote {len(art.files)} artifacts to {art.output}")
    if art.evaluation is not None:
        print(art.evaluation.format(), end="")


def _cmd_eval(args):
    from ..sfm import read_trajectory
    report = evaluate_trajectory(read_trajectory(args.est), read_trajectory(args.gt))
    print(report.format(), end="")


def _cmd_synth(args):
    from ..features import save_features, save_tracks
    from ..sfm import write_trajectory
    from ..synth import fragment_tracks, generate, load_scene_spec
    data = generate(load_scene_spec(args.spec), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "features.bin", data.frames)
    save_tracks(out / "tracks_ideal.bin", fragment_tracks(data)[0])
    write_trajectory(out / "ground_truth.txt", data.poses)
    K = data.intrinsics
    (out / "intrinsics.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    print(f"{len(data.frames)} frames, {len(data.points)} points -> {out}")


def _cmd_import(args):
    from ..features import extract_features, save_features
    from ..sfm import write_trajectory
    ds = import_dataset(args.format, args.path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = ds.frame_ids[::args.step]
    save_features(out / "features.bin",
                  [extract_features(ds.image(f), f, args.max_features) for f in ids])
    if ds.ground_truth:
        write_trajectory(out / "ground_truth.txt",
                         {f: p for f, p in ds.ground_truth.items() if f in set(ids)})
    K = ds.intrinsics
    (out / "intrinsics.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    print(f"{len(ids)} frames -> {out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="enft")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("eval", help="align an estimate to ground truth and report RMSE")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=_cmd_eval)
    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth_out")
    p.set_defaults(func=_cmd_synth)
    p = sub.add_parser("import", help="extract features from a KITTI or TUM directory")
    p.add_argument("--format", required=True, choices=["kitti", "tum"])
    p.add_argument("--path", required=True)
    p.add_argument("--out", default="import_out")
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--max-features", type=int, default=1000)
    p.set_defaults(func=_cmd_import)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
