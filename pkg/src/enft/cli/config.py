"""Run configuration: versioned ``key = value`` text with includes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError

log = logging.getLogger(__name__)

CONFIG_HEADER = "enft-config"
CONFIG_VERSION = 1


@dataclass
class RunConfig:
    # stage toggles
    cpt: bool = True
    nctm: bool = True
    sfm: bool = True
    refine: bool = True
    # input: exactly one of synth_spec / features / dataset_path
    synth_spec: str = ""
    features: str = ""
    intrinsics: str = ""               # "fx fy cx cy [k1 k2]" for feature-file input
    dataset_format: str = ""           # kitti | tum
    dataset_path: str = ""
    ground_truth: str = ""             # optional trajectory file for evaluation
    output: str = "enft_out"
    seed: int = 0
    frame_step: int = 1
    max_features: int = 1000
    # consecutive tracking
    ratio: float = 0.8
    ransac_threshold: float = 2.0
    two_past: bool = True
    second_pass: bool = True
    sigma_c: float = 0.1
    sigma_e: float = 2.0
    sigma_h: float = 10.0
    window: int = 5
    tau_c: float = 0.02
    tau_e: float = 2.0
    tau_h: float = 10.0
    # keyframes
    keyframes: bool = True
    m1: int = 100
    m2: int = 50
    # non-consecutive matching
    s_vote: float = 2.0
    min_confidence: float = 50.0
    vocab_branching: int = 8
    vocab_depth: int = 4
    min_span: int = 5
    # reconstruction
    min_init_matches: int = 100
    min_parallax_deg: float = 1.0
    max_reprojection: float = 3.0
    local_ba_every: int = 5
    max_sequence_frames: int = 3000
    min_sequence_frames: int = 1000
    # refinement
    error_threshold: float = 1.0
    max_segments: int = 0              # n'_max; 0 means unlimited
    max_levels: int = 8
    robust: bool = False

    def validate(self) -> "RunConfig":
        bad = []
        msgs = []

        def fail(names, msg):
            bad.extend(names)
            msgs.append(msg)

        if not self.m1 > self.m2:
            fail(["m1", "m2"], f"m2 ({self.m2}) must be smaller than m1 ({self.m1})")
        if self.m2 <= 0:
            fail(["m2"], "m2 must be positive")
        sources = [n for n in ("synth_spec", "features", "dataset_path") if getattr(self, n)]
        if len(sources) != 1:
            fail(["synth_spec", "features", "dataset_path"],
                 f"exactly one input is required, got {sources or 'none'}")
        if self.dataset_path and self.dataset_format not in ("kitti", "tum"):
            fail(["dataset_format"], f"dataset_format must be kitti or tum, got {self.dataset_format!r}")
        if self.features and not self.intrinsics:
            fail(["intrinsics"], "feature-file input needs intrinsics 'fx fy cx cy [k1 k2]'")
        if self.intrinsics:
            try:
                vals = [float(v) for v in self.intrinsics.split()]
                if len(vals) not in (4, 6) or vals[0] <= 0 or vals[1] <= 0:
                    raise ValueError
            except ValueError:
                fail(["intrinsics"], f"cannot read intrinsics {self.intrinsics!r}")
        if not 0 < self.ratio <= 1:
            fail(["ratio"], "ratio must be in (0, 1]")
        for name in ("ransac_threshold", "sigma_c", "sigma_e", "sigma_h", "tau_c", "tau_e",
                     "tau_h", "s_vote", "error_threshold", "max_reprojection", "min_parallax_deg"):
            if not getattr(self, name) > 0:
                fail([name], f"{name} must be positive")
        for name in ("frame_step", "window", "max_features", "vocab_branching", "vocab_depth",
                     "max_levels", "local_ba_every", "min_init_matches"):
            if getattr(self, name) < 1:
                fail([name], f"{name} must be >= 1")
        if self.max_segments < 0:
            fail(["max_segments"], "max_segments must be >= 0")
        if self.max_sequence_frames < 2 * self.min_sequence_frames:
            fail(["max_sequence_frames", "min_sequence_frames"],
                 "max_sequence_frames must be at least twice min_sequence_frames")
        if self.refine and not self.sfm:
            fail(["refine", "sfm"], "refine needs the sfm stage")
        if bad:
            raise ConfigError("invalid configuration: " + "; ".join(msgs), sorted(set(bad)))
        if not (100 <= self.m1 <= 500 and 50 <= self.m2 <= 300):
            log.warning("m1=%d, m2=%d outside the usual 100-500 / 50-300 range", self.m1, self.m2)
        return self


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError
            return low in ("true", "1", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", [key]) from None
    return raw


def _read(path: Path, seen) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}", ["include"])
    if not path.is_file():
        raise ConfigError(f"config file {path} not found", ["include"] if seen else [])
    seen = seen | {path}
    lines = path.read_text().splitlines()
    body = [(n, ln.split("#", 1)[0].strip()) for n, ln in enumerate(lines, 1)]
    body = [(n, ln) for n, ln in body if ln]
    if not body or body[0][1].split() != [CONFIG_HEADER, str(CONFIG_VERSION)]:
        raise ConfigError(f"{path}: first line must be '{CONFIG_HEADER} {CONFIG_VERSION}'")
    values = {}
    for n, ln in body[1:]:
        if "=" not in ln:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in ln.split("=", 1))
        if key == "include":
            values.update(_read(path.parent / raw, seen))
            continue
        if key not in _TYPES:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}", [key])
        val = _convert(key, raw)
        if key in ("synth_spec", "features", "dataset_path", "ground_truth", "output") and raw:
            val = str((path.parent / raw).resolve()) if not Path(raw).is_absolute() else raw
        values[key] = val
    return values


def load_config(path) -> RunConfig:
    """Later keys override earlier ones; included files apply at the include line.
    Relative paths resolve against the file that names them."""
    return RunConfig(**_read(Path(path), frozenset())).validate()


def format_config(cfg: RunConfig) -> str:
    out = [f"{CONFIG_HEADER} {CONFIG_VERSION}"]
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
