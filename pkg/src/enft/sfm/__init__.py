"""Incremental reconstruction, registration and segment-based refinement."""
from .bundle import bundle_adjust
from .incremental import IncrementalParams, incremental_sfm, register_remaining_frames
from .model import (Reconstruction, Submap, merge_submaps, observations_from_tracks, pose_errors,
                    split_reconstruction)
from .refine import (RefineLevel, RefineParams, RefineReport, coarse_to_fine_refine,
                     final_pose_pass, refine_reconstruction)
from .register import (build_sequences_from_unordered, register_submaps, robust_similarity,
                       shared_track_counts, split_long_sequence)
from .segba import (SegmentBAProblem, SegmentBAResult, apply_delta, build_normal_equations,
                    dump_problem, load_problem, reduce_system, segment_ba)
from .segments import (SegmentPartition, detect_global_splits, detect_split_points,
                       direction_angles, reprojection_joint_errors, select_splits,
                       steepest_descent_directions)
from .trajectory import format_trajectory, parse_trajectory, read_trajectory, write_trajectory


def steepest_descent_direction(rec, frame):
    """g_k of one frame (zero vector when it observes nothing)."""
    return steepest_descent_directions(rec, [frame])[frame]
