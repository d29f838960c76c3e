"""Synthetic scenes and brute-force reference implementations."""
from .images import ImagePair, TwoPlaneScene, render, two_plane_pair
from .scene import (SceneSpec, SyntheticData, format_scene_spec, fragment_tracks, generate,
                    load_scene_spec, parse_scene_spec)
from .drift import closure_gap, drift_transforms, ground_truth_submap, inject_drift
from .oracles import (DenseSolution, brute_force_track_merge, dense_ba_oracle,
                      greedy_sequences_reference)
from .toy import random_segment_problem
