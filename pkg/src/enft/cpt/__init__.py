"""Consecutive point tracking: two-pass matching, track linking, keyframes."""
from .linking import link_tracks, select_keyframes
from .matching import (FIRST, SECOND, MatchingCost, MatchingWeights, PairMatchResult,
                       first_pass_match, illumination_ratio, match_pair, sample_bilinear,
                       second_pass_match)
from .tracker import track_sequence
