"""Non-consecutive track matching driven by a frame-pair match matrix."""
from .main import NCTMParams, NCTMResult, TrackPairSet, count_matrix, nctm_main, resolve_votes
from .pairs import FramePairMatch, TrackIndex, match_frame_pair
from .vocab import (MatchMatrix, VocabTree, build_vocab_tree, init_match_matrix, load_pgm,
                    long_tracks, save_pgm)


def run_nctm(tracks, frames, keyframes, params: NCTMParams = NCTMParams(), branching=8, depth=4,
             min_span=5, band=1, max_distance=0.5):
    """Vocabulary tree, initial match matrix and the main procedure in one call."""
    tree = build_vocab_tree(long_tracks(tracks, keyframes, min_span), branching, depth, params.seed)
    M = init_match_matrix(tree, tracks, keyframes, band, max_distance)
    return nctm_main(M, tracks, frames, params)
