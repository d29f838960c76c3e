"""Multi-view geometry primitives."""
from .camera import CameraIntrinsics, backproject, project, project_points, projection_jacobian
from .epipolar import (FundamentalMatrix, epipolar_distance, estimate_fundamental_ransac,
                       fundamental_from_poses, point_line_distance, symmetric_epipolar_distance)
from .homography import Homography, apply_homography, estimate_homographies_multi_ransac
from .similarity import estimate_similarity
from .transforms import (CameraPose, SimilarityTransform, params_to_similarity, rodrigues,
                         rotation_log, similarity_to_params)
from .twoview import refine_pose, relative_pose, resect, triangulate_multiview, triangulate_pair

__all__ = [
    "CameraIntrinsics", "CameraPose", "FundamentalMatrix", "Homography", "SimilarityTransform",
    "apply_homography", "backproject", "epipolar_distance", "estimate_fundamental_ransac",
    "estimate_homographies_multi_ransac", "estimate_similarity", "fundamental_from_poses",
    "params_to_similarity", "point_line_distance", "project", "project_points",
    "projection_jacobian", "refine_pose", "relative_pose", "resect", "rodrigues", "rotation_log",
    "similarity_to_params", "symmetric_epipolar_distance", "triangulate_multiview",
    "triangulate_pair",
]
