"""Training-free correspondence matching on multi-layer feature pyramids.

Dense nearest-neighbor matches on the deepest layer seed a fundamental
matrix that is re-estimated layer by layer toward full resolution, with
epipolar outlier rejection at every step.  No learned matcher and no
training loop: any feature backbone exported to the supported interchange
format (or the built-in box-downsampling pyramid) drives the cascade.
"""

from .cascade import (
    CascadeConfig,
    CascadeResult,
    LayerDiagnostics,
    LayerMatches,
    cascade_match,
    confidence_score,
    filter_by_epipolar,
    score_matches,
    select_top_confident,
)
from .errors import (
    AmbiguousCheirality,
    DegenerateCameraSpec,
    DegenerateInput,
    EmptyCandidates,
    EpimatchError,
    IllConditioned,
    ImageTooSmall,
    InsufficientMatches,
    InsufficientSeedMatches,
    MalformedMatrix,
    MalformedRecord,
    MissingFile,
    ModelLoadError,
    OutOfBounds,
    PreprocessError,
    ProjectionAtInfinity,
    ShapeMismatch,
)
from .evaluation import (
    HomographyGT,
    MetricReport,
    PairRecord,
    PoseGT,
    homography_accuracy,
    load_hpatches_sequence,
    load_pose_pairs,
    matching_precision,
    mma,
    pose_auc,
    pose_error_for_pair,
    ransac_fundamental,
    summarize_homography,
    summarize_mma,
    summarize_pose,
)
from .features import (
    BackendManifest,
    FeatureMap,
    FeaturePyramid,
    ManifestLayer,
    builtin_manifest,
    builtin_pyramid,
    extract_pyramid,
    load_image,
    load_manifest,
)
from .geometry import (
    CameraIntrinsics,
    decompose_essential,
    eight_point,
    essential_from_fundamental,
    fundamental_from_pose,
    pose_angular_error,
    sampson_distance,
    sampson_distances,
    triangulate_points,
)
from .matching import MatchSet, dense_nn_match
from .synthetic import (
    SceneSpec,
    SyntheticScene,
    WarpScene,
    WarpSpec,
    synth_scene,
    synth_warp_pair,
    write_hpatches_sequence,
    write_pose_pairs,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousCheirality",
    "BackendManifest",
    "CameraIntrinsics",
    "CascadeConfig",
    "CascadeResult",
    "DegenerateCameraSpec",
    "DegenerateInput",
    "EmptyCandidates",
    "EpimatchError",
    "FeatureMap",
    "FeaturePyramid",
    "HomographyGT",
    "IllConditioned",
    "ImageTooSmall",
    "InsufficientMatches",
    "InsufficientSeedMatches",
    "LayerDiagnostics",
    "LayerMatches",
    "MalformedMatrix",
    "MalformedRecord",
    "ManifestLayer",
    "MatchSet",
    "MetricReport",
    "MissingFile",
    "ModelLoadError",
    "OutOfBounds",
    "PairRecord",
    "PoseGT",
    "PreprocessError",
    "ProjectionAtInfinity",
    "SceneSpec",
    "ShapeMismatch",
    "SyntheticScene",
    "WarpScene",
    "WarpSpec",
    "builtin_manifest",
    "builtin_pyramid",
    "cascade_match",
    "confidence_score",
    "decompose_essential",
    "dense_nn_match",
    "eight_point",
    "essential_from_fundamental",
    "extract_pyramid",
    "filter_by_epipolar",
    "fundamental_from_pose",
    "homography_accuracy",
    "load_hpatches_sequence",
    "load_image",
    "load_manifest",
    "load_pose_pairs",
    "matching_precision",
    "mma",
    "pose_angular_error",
    "pose_auc",
    "pose_error_for_pair",
    "ransac_fundamental",
    "sampson_distance",
    "sampson_distances",
    "score_matches",
    "select_top_confident",
    "summarize_homography",
    "summarize_mma",
    "summarize_pose",
    "synth_scene",
    "synth_warp_pair",
    "triangulate_points",
    "write_hpatches_sequence",
    "write_pose_pairs",
    "__version__",
]
