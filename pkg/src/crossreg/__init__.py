"""Cross-source point cloud registration toolkit.

Aligns a scan-derived surface cloud (e.g. extracted from a CT-like volume)
with a depth-camera view of the same subject: ingestion, preprocessing,
FPFH + RANSAC global alignment, ICP refinement, evaluation, and a synthetic
data generator that makes the whole benchmark reproducible end to end.
"""

from .backend import BackendBinding, register_external
from .errors import (
    BackendError,
    CrossRegError,
    FormatError,
    PreprocessError,
    RegistrationError,
)
from .evaluation import (
    BenchmarkReport,
    EvalRecord,
    GroundTruthPose,
    MethodSpec,
    RegistrationConfig,
    SuccessThresholds,
    aggregate,
    is_success,
    load_manifest,
    rotation_error,
    run_benchmark,
    translation_error,
)
from .features import FeatureParams, FpfhResult, compute_fpfh, pair_features
from .geometry import (
    NeighborIndex,
    PointCloud,
    RigidTransform,
    estimate_normals,
    random_rigid,
    random_subsample,
    rotation_about,
    voxel_downsample,
)
from .ingest import (
    CameraIntrinsics,
    DepthFrame,
    ScalarVolume,
    extract_isosurface_points,
    read_depth_pair,
    read_ply,
    read_volume,
    reproject_depth,
    write_depth_pair,
    write_ply,
    write_volume,
)
from .preprocess import (
    PlaneModel,
    PreprocessParams,
    TargetReport,
    clamp_range,
    crop_percentile,
    fit_plane_ransac,
    prepare_source,
    prepare_target,
    remove_plane,
    remove_sparse_outliers,
)
from .registration import (
    Correspondences,
    IcpParams,
    RansacParams,
    RegistrationResult,
    evaluate_alignment,
    fit_rigid,
    icp,
    load_transform,
    match_features,
    ransac_global,
    register_global,
    register_global_icp,
    save_transform,
)
from .synth import (
    DIFFICULTY_PRESETS,
    HeadShape,
    NoiseSpec,
    SceneSpec,
    SphereShape,
    SynthPair,
    TableSpec,
    generate_suite,
    make_pair,
    render_depth,
    sample_surface,
)

__version__ = "0.1.0"
