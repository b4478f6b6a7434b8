"""Semantic-octree label transfer and coarse change detection for façade point clouds."""

from .core import (
    NEW,
    UNLABELED,
    CloudFormatError,
    Cube,
    DomainError,
    KnnIndex,
    LabeledCloud,
    SemOctreeError,
    bounding_cube,
    knn,
)
from .evaluation import ConfusionMatrix, cohen_kappa, confusion_matrix, overall_accuracy, summarize
from .io import load_cloud, save_cloud
from .octree import (
    OUT_OF_BOUNDS,
    ChangeReport,
    LeafKind,
    SemanticLabelTransfer,
    SemanticLeaf,
    SemanticOctree,
    compute_depth,
)
from .preprocess import (
    SorParams,
    StatisticalOutlierRemoval,
    SurfaceStats,
    VoxelDownsampler,
    estimate_surface_stats,
    statistical_outlier_removal,
    voxel_downsample,
)
from .registration import (
    ConvergenceCriteria,
    GICPRegistration,
    RegistrationError,
    RegistrationResult,
    RigidTransform,
    apply_transform,
    gicp_register,
)

__version__ = "0.1.0"
