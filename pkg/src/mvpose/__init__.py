"""Multi-view weakly-supervised 2.5D human pose: geometry, heatmaps, alignment, losses, synthesis, metrics."""

from .alignment import RigidTransform, apply, weighted_rigid_align, weighted_similarity_align
from .errors import MVPoseError, NumericalError, ValidationError
from .heatmap import Grid, HeatmapStack, soft_argmax, spatial_softmax
from .metrics import EvalReport, mpjpe, nmpjpe, pck, pmpjpe, recover_scale
from .objective import LossWeights, ObjectiveConfig, ViewBatch, forward
from .skeleton import (
    CameraIntrinsics,
    Pose25D,
    Pose3D,
    SkeletonDef,
    default_skeleton,
    project,
    reconstruct,
    scale_normalize,
    solve_root_depth,
)
from .synth import NoiseSpec, generate_dataset
from .train import TrainConfig, train

__version__ = "0.1.0"
