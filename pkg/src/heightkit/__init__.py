"""Joint building height estimation and instance extraction on numpy."""

from .config import ConfigError, validate_config
from .fusion import FusionConfig, nms_baseline, wsf
from .losses import LossWeights, total_loss
from .metrics import ap_masks, combined_score, delta_accuracy, evaluate_run
from .network import ToyDualDecoder, forward, gradcheck
from .pipeline import StageError, run_pipeline
from .postproc import aggregate_multiscale, correct_heights, resize_bilinear
from .preproc import (
    HierarchySpec,
    cluster_hierarchy_spec,
    compute_norm_constant,
    denormalize_heights,
    normalize_heights,
    synthesize_hierarchy_labels,
)
from .raster import (
    BBox,
    HeightMap,
    HierarchyMap,
    Instance,
    InstanceSet,
    NormalizedHeightMap,
    rle_decode,
    rle_encode,
)
from .synth import SceneConfig, generate_split, generate_tile
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ConfigError",
    "FusionConfig",
    "HeightMap",
    "HierarchyMap",
    "HierarchySpec",
    "Instance",
    "InstanceSet",
    "LossWeights",
    "NormalizedHeightMap",
    "SceneConfig",
    "StageError",
    "ToyDualDecoder",
    "TrainConfig",
    "aggregate_multiscale",
    "ap_masks",
    "cluster_hierarchy_spec",
    "combined_score",
    "compute_norm_constant",
    "correct_heights",
    "delta_accuracy",
    "denormalize_heights",
    "evaluate_run",
    "forward",
    "generate_split",
    "generate_tile",
    "gradcheck",
    "nms_baseline",
    "normalize_heights",
    "resize_bilinear",
    "rle_decode",
    "rle_encode",
    "run_pipeline",
    "synthesize_hierarchy_labels",
    "total_loss",
    "train",
    "validate_config",
    "wsf",
]
