"""Aspect-ratio aware vehicle re-identification toolkit.

Library layout:

* ``geometry`` — strided patch grids, aspect-ratio statistics, resize plans
* ``mixup`` — intra-image patch-mixup augmentation
* ``losses`` — identity cross-entropy + batch-hard triplet loss, gradients
* ``fusion`` — aspect-ratio adaptive multi-model feature fusion
* ``evaluation`` — mAP / CMC retrieval metrics
* ``vit`` — toy transformer encoder with analytic backprop
* ``synthetic`` — deterministic labeled image generator
* ``io`` — manifests, feature stores, run configs, image codecs
* ``cli`` — pipeline subcommands
"""

from .evaluation import (
    EvalProtocol,
    EvalReport,
    FeatureSet,
    average_precision,
    cmc_curve,
    evaluate,
    evaluate_single_shot,
    rank_gallery,
)
from .fusion import FusionPolicy, TaggedFeature, adaptive_weight, fuse_features, l2_normalize
from .geometry import (
    AspectRatioStats,
    ImageShape,
    PatchGrid,
    PatchSpec,
    ResizePlan,
    ResizeTarget,
    aspect_ratio_stats,
    compute_patch_grid,
    kmeans_1d,
    plan_input_sizes,
)
from .losses import (
    EmbeddingBatch,
    FDCheckReport,
    LogitBatch,
    finite_difference_check,
    id_loss,
    id_loss_gradient,
    overall_loss,
    softplus,
    squared_euclidean_matrix,
    triplet_loss,
    triplet_loss_gradient,
)
from .mixup import (
    Image,
    MixupConfig,
    MixupPlan,
    apply_patch_mixup,
    attention_scores,
    augment_batch,
    build_mixup_plan,
    pairwise_patch_distances,
)
from .synthetic import SyntheticSample, render_instance, synthesize_dataset
from .vit import (
    ModelParams,
    SGDConfig,
    ToyViTConfig,
    TrainResult,
    extract_patches,
    forward,
    forward_batch,
    init_params,
    train_steps,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
