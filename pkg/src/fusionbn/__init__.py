"""Test-time adaptation of batch-normalization statistics.

A trained network's per-channel running statistics stop matching the
activation distribution when the input distribution shifts (for stained
tissue patches: a chromatic shift between centers). This package adapts
the statistics at inference without labels or gradient steps: collect
target running averages from representative batches, then normalize with
a weighted fusion of the source- and target-standardized terms.
"""

from .adapt import (
    AccumulationLog,
    Fused,
    PerBatch,
    SourcePrior,
    SourceRunning,
    TargetRunning,
    accumulate_target_stats,
    bn_forward_fused,
    bn_forward_perbatch,
    bn_forward_source_prior,
    bn_forward_target,
    representative_batches,
    run_fusion_protocol,
)
from .layers import (
    BatchNormState,
    Model,
    NetworkSpec,
    bn_forward_source,
    bn_forward_train,
    build_model,
    source_apply,
)
from .metrics import balanced_accuracy, dice_score, mean_dice, test_time_augment
from .stainsim import (
    CenterDataset,
    ShiftMagnitude,
    StainTransform,
    apply_stain,
    chromatic_distance,
    generate_center,
    load_image_directory,
    make_benchmark,
)
from .train import RECIPES, TrainRecipe, train

__version__ = "0.1.0"

__all__ = [
    "AccumulationLog",
    "BatchNormState",
    "CenterDataset",
    "Fused",
    "Model",
    "NetworkSpec",
    "PerBatch",
    "RECIPES",
    "ShiftMagnitude",
    "SourcePrior",
    "SourceRunning",
    "StainTransform",
    "TargetRunning",
    "TrainRecipe",
    "accumulate_target_stats",
    "apply_stain",
    "balanced_accuracy",
    "bn_forward_fused",
    "bn_forward_perbatch",
    "bn_forward_source",
    "bn_forward_source_prior",
    "bn_forward_target",
    "bn_forward_train",
    "build_model",
    "chromatic_distance",
    "dice_score",
    "generate_center",
    "load_image_directory",
    "make_benchmark",
    "mean_dice",
    "representative_batches",
    "run_fusion_protocol",
    "source_apply",
    "test_time_augment",
    "train",
]
