from .assign import Assignment, LossWeights, assign_labels, matching_cost, min_cost_matching
from .augment import FrameDirective, augment_clip
from .loop import TrainConfig, TrainingSample, TrainResult, lr_at_epoch, run_clip, sample_clip, train
from .loss import compute_loss, sigmoid_focal_loss

__all__ = [
    "Assignment",
    "FrameDirective",
    "LossWeights",
    "TrainConfig",
    "TrainResult",
    "TrainingSample",
    "assign_labels",
    "augment_clip",
    "compute_loss",
    "lr_at_epoch",
    "matching_cost",
    "min_cost_matching",
    "run_clip",
    "sample_clip",
    "sigmoid_focal_loss",
    "train",
]
