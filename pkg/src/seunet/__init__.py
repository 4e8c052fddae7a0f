"""Residual U-Net with SE normalization for head-and-neck tumour segmentation in PET/CT."""

from .checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .gradcheck import GradcheckError, gradcheck
from .inference import (
    EnsembleConfig,
    SplitPlan,
    combine_probabilities,
    ensemble_predict,
    evaluate,
    make_splits,
    predict_case,
)
from .layers import se_block, se_norm
from .losses import LossConfig, focal_loss, segmentation_metrics, soft_dice_loss, total_loss
from .model import ConfigError, ModelConfig, build_model, forward
from .ops import conv3d, conv3d_naive, conv3d_transposed, maxpool3d, trilinear_resize
from .tensor import GraphError, ShapeError, Tensor, no_grad, precision
from .train import OptimizerState, TrainConfig, adam_step, cosine_lr, train

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConfigMismatchError",
    "EnsembleConfig",
    "GradcheckError",
    "GraphError",
    "LossConfig",
    "ModelConfig",
    "OptimizerState",
    "RunConfig",
    "ShapeError",
    "SplitPlan",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "build_model",
    "combine_probabilities",
    "conv3d",
    "conv3d_naive",
    "conv3d_transposed",
    "cosine_lr",
    "ensemble_predict",
    "evaluate",
    "focal_loss",
    "forward",
    "gradcheck",
    "load_checkpoint",
    "load_config",
    "make_splits",
    "maxpool3d",
    "no_grad",
    "precision",
    "predict_case",
    "save_checkpoint",
    "se_block",
    "se_norm",
    "segmentation_metrics",
    "soft_dice_loss",
    "total_loss",
    "train",
    "trilinear_resize",
]
