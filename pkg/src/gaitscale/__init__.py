"""Self-supervised skeleton gait recognition at desk scale: data, models, training, evaluation, scaling laws."""

__version__ = "0.1.0"

from .data import AugmentationConfig, GaitDataset, SkeletonSequence, generate_synthetic_dataset
from .evaluation import EmbeddingSet, EvalReport, evaluate_model, rank_k_accuracy
from .models import GaitModel, ModelConfig, build_model
from .scaling import ScalingFit, ScalingPoint, compute_budget_table, fit_power_law, flops_forward, predict
from .tensor import Tensor, grad_check
from .train import TrainConfig, pretrain

__all__ = [
    "AugmentationConfig",
    "EmbeddingSet",
    "EvalReport",
    "GaitDataset",
    "GaitModel",
    "ModelConfig",
    "ScalingFit",
    "ScalingPoint",
    "SkeletonSequence",
    "Tensor",
    "TrainConfig",
    "build_model",
    "compute_budget_table",
    "evaluate_model",
    "fit_power_law",
    "flops_forward",
    "generate_synthetic_dataset",
    "grad_check",
    "predict",
    "pretrain",
    "rank_k_accuracy",
]
