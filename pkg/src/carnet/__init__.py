"""Attack-aware underwater image enhancement and detection at desk scale."""

__version__ = "0.1.0"

from ._validation import (
    CarnetError,
    ConfigError,
    DimensionError,
    NumericError,
    ParameterError,
)
from .apd import Discriminator, aggregate_kernel, js_divergence, kl_divergence, triplet_loss
from .attacks import AttackObjective, PerturbationBudget, metric_contrastive, pgd_attack, project, sign_step
from .data import make_synthetic_dataset, psnr, ssim
from .detector import AnchorGrid, DetectionSet, TinyDetector, mean_average_precision
from .estimators import CARNetEstimator, PGDAttack
from .haar import haar_squeeze, haar_unsqueeze
from .inn import Enhancer, decompose, reconstruct
from .model import CARNet, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, run_stage, total_loss

__all__ = [
    "AnchorGrid",
    "AttackObjective",
    "CARNet",
    "CARNetEstimator",
    "CarnetError",
    "ConfigError",
    "DetectionSet",
    "DimensionError",
    "Discriminator",
    "Enhancer",
    "NumericError",
    "PGDAttack",
    "ParameterError",
    "PerturbationBudget",
    "TinyDetector",
    "TrainConfig",
    "aggregate_kernel",
    "decompose",
    "haar_squeeze",
    "haar_unsqueeze",
    "js_divergence",
    "kl_divergence",
    "load_checkpoint",
    "make_synthetic_dataset",
    "mean_average_precision",
    "metric_contrastive",
    "pgd_attack",
    "project",
    "psnr",
    "reconstruct",
    "run_stage",
    "save_checkpoint",
    "sign_step",
    "ssim",
    "total_loss",
    "triplet_loss",
]
