"""Knowledge-graph-aware bidirectional transformer for sequential recommendation."""

from .config import RunConfig, apply_ablation, load_config, toy_config
from .data import Dataset, load_dataset
from .estimator import KATRecRecommender
from .evaluation import MetricReport, compute_metrics, evaluate
from .model import KATRecModel
from .trainer import Trainer, joint_train, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "KATRecModel",
    "KATRecRecommender",
    "MetricReport",
    "RunConfig",
    "Trainer",
    "apply_ablation",
    "compute_metrics",
    "evaluate",
    "joint_train",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "save_checkpoint",
    "toy_config",
]
