"""Coarse-to-fine adaptive reasoning over multi-scale region pyramids."""

from .budget import BudgetReport, CostModel
from .dynamics import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .metrics import compute_auc
from .pyramid import EncoderStub, FeatureBank, FeatureCache, PyramidConfig, make_manifest, plant_instance
from .reasoner import ReasonerConfig, Trajectory, infer
from .training import TrainConfig, train

__all__ = [
    "BudgetReport",
    "CostModel",
    "EncoderStub",
    "FeatureBank",
    "FeatureCache",
    "ModelConfig",
    "ModelParams",
    "PyramidConfig",
    "ReasonerConfig",
    "TrainConfig",
    "Trajectory",
    "compute_auc",
    "infer",
    "load_checkpoint",
    "make_manifest",
    "plant_instance",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
