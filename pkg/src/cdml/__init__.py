"""Siamese deep metric learning for person re-identification, on numpy."""

from .data import Dataset, ImageSample, SynthSpec, generate_synthetic, load_dataset
from .evaluation import cmc, evaluate
from .extractor import ExtractorConfig, extract, extract_pair, init_params
from .metric import MetricLayer, constraint_gradient, constraint_penalty, distance, pair_loss
from .mining import MiningConfig, hard_negative_select, moderate_positive_select
from .model import Model, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

__all__ = [
    "Dataset",
    "ExtractorConfig",
    "ImageSample",
    "MetricLayer",
    "MiningConfig",
    "Model",
    "SynthSpec",
    "TrainConfig",
    "cmc",
    "constraint_gradient",
    "constraint_penalty",
    "distance",
    "evaluate",
    "extract",
    "extract_pair",
    "fit",
    "generate_synthetic",
    "hard_negative_select",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "moderate_positive_select",
    "pair_loss",
    "save_checkpoint",
]
