from .checkpoint import load_checkpoint, save_checkpoint
from .config import MaskConfig, ModelConfig, RunConfig
from .data import DatasetConfig, LoadedDataset, generate_dataset, load_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DivergenceError,
    EmptySubsetError,
    MaskBudgetError,
    MaskError,
    MSLError,
    NonFiniteError,
    ShapeError,
    WeightSharingError,
)
from .evaluation import EvalConfig, compare, evaluate, evaluate_masked
from .loss import LossWeights, total_loss
from .masking import Mask, MaskSubsets, apply_mask, build_subsets, load_subsets, save_subsets
from .metrics import MetricsReport, ScoredPredictions, compute_report, mean_average_precision
from .model import Architecture, ModelParams, init_params, predict
from .sources import DirectoryMaskSource, MaskSource, ProceduralMaskSource
from .stats import EpochStats
from .telemetry import TrainingMetrics
from .training import TrainConfig, msl_step, train, vanilla_step

__all__ = [
    "Architecture",
    "ModelParams",
    "init_params",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "Mask",
    "MaskSubsets",
    "MaskSource",
    "ProceduralMaskSource",
    "DirectoryMaskSource",
    "build_subsets",
    "apply_mask",
    "save_subsets",
    "load_subsets",
    "DatasetConfig",
    "LoadedDataset",
    "generate_dataset",
    "load_dataset",
    "LossWeights",
    "total_loss",
    "TrainConfig",
    "msl_step",
    "vanilla_step",
    "train",
    "EpochStats",
    "TrainingMetrics",
    "ScoredPredictions",
    "MetricsReport",
    "compute_report",
    "mean_average_precision",
    "EvalConfig",
    "evaluate",
    "evaluate_masked",
    "compare",
    "MaskConfig",
    "ModelConfig",
    "RunConfig",
    "MSLError",
    "ShapeError",
    "NonFiniteError",
    "CheckpointError",
    "MaskBudgetError",
    "MaskError",
    "EmptySubsetError",
    "DatasetError",
    "DivergenceError",
    "WeightSharingError",
    "ConfigError",
]

__version__ = "0.1.0"
