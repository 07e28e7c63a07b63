"""Speech-emotion intensity regression with a frozen dynamic-window transformer."""

__version__ = "0.1.0"

from .augment import AugmentConfig, NoiseBank
from .dataio import EMOTIONS, DatasetManifest, ScoreTable, UtteranceRecord
from .evaluation import EvalReport, compare_runs, rmse
from .fusion import assign_weights_by_val_rmse, fuse_average, fuse_max, fuse_weighted
from .model import ModelConfig, ModelParams, model_forward
from .train import TrainConfig, train

__all__ = [
    "EMOTIONS",
    "AugmentConfig",
    "DatasetManifest",
    "EvalReport",
    "ModelConfig",
    "ModelParams",
    "NoiseBank",
    "ScoreTable",
    "TrainConfig",
    "UtteranceRecord",
    "assign_weights_by_val_rmse",
    "compare_runs",
    "fuse_average",
    "fuse_max",
    "fuse_weighted",
    "model_forward",
    "rmse",
    "train",
]
