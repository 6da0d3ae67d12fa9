"""TBDM-Net speech emotion recognition: features, model, training and evaluation."""

from .errors import ConfigError, DataError, NumericError, TBDMError
from .model import ModelConfig, ModelParams, build, forward, param_count, predict_proba
from .training import FeatureSet, TrainConfig, crossval, kfold_split, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "TBDMError",
    "ModelConfig",
    "ModelParams",
    "build",
    "forward",
    "param_count",
    "predict_proba",
    "FeatureSet",
    "TrainConfig",
    "crossval",
    "kfold_split",
    "train",
]
