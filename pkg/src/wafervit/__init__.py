"""Tiny Vision Transformers for multi-label wafer-map defect classification.

Built on a small numpy reverse-mode autodiff engine (:mod:`wafervit.tensor`).
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, FormatError, NumericError, ShapeError,
                     TrainingDiverged, UndefinedMetricError, WaferVitError)
from .patterns import BASE_DEFECTS, PATTERN_CLASSES, class_of, describe, get_class
from .vit import PRESETS, VitConfig, VitModel, count_params, forward, init_weights
from .data import Dataset, WaferMap, generate, generate_dataset, split
from .metrics import EvalReport, evaluate
from .trainer import TrainConfig, train

__all__ = [
    "BASE_DEFECTS", "PATTERN_CLASSES", "PRESETS", "ConfigError", "ContractError", "Dataset",
    "EvalReport", "FormatError", "NumericError", "ShapeError", "TrainConfig", "TrainingDiverged",
    "UndefinedMetricError", "VitConfig", "VitModel", "WaferMap", "WaferVitError", "class_of",
    "count_params", "describe", "evaluate", "forward", "generate", "generate_dataset",
    "get_class", "init_weights", "split", "train",
]
