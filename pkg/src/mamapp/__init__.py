"""Mam-App: a compact selective state-space image classifier built on a numpy autodiff core."""
from .tensor import (DimensionError, GraphError, NumericError, Tensor, debug_mode, no_grad,
                     tensor)
from .model import (CheckpointError, ConfigError, MamApp, MamAppConfig, build, count_params,
                    extract_features, forward, load_checkpoint, predict_proba, save_checkpoint)
from .data import DatasetIndex, index_dataset, make_batches, split_counts, stratified_split
from .training import AdamW, TrainLog, smoothed_cross_entropy, smoothing_floor, train
from .evaluation import ConfusionMatrix, EvalReport, confusion, metrics, pca

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CheckpointError", "ConfigError", "ConfusionMatrix", "DatasetIndex", "DimensionError",
    "EvalReport", "GraphError", "MamApp", "MamAppConfig", "NumericError", "Tensor", "TrainLog",
    "build", "confusion", "count_params", "debug_mode", "extract_features", "forward",
    "index_dataset", "load_checkpoint", "make_batches", "metrics", "no_grad", "pca",
    "predict_proba", "save_checkpoint", "smoothed_cross_entropy", "smoothing_floor",
    "split_counts", "stratified_split", "tensor", "train",
]
