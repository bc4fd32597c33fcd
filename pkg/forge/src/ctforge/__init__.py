"""ctforge: training and ONNX-export glue for the cttriage classifiers."""

from .data import (
    balance_classes,
    collect_stage1_pools,
    collect_stage2_pools,
    make_shape_dataset,
    pools_to_arrays,
    read_manifest,
    split_train_holdout,
)
from .fixtures import make_fixture
from .models import InferenceModel, SliceClassifier, build_backbone, build_classifier
from .onnx_export import UnsupportedLayerError, export_onnx
from .train import EpochStats, TrainingDivergedError, TrainResult, TrainSpec, evaluate_accuracy, finetune

__version__ = "0.1.0"

__all__ = [
    "EpochStats",
    "InferenceModel",
    "SliceClassifier",
    "TrainResult",
    "TrainSpec",
    "TrainingDivergedError",
    "UnsupportedLayerError",
    "balance_classes",
    "build_backbone",
    "build_classifier",
    "collect_stage1_pools",
    "collect_stage2_pools",
    "evaluate_accuracy",
    "export_onnx",
    "finetune",
    "make_fixture",
    "make_shape_dataset",
    "pools_to_arrays",
    "read_manifest",
    "split_train_holdout",
]
