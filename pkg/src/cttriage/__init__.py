"""cttriage: batch CT-volume triage with two-stage slice classification
and weighted patient-level voting."""

from .labels import CAP, CLASS_NAMES, COVID19, NORMAL, UNKNOWN, argmax_class, class_index
from .metrics import (
    ConfusionMatrix,
    EmptyClassError,
    accuracy,
    confusion_matrix,
    evaluate,
    sensitivity,
)
from .nn_backend import (
    BackendError,
    DenseLayer,
    MockStage1Backend,
    MockStage2Backend,
    Stage1Backend,
    Stage2Backend,
    dense,
    global_average_pool,
    load_model_backend,
    parse_mock_rule,
    sigmoid,
    softmax,
    tensor_stats,
)
from .onnx_graph import ModelContractError, OnnxDecodeError, UnsupportedOperatorError
from .pipeline import (
    DEFAULT_WEIGHTS,
    CtVolumeClassifier,
    PatientPrediction,
    SliceVerdict,
    VoteCounts,
    VoteWeights,
    classify_slices,
    diagnose,
    label_slices,
    run_dataset,
    tally_verdicts,
    vote,
)
from .preprocess import (
    SlicePreprocessor,
    SliceTensor,
    SliceWindow,
    WindowSpec,
    make_slice_tensor,
    preprocess_volume,
    select_middle_slices,
    window_hu,
    window_image,
)
from .report import EvalReport, PatientRecord, SliceRecord, load_report, write_report
from .volume_io import (
    CtVolume,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    VolumeFormatError,
    load_manifest,
    load_slice_labels,
    load_volume,
    write_slice_labels,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "CAP",
    "CLASS_NAMES",
    "COVID19",
    "ConfusionMatrix",
    "CtVolume",
    "CtVolumeClassifier",
    "DEFAULT_WEIGHTS",
    "DatasetManifest",
    "DenseLayer",
    "EmptyClassError",
    "EvalReport",
    "ManifestEntry",
    "ManifestError",
    "MockStage1Backend",
    "MockStage2Backend",
    "ModelContractError",
    "NORMAL",
    "OnnxDecodeError",
    "PatientPrediction",
    "PatientRecord",
    "SlicePreprocessor",
    "SliceRecord",
    "SliceTensor",
    "SliceVerdict",
    "SliceWindow",
    "Stage1Backend",
    "Stage2Backend",
    "UNKNOWN",
    "UnsupportedOperatorError",
    "VolumeFormatError",
    "VoteCounts",
    "VoteWeights",
    "WindowSpec",
    "accuracy",
    "argmax_class",
    "class_index",
    "classify_slices",
    "confusion_matrix",
    "dense",
    "diagnose",
    "evaluate",
    "global_average_pool",
    "label_slices",
    "load_manifest",
    "load_model_backend",
    "load_report",
    "load_slice_labels",
    "load_volume",
    "make_slice_tensor",
    "parse_mock_rule",
    "preprocess_volume",
    "run_dataset",
    "select_middle_slices",
    "sensitivity",
    "sigmoid",
    "softmax",
    "tally_verdicts",
    "tensor_stats",
    "vote",
    "window_hu",
    "window_image",
    "write_report",
    "write_slice_labels",
    "write_volume",
]
