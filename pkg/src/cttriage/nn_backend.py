"""Inference backends for the two classifier stages.

Stage-1 backends emit a scalar infection probability per slice; Stage-2
backends emit a (Normal, CAP, COVID19) probability simplex. The two are
distinct types on purpose, so a binary labeler can never be wired into the
three-way slot by accident.

The module also carries double-precision reference implementations of the
head operations the classifiers are built from (global average pooling,
dense layers, sigmoid, softmax). They back the oracle tests and the mock
backends; serialized model graphs run through the ONNX evaluator instead.
"""

from __future__ import annotations

import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .validation import check_probabilities, check_slice_tensor

# Wire contract for serialized model graphs: one slice per call, values in
# [0, 255] as reals; any model-specific normalization (for example /255)
# lives inside the exported graph.
MODEL_INPUT_SHAPE = (1, 512, 512, 3)


class BackendError(RuntimeError):
    """Raised when a backend fails to evaluate a tensor."""


# ---------------------------------------------------------------------------
# Reference head operations (float64)
# ---------------------------------------------------------------------------

def global_average_pool(feature_map: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of an [H, W, C] feature map."""
    arr = np.asarray(feature_map, dtype=np.float64)
    if arr.ndim != 3 or any(d < 1 for d in arr.shape):
        raise ValueError(f"feature map must be [H, W, C] with positive dims, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    return arr.mean(axis=(0, 1))


@dataclass
class DenseLayer:
    """Fully connected layer: out[j] = bias[j] + sum_i weights[j][i] * x[i]."""

    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2D [out, in], got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("dense layer parameters must be finite")


def dense(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape[0] != layer.weights.shape[1]:
        raise ValueError(
            f"input length {vec.shape[0]} does not match layer input size {layer.weights.shape[1]}"
        )
    return layer.weights @ vec + layer.bias


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def softmax(values: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; returns a probability simplex."""
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if vec.size == 0:
        raise ValueError("softmax input must be non-empty")
    if not np.all(np.isfinite(vec)):
        raise ValueError("softmax input contains non-finite values")
    shifted = np.exp(vec - vec.max())
    return shifted / shifted.sum()


# ---------------------------------------------------------------------------
# Backend contracts
# ---------------------------------------------------------------------------

class Stage1Backend(ABC):
    """Binary infectious-vs-non-infectious slice scorer."""

    n_outputs = 1
    #: whether predict() may be called from several threads concurrently
    thread_safe = True

    @abstractmethod
    def predict(self, tensor) -> float:
        """Infection probability in [0, 1] for one slice tensor."""


class Stage2Backend(ABC):
    """Three-way (Normal, CAP, COVID19) slice classifier."""

    n_outputs = 3
    thread_safe = True

    @abstractmethod
    def predict(self, tensor) -> np.ndarray:
        """Probability simplex over the fixed class order for one slice tensor."""


def _tensor_pixels(tensor) -> np.ndarray:
    pixels = tensor.pixels if hasattr(tensor, "pixels") else tensor
    return check_slice_tensor(pixels)


class TensorStats(NamedTuple):
    """Summary statistics a mock rule may condition on."""

    mean: float
    min: float
    max: float


def tensor_stats(tensor) -> TensorStats:
    pixels = _tensor_pixels(tensor)
    return TensorStats(
        mean=float(pixels.mean(dtype=np.float64)),
        min=float(pixels.min()),
        max=float(pixels.max()),
    )


class MockStage1Backend(Stage1Backend):
    """Deterministic test double: a pure rule over tensor summary stats."""

    def __init__(self, rule: Callable[[TensorStats], float]):
        self.rule = rule

    def predict(self, tensor) -> float:
        p = float(self.rule(tensor_stats(tensor)))
        if not 0.0 <= p <= 1.0:
            raise BackendError(f"mock rule produced probability outside [0, 1]: {p}")
        return p


class MockStage2Backend(Stage2Backend):
    """Deterministic test double emitting fixed simplex vectors per rule."""

    def __init__(self, rule: Callable[[TensorStats], np.ndarray]):
        self.rule = rule

    def predict(self, tensor) -> np.ndarray:
        return check_probabilities(self.rule(tensor_stats(tensor)))


# ---------------------------------------------------------------------------
# Mock rule specs (CLI --mock)
# ---------------------------------------------------------------------------
#
# Grammar, clauses tried first to last:
#
#     RULESPEC := CLAUSE (';' CLAUSE)*
#     CLAUSE   := PREDICATE ':' OUTPUT
#     PREDICATE:= 'else' | STAT OP NUMBER
#     STAT     := 'mean' | 'min' | 'max'
#     OP       := '<' | '<=' | '>' | '>='
#     OUTPUT   := NUMBER            (Stage-1: infection probability)
#               | NUMBER,NUMBER,NUMBER   (Stage-2: Normal,CAP,COVID19)
#
# A final 'else' clause is required so the rule is total. Example:
#
#     mean<64:0.1,0.1,0.8;mean<128:0.1,0.8,0.1;else:0.8,0.1,0.1

_PREDICATE_RE = re.compile(r"^(mean|min|max)\s*(<=|>=|<|>)\s*([-+0-9.eE]+)$")

_OPS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def parse_mock_rule(spec: str) -> Stage1Backend | Stage2Backend:
    """Build a mock backend from a rule spec string.

    The backend stage is inferred from the output arity: one number per
    clause gives a Stage-1 mock, three give a Stage-2 mock.
    """
    clauses: list[tuple[Callable[[TensorStats], bool], tuple[float, ...]]] = []
    arity: int | None = None
    saw_else = False
    for raw in spec.split(";"):
        part = raw.strip()
        if not part:
            continue
        if saw_else:
            raise ValueError(f"mock rule clause after 'else': {part!r}")
        predicate, _, output = part.partition(":")
        if not _:
            raise ValueError(f"mock rule clause missing ':': {part!r}")
        try:
            values = tuple(float(v) for v in output.split(","))
        except ValueError:
            raise ValueError(f"mock rule output is not numeric: {output!r}") from None
        if arity is None:
            if len(values) not in (1, 3):
                raise ValueError(f"mock rule output must have 1 or 3 values, got {len(values)}")
            arity = len(values)
        elif len(values) != arity:
            raise ValueError("mock rule clauses mix Stage-1 and Stage-2 outputs")
        predicate = predicate.strip()
        if predicate == "else":
            clauses.append((lambda stats: True, values))
            saw_else = True
            continue
        match = _PREDICATE_RE.match(predicate)
        if match is None:
            raise ValueError(f"bad mock rule predicate: {predicate!r}")
        stat, op, threshold = match.group(1), _OPS[match.group(2)], float(match.group(3))
        clauses.append(
            (lambda stats, stat=stat, op=op, t=threshold: op(getattr(stats, stat), t), values)
        )
    if arity is None:
        raise ValueError("empty mock rule spec")
    if not saw_else:
        raise ValueError("mock rule spec must end with an 'else' clause")

    def rule(stats: TensorStats) -> tuple[float, ...]:
        for matches, values in clauses:
            if matches(stats):
                return values
        raise AssertionError("unreachable: else clause guarantees a match")

    if arity == 1:
        return MockStage1Backend(lambda stats: rule(stats)[0])
    return MockStage2Backend(lambda stats: np.array(rule(stats), dtype=np.float64))


def load_model_backend(path, n_outputs: int | None = None):
    """Load a serialized ONNX model graph as a stage backend.

    The graph must take one 1x512x512x3 real-valued input in [0, 255] and
    produce either a single sigmoid scalar (Stage-1) or a 3-way softmax
    (Stage-2); shape metadata is validated at load time. Pass ``n_outputs``
    to require a specific stage.
    """
    from .onnx_graph import load_onnx_backend

    return load_onnx_backend(path, n_outputs=n_outputs)
