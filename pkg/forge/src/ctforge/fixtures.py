"""Tiny committed model fixtures for integration tests.

A fixture is a minimal conv + pool + dense graph with the full wire
contract (1x512x512x3 input in [0, 255], sigmoid or softmax output),
deterministic from its seed, and well under a megabyte on disk. The
consumer's test suite loads the committed files without ever importing
this package.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .models import InferenceModel, build_classifier
from .onnx_export import export_onnx


def make_fixture(stage: int, path: Path | str, seed: int = 0) -> Path:
    """Write a fixture model for the given stage; returns the path."""
    torch.manual_seed(seed)
    classifier = build_classifier(stage, backbone="fixture")
    export_onnx(InferenceModel(classifier), path)
    return Path(path)
