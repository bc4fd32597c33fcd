"""Slice classifier architectures: backbones, pooled dense heads, and the
display-range input adapter.

Every model takes NHWC tensors with values in [0, 255] (the triage wire
contract) and converts internally: permute to NCHW, scale by 1/255, run
the backbone, pool, and classify. Training operates on the logits;
``InferenceModel`` appends the sigmoid/softmax activation for export so
the probability computation ships inside the graph.
"""

from __future__ import annotations

import torch
import torch.nn as nn

STAGE1_HIDDEN = (1024,)
STAGE2_HIDDEN = (2048, 1024)


class PooledDenseHead(nn.Module):
    """Global average pooling followed by dense layers down to the logits."""

    def __init__(self, in_channels: int, hidden: tuple[int, ...], n_outputs: int):
        super().__init__()
        layers: list[nn.Module] = []
        width = in_channels
        for units in hidden:
            layers.append(nn.Linear(width, units))
            layers.append(nn.ReLU())
            width = units
        layers.append(nn.Linear(width, n_outputs))
        self.fcs = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(features, 1)
        return self.fcs(torch.flatten(pooled, 1))


class TinyBackbone(nn.Module):
    """Small convolutional feature extractor for fixtures and surrogates.

    An aggressive leading average pool keeps the cost of 512x512 inputs
    down to something a CPU trains in minutes.
    """

    out_channels = 64

    def __init__(self):
        super().__init__()
        self.stem = nn.AvgPool2d(4)
        self.blocks = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))


class FixtureBackbone(nn.Module):
    """Smallest usable feature extractor; keeps fixture files tiny."""

    out_channels = 4

    def __init__(self):
        super().__init__()
        self.pool = nn.AvgPool2d(16)
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(self.pool(x)))


def _torchvision_backbone(name: str, weights_path: str | None):
    import torchvision.models as tvm

    if name == "densenet121":
        model = tvm.densenet121(weights=None)
        backbone = nn.Sequential(model.features, nn.ReLU())
        channels = 1024
    elif name == "efficientnet_b0":
        model = tvm.efficientnet_b0(weights=None)
        backbone = model.features
        channels = 1280
    else:
        raise ValueError(f"unknown backbone {name!r}")
    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    backbone.out_channels = channels
    return backbone


def build_backbone(name: str, weights_path: str | None = None) -> nn.Module:
    """Backbones: tiny, fixture, densenet121, efficientnet_b0.

    The torchvision backbones initialize randomly unless a local weights
    file is supplied; there is no network access for pretrained downloads.
    """
    if name == "tiny":
        return TinyBackbone()
    if name == "fixture":
        return FixtureBackbone()
    return _torchvision_backbone(name, weights_path)


class SliceClassifier(nn.Module):
    """Backbone + pooled dense head over wire-contract input tensors."""

    def __init__(self, backbone: nn.Module, stage: int, fixture_head: bool = False):
        super().__init__()
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        self.stage = stage
        self.backbone = backbone
        hidden = () if fixture_head else (STAGE1_HIDDEN if stage == 1 else STAGE2_HIDDEN)
        self.head = PooledDenseHead(backbone.out_channels, hidden, 1 if stage == 1 else 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 3, 1, 2) / 255.0
        return self.head(self.backbone(x))


class InferenceModel(nn.Module):
    """Classifier with its output activation, the shape that gets exported."""

    def __init__(self, classifier: SliceClassifier):
        super().__init__()
        self.classifier = classifier
        self.stage = classifier.stage

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.classifier(x)
        if self.stage == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


def build_classifier(
    stage: int, backbone: str = "tiny", weights_path: str | None = None
) -> SliceClassifier:
    return SliceClassifier(build_backbone(backbone, weights_path), stage=stage,
                           fixture_head=backbone == "fixture")
