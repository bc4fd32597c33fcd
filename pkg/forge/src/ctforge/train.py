"""Fine-tuning loop for the slice classifiers.

Both stages train with Adam at learning rate 2e-4 and beta1 = 0.5. The
Stage-1 recipe freezes the backbone and trains the head only; Stage-2
fine-tunes the whole network. Epoch count and batch size default to 20
and 32 (the recipe leaves them open).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .models import SliceClassifier, build_classifier

LEARNING_RATE = 2e-4
ADAM_BETA1 = 0.5


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainSpec:
    """Recipe for one fine-tuning run.

    The head layout is implied by the stage: pooled features into a
    1024-unit layer and a sigmoid for Stage-1, or 2048- and 1024-unit
    layers and a softmax for Stage-2.
    """

    stage: int
    backbone: str = "tiny"
    learning_rate: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    epochs: int = 20
    batch_size: int = 32
    balanced_sampling: bool = True
    seed: int = 0
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    holdout_accuracy: float | None = None


@dataclass
class TrainResult:
    model: SliceClassifier
    history: list[EpochStats] = field(default_factory=list)

    @property
    def final(self) -> EpochStats:
        return self.history[-1]


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _forward_loss(model, criterion, images, labels, stage):
    logits = model(images)
    if stage == 1:
        logits = logits.reshape(-1)
        loss = criterion(logits, labels.float())
        predicted = (logits >= 0).long()  # sigmoid(logit) >= 0.5
    else:
        loss = criterion(logits, labels)
        predicted = logits.argmax(dim=1)
    return loss, predicted


@torch.no_grad()
def evaluate_accuracy(model: SliceClassifier, images: np.ndarray, labels: np.ndarray,
                      batch_size: int = 32) -> float:
    """Fraction of correctly classified images (uint8 NHWC input)."""
    model.eval()
    correct = 0
    for start in range(0, len(labels), batch_size):
        batch = torch.from_numpy(images[start : start + batch_size]).float()
        target = torch.from_numpy(labels[start : start + batch_size])
        logits = model(batch)
        if model.stage == 1:
            predicted = (logits.reshape(-1) >= 0).long()
        else:
            predicted = logits.argmax(dim=1)
        correct += int((predicted == target).sum())
    return correct / len(labels)


def finetune(
    spec: TrainSpec,
    train_data: tuple[np.ndarray, np.ndarray],
    holdout_data: tuple[np.ndarray, np.ndarray] | None = None,
    log=None,
    stop_at_holdout: float | None = None,
) -> TrainResult:
    """Train a classifier per the spec; returns the model and trajectory.

    ``train_data`` is (NHWC uint8 images in [0, 255], integer labels):
    binary infectious labels for Stage-1, three-way class indices for
    Stage-2. ``spec.epochs`` is the budget; with ``stop_at_holdout`` set,
    training ends as soon as the held-out accuracy reaches that value.
    Raises TrainingDivergedError if the loss goes non-finite.
    """
    images, labels = train_data
    if len(images) != len(labels) or len(labels) == 0:
        raise ValueError("training images and labels must be non-empty and aligned")
    if images.shape[1:] != (images.shape[1], images.shape[1], 3):
        raise ValueError(f"expected square NHWC images with 3 channels, got {images.shape}")

    torch.manual_seed(spec.seed)
    model = build_classifier(spec.stage, spec.backbone, spec.weights_path)
    if spec.stage == 1:
        for parameter in model.backbone.parameters():
            parameter.requires_grad_(False)

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=spec.learning_rate, betas=(spec.beta1, 0.999))
    criterion = nn.BCEWithLogitsLoss() if spec.stage == 1 else nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(spec.seed)

    history: list[EpochStats] = []
    for epoch in range(1, spec.epochs + 1):
        model.train()
        if spec.stage == 1:
            model.backbone.eval()  # frozen stats stay frozen
        total_loss = 0.0
        correct = 0
        for index_batch in _batches(len(labels), spec.batch_size, generator):
            batch = torch.from_numpy(images[index_batch.numpy()]).float()
            target = torch.from_numpy(labels[index_batch.numpy()])
            optimizer.zero_grad()
            loss, predicted = _forward_loss(model, criterion, batch, target, spec.stage)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total_loss += loss_value * len(target)
            correct += int((predicted == target).sum())
        stats = EpochStats(
            epoch=epoch,
            train_loss=total_loss / len(labels),
            train_accuracy=correct / len(labels),
        )
        if holdout_data is not None:
            stats.holdout_accuracy = evaluate_accuracy(model, *holdout_data, spec.batch_size)
        history.append(stats)
        if log is not None:
            holdout = f" holdout_acc={stats.holdout_accuracy:.3f}" if holdout_data else ""
            log(f"epoch {epoch:3d}/{spec.epochs} loss={stats.train_loss:.4f} "
                f"train_acc={stats.train_accuracy:.3f}{holdout}")
        if (
            stop_at_holdout is not None
            and stats.holdout_accuracy is not None
            and stats.holdout_accuracy >= stop_at_holdout
        ):
            break
    model.eval()
    return TrainResult(model=model, history=history)
