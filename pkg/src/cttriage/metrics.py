"""Slice- and patient-level scoring: confusion matrices, accuracy, and
class-wise sensitivity.

Tallies are exact integer counts; the single division producing each
metric happens last, so results carry no accumulation-order dependence.
The class order is the fixed (Normal, CAP, COVID19) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import CLASS_NAMES, NORMAL, UNKNOWN, class_index
from .report import EvalReport, PatientRecord
from .volume_io import DatasetManifest


class EmptyClassError(ValueError):
    """Raised when a metric is undefined because a truth class is empty."""


@dataclass
class ConfusionMatrix:
    """k x k integer tally; rows are truth, columns are prediction."""

    cells: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.int64)
        k = len(self.class_names)
        if self.cells.shape != (k, k):
            raise ValueError(f"confusion matrix must be {k}x{k}, got {self.cells.shape}")
        if (self.cells < 0).any():
            raise ValueError("confusion matrix cells must be non-negative")

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def as_lists(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.cells]


def confusion_matrix(pairs, k: int = 3, class_names: tuple[str, ...] = CLASS_NAMES) -> ConfusionMatrix:
    """Tally (truth, predicted) index pairs into a k x k matrix."""
    cells = np.zeros((k, k), dtype=np.int64)
    for truth, predicted in pairs:
        if not (0 <= truth < k and 0 <= predicted < k):
            raise ValueError(f"class index out of range for k={k}: ({truth}, {predicted})")
        cells[truth, predicted] += 1
    return ConfusionMatrix(cells=cells, class_names=class_names)


def sensitivity(cm: ConfusionMatrix, c: int) -> float:
    """Recall of class c: cells[c][c] / row total. Errors on an empty row."""
    if not 0 <= c < cm.k:
        raise ValueError(f"class index {c} out of range for k={cm.k}")
    row_total = int(cm.cells[c].sum())
    if row_total == 0:
        raise EmptyClassError(f"no truth samples of class {cm.class_names[c]!r}")
    return int(cm.cells[c, c]) / row_total


def accuracy(cm: ConfusionMatrix) -> float:
    """Trace over total. Errors on an empty matrix."""
    total = cm.total
    if total == 0:
        raise EmptyClassError("confusion matrix is empty")
    return int(np.trace(cm.cells)) / total


def _metrics_block(cm: ConfusionMatrix) -> dict:
    sens = {}
    for name in cm.class_names:
        idx = class_index(name)
        row_total = int(cm.cells[idx].sum())
        sens[name] = (int(cm.cells[idx, idx]) / row_total) if row_total else None
    return {
        "class_names": list(cm.class_names),
        "confusion_matrix": cm.as_lists(),
        "accuracy": accuracy(cm) if cm.total else None,
        "sensitivity": sens,
        "total": cm.total,
    }


def evaluate(predictions: EvalReport, manifest: DatasetManifest) -> EvalReport:
    """Join predictions against manifest truth and compute metrics.

    Patient-level scoring covers every successfully predicted patient with
    a known diagnosis; Unknown-truth patients are excluded and counted in
    ``skipped_patients``. Slice-level scoring covers exactly the slices
    that carry manifest labels: an infectious slice inherits the patient's
    diagnosis as truth, a non-infectious one counts as Normal (the same
    convention that builds the three training classes from binary labels).
    """
    truth_by_patient = {e.patient_id: e.diagnosis for e in manifest.entries}
    labels_by_patient = {
        e.patient_id: e.slice_labels for e in manifest.entries if e.slice_labels
    }

    patients: list[PatientRecord] = []
    patient_pairs: list[tuple[int, int]] = []
    skipped = 0
    for record in predictions.patients:
        truth = truth_by_patient.get(record.patient_id, record.truth or UNKNOWN)
        known = truth is not None and truth != UNKNOWN
        patients.append(
            PatientRecord(
                patient_id=record.patient_id,
                counts=record.counts,
                scores=record.scores,
                label=record.label,
                truth=truth if known else None,
                warnings=list(record.warnings),
                error=record.error,
            )
        )
        if record.error is not None or record.label is None:
            continue
        if not known:
            skipped += 1
            continue
        patient_pairs.append((class_index(truth), class_index(record.label)))

    if not patient_pairs:
        raise EmptyClassError("no predicted patients with known truth labels to score")

    slice_pairs: list[tuple[int, int]] = []
    predicted_by_slice = {
        (s.patient_id, s.slice_index): s.predicted_class for s in predictions.slices
    }
    slices_per_patient: dict[str, int] = {}
    for s in predictions.slices:
        slices_per_patient[s.patient_id] = max(
            slices_per_patient.get(s.patient_id, 0), s.slice_index + 1
        )
    for patient_id, slice_labels in sorted(labels_by_patient.items()):
        diagnosis = truth_by_patient.get(patient_id, UNKNOWN)
        if patient_id not in slices_per_patient:
            continue  # patient failed or was never predicted
        if diagnosis in (UNKNOWN, NORMAL):
            # Labels exist only for infection classes; Normal rows cannot
            # anchor an infectious slice truth.
            continue
        n_slices = slices_per_patient[patient_id]
        bad = [i for i in slice_labels if i >= n_slices]
        if bad:
            raise ValueError(
                f"slice label indices out of range for {patient_id} "
                f"({n_slices} slices): {sorted(bad)[:5]}"
            )
        for index in sorted(slice_labels):
            truth_class = diagnosis if slice_labels[index] else NORMAL
            predicted = predicted_by_slice[(patient_id, index)]
            slice_pairs.append((class_index(truth_class), class_index(predicted)))

    metrics = {
        "patient_level": _metrics_block(confusion_matrix(patient_pairs)),
        "slice_level": _metrics_block(confusion_matrix(slice_pairs)) if slice_pairs else None,
        "skipped_patients": skipped,
    }
    return EvalReport(slices=list(predictions.slices), patients=patients, metrics=metrics)


def format_confusion_matrix(block: dict, title: str) -> str:
    """Plain-text truth-by-prediction table for terminal output."""
    names = block["class_names"]
    cells = block["confusion_matrix"]
    width = max(len(n) for n in names) + 2
    cell_w = max(7, width)
    lines = [title, "truth \\ predicted".ljust(width + 2) + "".join(n.rjust(cell_w) for n in names)]
    for name, row in zip(names, cells):
        lines.append(name.ljust(width + 2) + "".join(str(v).rjust(cell_w) for v in row))
    if block["accuracy"] is not None:
        lines.append(f"accuracy: {block['accuracy']:.4f}  (n={block['total']})")
    sens = ", ".join(
        f"{name}={value:.4f}" if value is not None else f"{name}=n/a"
        for name, value in block["sensitivity"].items()
    )
    lines.append(f"sensitivity: {sens}")
    return "\n".join(lines)
