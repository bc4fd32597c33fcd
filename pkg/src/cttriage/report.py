"""Evaluation reports: per-slice records, per-patient records, and metrics.

Reports serialize to a single JSON document with top-level keys
``slices``, ``patients``, and ``metrics``. Serialization is deterministic:
keys are sorted, floats use Python's round-trip repr, and no timestamps or
environment details are embedded, so identical reports are byte-identical
on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .labels import CLASS_NAMES


class ReportFormatError(ValueError):
    """Raised when a report file does not match the expected schema."""


@dataclass
class SliceRecord:
    """Stage-2 output for one slice."""

    patient_id: str
    slice_index: int
    probabilities: tuple[float, float, float]
    predicted_class: str
    is_central: bool


@dataclass
class PatientRecord:
    """Voted patient-level outcome, or the error that prevented one."""

    patient_id: str
    counts: dict[str, int] | None = None
    scores: dict[str, float] | None = None
    label: str | None = None
    truth: str | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None


@dataclass
class EvalReport:
    slices: list[SliceRecord] = field(default_factory=list)
    patients: list[PatientRecord] = field(default_factory=list)
    metrics: dict | None = None

    def validate(self) -> None:
        """Check internal consistency before serialization.

        Confusion-matrix totals must equal the number of scored records at
        each granularity.
        """
        if self.metrics is None:
            return
        patient_block = self.metrics.get("patient_level")
        if patient_block is not None:
            scored = sum(
                1 for p in self.patients if p.error is None and p.truth is not None and p.label is not None
            )
            total = _matrix_total(patient_block["confusion_matrix"])
            if total != scored:
                raise ReportFormatError(
                    f"patient confusion-matrix total {total} != scored patients {scored}"
                )
        slice_block = self.metrics.get("slice_level")
        if slice_block is not None:
            total = _matrix_total(slice_block["confusion_matrix"])
            if total != slice_block.get("total", total):
                raise ReportFormatError("slice confusion-matrix total disagrees with its record count")


def _matrix_total(cells: list[list[int]]) -> int:
    return sum(sum(row) for row in cells)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "slices": [
            {
                "patient_id": s.patient_id,
                "slice_index": s.slice_index,
                "probabilities": list(s.probabilities),
                "predicted_class": s.predicted_class,
                "is_central": s.is_central,
            }
            for s in report.slices
        ],
        "patients": [
            {
                "patient_id": p.patient_id,
                "counts": p.counts,
                "scores": p.scores,
                "label": p.label,
                "truth": p.truth,
                "warnings": p.warnings,
                "error": p.error,
            }
            for p in report.patients
        ],
        "metrics": report.metrics,
    }


def report_from_dict(payload: dict) -> EvalReport:
    try:
        slices = [
            SliceRecord(
                patient_id=s["patient_id"],
                slice_index=int(s["slice_index"]),
                probabilities=tuple(float(v) for v in s["probabilities"]),
                predicted_class=s["predicted_class"],
                is_central=bool(s["is_central"]),
            )
            for s in payload["slices"]
        ]
        patients = [
            PatientRecord(
                patient_id=p["patient_id"],
                counts=p["counts"],
                scores=p["scores"],
                label=p["label"],
                truth=p["truth"],
                warnings=list(p.get("warnings", [])),
                error=p.get("error"),
            )
            for p in payload["patients"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportFormatError(f"malformed report: {exc!r}") from exc
    return EvalReport(slices=slices, patients=patients, metrics=payload.get("metrics"))


def write_report(report: EvalReport, path: Path | str) -> None:
    """Serialize a report; writes are deterministic byte-for-byte."""
    report.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(report_to_dict(report), sort_keys=True, indent=2)
    path.write_text(text + "\n")


def load_report(path: Path | str) -> EvalReport:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{path}: {exc}") from exc
    return report_from_dict(payload)


def empty_metrics() -> dict:
    """Zeroed metrics block, the shape written for an empty report."""
    k = len(CLASS_NAMES)
    zero = [[0] * k for _ in range(k)]
    return {
        "patient_level": {
            "class_names": list(CLASS_NAMES),
            "confusion_matrix": zero,
            "accuracy": None,
            "sensitivity": {name: None for name in CLASS_NAMES},
            "total": 0,
        },
        "slice_level": None,
        "skipped_patients": 0,
    }
