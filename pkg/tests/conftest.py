"""Shared fixtures: synthetic volumes, manifests, and mock backends.

The synthetic dataset uses flat slices whose constant HU value maps to an
exact display value through the default window, so mock rules keyed on
the tensor mean are exact and every expected label is hand-computable:

    HU -1150 -> 0     (mean < 64  -> COVID19 clause)
    HU  -700 -> 88    (mean < 128 -> CAP clause)
    HU  -400 -> 147   (mean < 192 -> Normal clause)
    HU     0 -> 226   (else       -> COVID19 clause)
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from cttriage.volume_io import CtVolume, write_volume

COVID_HU = -1150  # windows to 0
CAP_HU = -700  # windows to 88
NORMAL_HU = -400  # windows to 147
ELSE_HU = 0  # windows to 226

# Clause order matters: first match wins.
STAGE2_RULE = "mean<64:0.1,0.1,0.8;mean<128:0.1,0.8,0.1;mean<192:0.8,0.1,0.1;else:0.2,0.3,0.5"
STAGE1_RULE = "mean<64:1.0;else:0.0"

# Hand-derived expectations for the five-patient dataset below.
EXPECTED_LABELS = {
    "P1": "COVID19",  # x=80, z'=20 -> scores (10.0, 0, 80)
    "P2": "CAP",  # y=40, x'=20 -> scores (0, 40, 14)
    "P3": "Normal",  # z=30, whole-volume window -> scores (30, 0, 0)
    "P4": "COVID19",  # x=40, y=40, z'=1 -> tie at 40, COVID19 by priority
    "P5": "COVID19",  # x=40, x'=10 -> score 47; truth Unknown
}


def make_volume(patient_id: str, slice_hu, height: int = 64, width: int = 64) -> CtVolume:
    """Volume of flat slices, one constant HU value per slice."""
    voxels = np.empty((len(slice_hu), height, width), dtype=np.int16)
    for i, hu in enumerate(slice_hu):
        voxels[i] = hu
    return CtVolume(patient_id=patient_id, voxels=voxels)


def five_patient_slices() -> dict[str, list[int]]:
    p1 = [NORMAL_HU] * 10 + [COVID_HU] * 80 + [NORMAL_HU] * 10
    p2 = [COVID_HU] * 10 + [CAP_HU] * 40 + [COVID_HU] * 10
    p3 = [NORMAL_HU] * 30
    p4 = [COVID_HU] * 40 + [CAP_HU] * 40 + [NORMAL_HU]
    p5 = [ELSE_HU] * 50
    return {"P1": p1, "P2": p2, "P3": p3, "P4": p4, "P5": p5}


def build_five_patient_dataset(root: Path) -> Path:
    """Write the synthetic dataset under root; returns the manifest path.

    P1 additionally carries slice labels (central infectious, leading
    peripherals non-infectious) for slice-level evaluation.
    """
    volumes_dir = root / "volumes"
    labels_dir = root / "labels"
    volumes_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)

    for patient_id, slices in five_patient_slices().items():
        write_volume(make_volume(patient_id, slices), volumes_dir / f"{patient_id}.raw")

    with (labels_dir / "P1.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["slice_index", "label"])
        for i in range(10):
            writer.writerow([i, "non_infectious"])
        for i in range(10, 90):
            writer.writerow([i, "infectious"])

    manifest_path = root / "manifest.csv"
    rows = [
        ("P1", "volumes/P1.raw", "COVID19", "labels/P1.csv"),
        ("P2", "volumes/P2.raw", "CAP", ""),
        ("P3", "volumes/P3.raw", "Normal", ""),
        ("P4", "volumes/P4.raw", "cap", ""),
        ("P5", "volumes/P5.raw", "Unknown", ""),
    ]
    with manifest_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["patient_id", "volume_path", "diagnosis", "slice_labels_path"])
        writer.writerows(rows)
    return manifest_path


@pytest.fixture
def five_patient_manifest(tmp_path) -> Path:
    return build_five_patient_dataset(tmp_path)
