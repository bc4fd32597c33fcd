"""CT volume and dataset-manifest ingestion.

Volume on-disk format: a raw little-endian signed 16-bit voxel file in
slice-major order plus a JSON sidecar carrying the dimensions:

    <stem>.raw   int16 LE voxels, slice 0 row-major, then slice 1, ...
    <stem>.json  {"patient_id", "n_slices", "height", "width",
                  "slice_spacing_mm"?}

Manifest format: CSV with header ``patient_id,volume_path,diagnosis``
plus an optional fourth column ``slice_labels_path`` pointing at a CSV
``slice_index,label`` with label in {infectious, non_infectious}.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import CAP, COVID19, INFECTIOUS, NON_INFECTIOUS, NORMAL, UNKNOWN, parse_diagnosis
from .validation import check_voxels


class VolumeFormatError(ValueError):
    """Raised for malformed sidecars or sidecar/raw size mismatches."""


class ManifestError(ValueError):
    """Raised for malformed or inconsistent dataset manifests."""


@dataclass
class CtVolume:
    """A 3D grid of Hounsfield-unit voxels with patient metadata."""

    patient_id: str
    voxels: np.ndarray
    slice_spacing_mm: float | None = None

    def __post_init__(self) -> None:
        self.voxels = check_voxels(self.voxels)
        if self.slice_spacing_mm is not None and not self.slice_spacing_mm > 0:
            raise ValueError(f"slice_spacing_mm must be positive, got {self.slice_spacing_mm}")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass
class ManifestEntry:
    patient_id: str
    volume_path: Path
    diagnosis: str = UNKNOWN
    slice_labels: dict[int, bool] | None = None  # slice_index -> infectious?


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.patient_id in seen:
                raise ManifestError(f"duplicate patient_id: {entry.patient_id!r}")
            seen.add(entry.patient_id)

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> dict[str, int]:
        counts = {NORMAL: 0, CAP: 0, COVID19: 0, UNKNOWN: 0}
        for entry in self.entries:
            counts[entry.diagnosis] += 1
        return counts


def _volume_pair(path: Path) -> tuple[Path, Path]:
    # Accept the sidecar, the raw file, or the bare stem.
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        stem = path.with_suffix("")
    else:
        stem = path
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def load_volume(path: Path | str) -> CtVolume:
    """Load a raw+sidecar volume pair.

    ``path`` may point at either file of the pair or at the shared stem.
    """
    raw_path, sidecar_path = _volume_pair(Path(path))
    if not sidecar_path.is_file():
        raise FileNotFoundError(f"volume sidecar not found: {sidecar_path}")
    if not raw_path.is_file():
        raise FileNotFoundError(f"volume raw file not found: {raw_path}")

    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    if not isinstance(sidecar, dict):
        raise VolumeFormatError(f"malformed sidecar {sidecar_path}: expected a JSON object")

    try:
        n_slices = int(sidecar["n_slices"])
        height = int(sidecar["height"])
        width = int(sidecar["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar_path}: {exc!r}") from exc
    if min(n_slices, height, width) < 1:
        raise VolumeFormatError(f"sidecar {sidecar_path} declares non-positive dimensions")

    patient_id = str(sidecar.get("patient_id", raw_path.stem))
    spacing = sidecar.get("slice_spacing_mm")
    spacing = float(spacing) if spacing is not None else None

    data = raw_path.read_bytes()
    expected = n_slices * height * width * 2
    if len(data) != expected:
        raise VolumeFormatError(
            f"{raw_path}: raw byte count {len(data)} does not match sidecar "
            f"dimensions {n_slices}x{height}x{width} ({expected} bytes)"
        )
    voxels = np.frombuffer(data, dtype="<i2").reshape(n_slices, height, width)
    return CtVolume(patient_id=patient_id, voxels=voxels.astype(np.int16), slice_spacing_mm=spacing)


def write_volume(volume: CtVolume, path: Path | str) -> None:
    """Write a volume as the raw+sidecar pair rooted at ``path``'s stem."""
    raw_path, sidecar_path = _volume_pair(Path(path))
    sidecar: dict = {
        "patient_id": volume.patient_id,
        "n_slices": volume.n_slices,
        "height": volume.height,
        "width": volume.width,
    }
    if volume.slice_spacing_mm is not None:
        sidecar["slice_spacing_mm"] = volume.slice_spacing_mm
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(volume.voxels.astype("<i2").tobytes())
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_slice_labels(path: Path | str) -> dict[int, bool]:
    """Read a slice-label CSV (slice_index,label) into {index: infectious?}."""
    path = Path(path)
    labels: dict[int, bool] = {}
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != [
            "slice_index",
            "label",
        ]:
            raise ManifestError(f"{path}: expected header 'slice_index,label'")
        for row in reader:
            try:
                index = int(row["slice_index"])
            except (TypeError, ValueError):
                raise ManifestError(f"{path}: bad slice_index {row['slice_index']!r}") from None
            if index < 0:
                raise ManifestError(f"{path}: negative slice_index {index}")
            label = (row["label"] or "").strip().lower()
            if label == INFECTIOUS:
                labels[index] = True
            elif label == NON_INFECTIOUS:
                labels[index] = False
            else:
                raise ManifestError(f"{path}: unknown slice label {row['label']!r}")

    return labels


def write_slice_labels(labels: dict[int, bool], path: Path | str) -> None:
    """Write {index: infectious?} as a slice-label CSV, sorted by index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["slice_index", "label"])
        for index in sorted(labels):
            writer.writerow([index, INFECTIOUS if labels[index] else NON_INFECTIOUS])


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a dataset manifest CSV.

    Diagnosis tokens are case-insensitive; Unknown marks inference-only
    entries. Slice-label CSVs referenced by the optional fourth column are
    loaded eagerly; their index validity against the volume is checked
    later, when the volume itself is loaded.
    """
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        fieldnames = [f.strip() for f in reader.fieldnames or []]
        if fieldnames[:3] != ["patient_id", "volume_path", "diagnosis"]:
            raise ManifestError(
                f"{path}: expected header 'patient_id,volume_path,diagnosis[,slice_labels_path]'"
            )
        for lineno, row in enumerate(reader, start=2):
            patient_id = (row["patient_id"] or "").strip()
            volume_rel = (row["volume_path"] or "").strip()
            if not patient_id or not volume_rel:
                raise ManifestError(f"{path}:{lineno}: patient_id and volume_path are required")
            try:
                diagnosis = parse_diagnosis(row["diagnosis"] or "")
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            labels_rel = (row.get("slice_labels_path") or "").strip()
            slice_labels = None
            if labels_rel:
                slice_labels = load_slice_labels(_resolve(base, labels_rel))
            entries.append(
                ManifestEntry(
                    patient_id=patient_id,
                    volume_path=_resolve(base, volume_rel),
                    diagnosis=diagnosis,
                    slice_labels=slice_labels,
                )
            )
    try:
        return DatasetManifest(entries)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p
