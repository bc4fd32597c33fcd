"""Training data assembly.

Reads the triage package's file formats (raw+sidecar volumes, manifest
CSVs, slice-label CSVs), windows HU voxels into display range the same
way the inference pipeline documents, balances classes by undersampling,
and generates the synthetic three-class shape dataset used to exercise
the training recipe without clinical data.

Images move through training as NHWC uint8 arrays in [0, 255]; models
convert and normalize internally, mirroring the inference wire contract.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASS_NAMES = ("Normal", "CAP", "COVID19")
IMAGE_SIZE = 512

WINDOW_CENTER = -500.0
WINDOW_WIDTH = 1300.0


@dataclass
class ForgeEntry:
    patient_id: str
    volume_path: Path
    diagnosis: str
    slice_labels: dict[int, bool] | None  # slice index -> infectious?


def read_slice_labels(path: Path | str) -> dict[int, bool]:
    labels: dict[int, bool] = {}
    with Path(path).open(newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            labels[int(row["slice_index"])] = row["label"].strip() == "infectious"
    return labels


def read_manifest(path: Path | str) -> list[ForgeEntry]:
    path = Path(path)
    entries = []
    with path.open(newline="") as handle:
        for row in csv.DictReader(handle):
            labels_rel = (row.get("slice_labels_path") or "").strip()
            labels = read_slice_labels(path.parent / labels_rel) if labels_rel else None
            entries.append(
                ForgeEntry(
                    patient_id=row["patient_id"].strip(),
                    volume_path=path.parent / row["volume_path"].strip(),
                    diagnosis=_canonical_diagnosis(row["diagnosis"]),
                    slice_labels=labels,
                )
            )
    return entries


def _canonical_diagnosis(token: str) -> str:
    lowered = token.strip().lower()
    for name in CLASS_NAMES + ("Unknown",):
        if lowered == name.lower():
            return name
    raise ValueError(f"unknown diagnosis token: {token!r}")


def load_volume_hu(path: Path | str) -> np.ndarray:
    """Raw+sidecar volume as an int16 [n, h, w] array."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    shape = (int(sidecar["n_slices"]), int(sidecar["height"]), int(sidecar["width"]))
    data = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<i2")
    return data.reshape(shape).astype(np.int16)


def window_to_display(hu: np.ndarray) -> np.ndarray:
    """HU to [0, 255] uint8 through the documented -500/1300 window."""
    low = WINDOW_CENTER - WINDOW_WIDTH / 2.0
    scaled = np.clip((hu.astype(np.float64) - low) / WINDOW_WIDTH, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def central_window(n_slices: int) -> range:
    """Middle 80 slices, else the middle 40, else everything."""
    if n_slices >= 80:
        length = 80
    elif n_slices >= 40:
        length = 40
    else:
        length = n_slices
    start = (n_slices - length) // 2
    return range(start, start + length)


def _resize_to_contract(image: np.ndarray) -> np.ndarray:
    if image.shape == (IMAGE_SIZE, IMAGE_SIZE):
        return image
    # nearest-neighbor is adequate for training data
    rows = np.linspace(0, image.shape[0] - 1, IMAGE_SIZE).round().astype(int)
    cols = np.linspace(0, image.shape[1] - 1, IMAGE_SIZE).round().astype(int)
    return image[np.ix_(rows, cols)]


def _to_nhwc(image: np.ndarray) -> np.ndarray:
    image = _resize_to_contract(image)
    return np.repeat(image[:, :, np.newaxis], 3, axis=2)


def collect_stage1_pools(entries, diagnosis: str) -> dict[str, list[np.ndarray]]:
    """Infectious / non-infectious slice pools for one disease."""
    pools: dict[str, list[np.ndarray]] = {"infectious": [], "non_infectious": []}
    for entry in entries:
        if entry.diagnosis != diagnosis or not entry.slice_labels:
            continue
        volume = load_volume_hu(entry.volume_path)
        for index, infectious in sorted(entry.slice_labels.items()):
            image = _to_nhwc(window_to_display(volume[index]))
            pools["infectious" if infectious else "non_infectious"].append(image)
    return pools


def collect_stage2_pools(entries) -> dict[str, list[np.ndarray]]:
    """Three-way slice pools: labeled infectious slices carry the patient
    diagnosis, labeled non-infectious slices and Normal patients' central
    slices count as Normal."""
    pools: dict[str, list[np.ndarray]] = {name: [] for name in CLASS_NAMES}
    for entry in entries:
        if entry.diagnosis == "Unknown":
            continue
        volume = load_volume_hu(entry.volume_path)
        if entry.diagnosis == "Normal":
            for index in central_window(volume.shape[0]):
                pools["Normal"].append(_to_nhwc(window_to_display(volume[index])))
            continue
        if not entry.slice_labels:
            continue
        for index, infectious in sorted(entry.slice_labels.items()):
            image = _to_nhwc(window_to_display(volume[index]))
            pools[entry.diagnosis if infectious else "Normal"].append(image)
    return pools


def balance_classes(pools: dict[str, list], seed: int = 0) -> dict[str, list]:
    """Equalize class sizes by undersampling every larger class.

    Deterministic for a given seed; classes already at the minimum size
    pass through unchanged (in their original order).
    """
    for name, pool in pools.items():
        if not pool:
            raise ValueError(f"class {name!r} has no samples to balance")
    target = min(len(pool) for pool in pools.values())
    rng = np.random.default_rng(seed)
    balanced: dict[str, list] = {}
    for name in sorted(pools):
        pool = pools[name]
        if len(pool) == target:
            balanced[name] = list(pool)
        else:
            keep = sorted(rng.choice(len(pool), size=target, replace=False).tolist())
            balanced[name] = [pool[i] for i in keep]
    return balanced


def pools_to_arrays(pools: dict[str, list], class_order) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for class_idx, name in enumerate(class_order):
        for image in pools[name]:
            images.append(image)
            labels.append(class_idx)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic shape dataset (blob / ring / stripe)
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("blob", "ring", "stripe")


def _coordinate_grid(size: int):
    axis = np.arange(size, dtype=np.float32)
    return np.meshgrid(axis, axis, indexing="ij")


def make_shape_image(kind: str, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """One noisy grayscale uint8 image of the requested shape family."""
    yy, xx = _coordinate_grid(size)
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(0.3, 0.7) * size
    radius = rng.uniform(0.12, 0.3) * size
    distance = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)

    if kind == "blob":
        mask = distance <= radius
    elif kind == "ring":
        thickness = rng.uniform(0.2, 0.4) * radius
        mask = np.abs(distance - radius) <= thickness / 2
    elif kind == "stripe":
        period = rng.uniform(0.08, 0.2) * size
        phase = rng.uniform(0, period)
        angle = rng.uniform(0, np.pi)
        projected = xx * np.cos(angle) + yy * np.sin(angle)
        mask = ((projected + phase) % period) < period / 2
    else:
        raise ValueError(f"unknown shape kind {kind!r}")

    foreground = rng.uniform(150, 230)
    background = rng.uniform(20, 90)
    image = np.where(mask, foreground, background)
    image = image + rng.normal(0, 12, size=image.shape)
    return np.clip(image, 0, 255).astype(np.uint8)


def make_shape_dataset(
    per_class: int = 300, seed: int = 0, size: int = IMAGE_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced three-class shape dataset as (NHWC uint8 images, labels)."""
    rng = np.random.default_rng(seed)
    images = np.empty((per_class * len(SHAPE_CLASSES), size, size, 3), dtype=np.uint8)
    labels = np.empty(per_class * len(SHAPE_CLASSES), dtype=np.int64)
    row = 0
    for class_idx, kind in enumerate(SHAPE_CLASSES):
        for _ in range(per_class):
            gray = make_shape_image(kind, rng, size)
            images[row] = gray[:, :, np.newaxis]
            labels[row] = class_idx
            row += 1
    return images, labels


def split_train_holdout(
    images: np.ndarray, labels: np.ndarray, holdout_fraction: float = 0.2, seed: int = 0
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Shuffled stratified-enough split; deterministic per seed."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_holdout = max(1, int(round(len(labels) * holdout_fraction)))
    holdout_idx, train_idx = order[:n_holdout], order[n_holdout:]
    return (images[train_idx], labels[train_idx]), (images[holdout_idx], labels[holdout_idx])
