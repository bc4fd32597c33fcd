"""Deterministic slice preprocessing: HU windowing, central-slice selection,
and assembly of model-ready 512x512x3 tensors.

The HU-to-display mapping is

    value = round(clamp((hu - low) / width, 0, 1) * 255)

with ``low = center - width/2`` and rounding half away from zero. The
quantization is evaluated in exact integer arithmetic (the float window
parameters are treated as the exact rationals they denote), so the result
is well defined for every Hounsfield value rather than hostage to
floating-point rounding at the .5 boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import HU_MAX, HU_MIN, check_voxels

TENSOR_SIZE = 512

DEFAULT_WINDOW_CENTER = -500.0
DEFAULT_WINDOW_WIDTH = 1300.0

# Central-window lengths: volumes with at least 80 slices contribute their
# middle 80; shorter volumes their middle 40; anything under 40 slices is
# taken whole (degenerate case, flagged upstream as a warning).
CENTRAL_FULL = 80
CENTRAL_REDUCED = 40


@dataclass(frozen=True)
class WindowSpec:
    """Linear display window: [center - width/2, center + width/2] -> [0, 255]."""

    center_hu: float = DEFAULT_WINDOW_CENTER
    width_hu: float = DEFAULT_WINDOW_WIDTH

    def __post_init__(self) -> None:
        if not self.width_hu > 0:
            raise ValueError(f"window width must be positive, got {self.width_hu}")

    @property
    def low_hu(self) -> float:
        return self.center_hu - self.width_hu / 2

    @property
    def high_hu(self) -> float:
        return self.center_hu + self.width_hu / 2


@dataclass(frozen=True)
class SliceWindow:
    """Half-open range [start, end) of central slice indices."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid slice window [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def is_central(self, slice_index: int) -> bool:
        return self.start <= slice_index < self.end

    def flags(self, n_slices: int) -> np.ndarray:
        """Boolean centrality flag per slice index of an n_slices volume."""
        idx = np.arange(n_slices)
        return (idx >= self.start) & (idx < self.end)


@dataclass
class SliceTensor:
    """One preprocessed slice: 512x512x3 float32 pixels in [0, 255].

    The three channels are identical replicas of the windowed grayscale
    slice; models expecting RGB input consume it unchanged.
    """

    pixels: np.ndarray
    patient_id: str = ""
    slice_index: int = 0


@lru_cache(maxsize=32)
def _window_coeffs(center: float, width: float) -> tuple[int, int, int]:
    # Express (hu - low) * 255 / width as (hu * a - b) / d over integers.
    # Float center/width are dyadic rationals, so a, b, d are exact.
    low = Fraction(center) - Fraction(width) / 2
    scale = Fraction(255) / Fraction(width)
    offset = low * scale
    a = scale.numerator * offset.denominator
    b = offset.numerator * scale.denominator
    d = scale.denominator * offset.denominator
    return a, b, d


def window_hu(hu_value: int, spec: WindowSpec = WindowSpec()) -> int:
    """Map one Hounsfield value onto the display range [0, 255].

    Total function: values below the window clamp to 0, above to 255.
    Monotone non-decreasing in hu_value.
    """
    a, b, d = _window_coeffs(spec.center_hu, spec.width_hu)
    n = int(hu_value) * a - b
    if n <= 0:
        return 0
    if n >= 255 * d:
        return 255
    # Round half away from zero; n/d is positive here so that is half up.
    return (2 * n + d) // (2 * d)


@lru_cache(maxsize=8)
def _window_lut(center: float, width: float) -> np.ndarray:
    a, b, d = _window_coeffs(center, width)
    hi = 255 * d
    two_d = 2 * d
    values = bytearray(HU_MAX - HU_MIN + 1)
    for i, h in enumerate(range(HU_MIN, HU_MAX + 1)):
        n = h * a - b
        if n <= 0:
            values[i] = 0
        elif n >= hi:
            values[i] = 255
        else:
            values[i] = (2 * n + d) // two_d
    return np.frombuffer(bytes(values), dtype=np.uint8)


def window_image(hu: np.ndarray, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Vectorized window_hu over an integer HU array; returns uint8."""
    lut = _window_lut(spec.center_hu, spec.width_hu)
    idx = np.asarray(hu).astype(np.int32) - HU_MIN
    return lut[idx]


def select_middle_slices(n_slices: int) -> SliceWindow:
    """Central window of a volume's slice axis.

    80 slices when the volume has at least 80, otherwise the middle 40,
    otherwise the whole volume. The window is contiguous and centered with
    start = floor((n_slices - length) / 2); an odd remainder enlarges the
    trailing margin.
    """
    if n_slices < 1:
        raise ValueError(f"n_slices must be >= 1, got {n_slices}")
    if n_slices >= CENTRAL_FULL:
        length = CENTRAL_FULL
    elif n_slices >= CENTRAL_REDUCED:
        length = CENTRAL_REDUCED
    else:
        length = n_slices
    start = (n_slices - length) // 2
    return SliceWindow(start, start + length)


def windowed_slice(
    volume,
    slice_index: int,
    spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> np.ndarray:
    """Windowed uint8 view of one slice, at the volume's native resolution."""
    voxels = volume.voxels
    if not 0 <= slice_index < voxels.shape[0]:
        raise IndexError(f"slice index {slice_index} out of range for {voxels.shape[0]} slices")
    hu = voxels[slice_index]
    if assume_prewindowed:
        return np.clip(hu, 0, 255).astype(np.uint8)
    return window_image(hu, spec)


def make_slice_tensor(
    volume,
    slice_index: int,
    spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> SliceTensor:
    """Window one slice, resize to 512x512 if needed, replicate to 3 channels.

    Bilinear interpolation runs on the windowed 8-bit image, so resized
    values stay inside [0, 255] by construction. Deterministic: identical
    inputs produce bitwise-identical tensors.
    """
    gray = windowed_slice(volume, slice_index, spec, assume_prewindowed)
    if gray.shape != (TENSOR_SIZE, TENSOR_SIZE):
        gray = cv2.resize(gray, (TENSOR_SIZE, TENSOR_SIZE), interpolation=cv2.INTER_LINEAR)
    pixels = np.repeat(gray[:, :, np.newaxis], 3, axis=2).astype(np.float32)
    return SliceTensor(pixels=pixels, patient_id=volume.patient_id, slice_index=slice_index)


def preprocess_volume(
    volume,
    spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> tuple[list[SliceTensor], SliceWindow]:
    """Tensors for every slice of the volume plus the central-window marking.

    All slices are retained; the SliceWindow records which of them count as
    central for the patient-level vote.
    """
    window = select_middle_slices(volume.n_slices)
    tensors = [
        make_slice_tensor(volume, i, spec, assume_prewindowed)
        for i in range(volume.n_slices)
    ]
    return tensors, window


class SlicePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer turning a CT volume into a slice tensor stack.

    Parameters
    ----------
    window_center : float, default=-500.0
        Center of the HU display window.
    window_width : float, default=1300.0
        Width of the HU display window; must be positive.
    assume_prewindowed : bool, default=False
        Skip the HU mapping and only clamp voxel values to [0, 255], for
        volumes whose voxels were already windowed at the source.
    """

    def __init__(
        self,
        window_center: float = DEFAULT_WINDOW_CENTER,
        window_width: float = DEFAULT_WINDOW_WIDTH,
        assume_prewindowed: bool = False,
    ):
        self.window_center = window_center
        self.window_width = window_width
        self.assume_prewindowed = assume_prewindowed

    def fit(self, X=None, y=None):
        self.window_spec_ = WindowSpec(self.window_center, self.window_width)
        return self

    def transform(self, X) -> np.ndarray:
        """Preprocess one volume into an (n_slices, 512, 512, 3) float32 array.

        X may be a CtVolume or a raw 3D integer HU array.
        """
        if not hasattr(self, "window_spec_"):
            self.fit()
        volume = X if hasattr(X, "voxels") else _AnonymousVolume(check_voxels(X))
        tensors, _ = preprocess_volume(
            volume, self.window_spec_, self.assume_prewindowed
        )
        return np.stack([t.pixels for t in tensors])


@dataclass
class _AnonymousVolume:
    voxels: np.ndarray
    patient_id: str = ""

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]
