"""Two-stage orchestration: slice labeling, slice classification, and the
weighted patient-level vote.

The patient vote counts central-window and peripheral slice predictions
separately. With x/y/z the central counts for COVID19/CAP/Normal and
x'/y'/z' the peripheral counts, the per-class scores are

    score_covid  = x + 0.7 * x'
    score_cap    = y + 0.7 * y'
    score_normal = z + 0.5 * z'

and the patient label is the argmax, ties resolved COVID19 > CAP > Normal.
The weights are configurable; the defaults are the heuristic values above.

Stage-1 (binary infectious-vs-not labeling) is not a filter inside
diagnosis; every slice of a volume is classified by Stage-2. Stage-1 exists
to label training slices for the diseases that have per-slice ground truth,
so ``label_slices`` only accepts CAP or COVID19 volumes and only labels the
central window, mirroring how the fine-tuning data was selected.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from threading import Lock
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .labels import CAP, CLASS_NAMES, COVID19, NORMAL, UNKNOWN, argmax_class, class_index
from .nn_backend import Stage1Backend, Stage2Backend
from .preprocess import (
    CENTRAL_REDUCED,
    SliceWindow,
    WindowSpec,
    make_slice_tensor,
    select_middle_slices,
)
from .report import EvalReport, PatientRecord, SliceRecord
from .volume_io import CtVolume, DatasetManifest, load_volume


class VoteWeights(NamedTuple):
    """Peripheral-slice weights per class."""

    covid: float = 0.7
    cap: float = 0.7
    normal: float = 0.5


DEFAULT_WEIGHTS = VoteWeights()


@dataclass(frozen=True)
class VoteCounts:
    """Slice tallies: x/y/z central, x'/y'/z' peripheral, per class."""

    x: int = 0
    y: int = 0
    z: int = 0
    x_prime: int = 0
    y_prime: int = 0
    z_prime: int = 0

    def __post_init__(self) -> None:
        if min(self.x, self.y, self.z, self.x_prime, self.y_prime, self.z_prime) < 0:
            raise ValueError("vote counts must be non-negative")

    @property
    def central_total(self) -> int:
        return self.x + self.y + self.z

    @property
    def peripheral_total(self) -> int:
        return self.x_prime + self.y_prime + self.z_prime

    def as_dict(self) -> dict[str, int]:
        return {
            "x": self.x,
            "y": self.y,
            "z": self.z,
            "x_prime": self.x_prime,
            "y_prime": self.y_prime,
            "z_prime": self.z_prime,
        }


@dataclass
class SliceVerdict:
    """Stage-2 output for one slice, with its centrality flag."""

    slice_index: int
    probabilities: np.ndarray
    predicted_class: str
    is_central: bool


@dataclass
class PatientPrediction:
    """Voted patient label with scores, counts, and per-slice verdicts."""

    patient_id: str
    counts: VoteCounts
    scores: dict[str, float]
    label: str
    warnings: list[str] = field(default_factory=list)
    verdicts: list[SliceVerdict] = field(default_factory=list)


@dataclass
class SliceLabeling:
    """Stage-1 output: infectious flags for the central window only."""

    patient_id: str
    labels: dict[int, bool]
    window: SliceWindow


DEGENERATE_VOTE = "degenerate_vote: all slice counts are zero; label fell to tie-break"
SHORT_VOLUME = "short_volume: fewer than {n} slices; central window covers the whole volume"


class _LockedBackend:
    """Serializes predict() for backends that are not concurrency-safe."""

    def __init__(self, backend):
        self._backend = backend
        self._lock = Lock()
        self.n_outputs = backend.n_outputs
        self.thread_safe = True

    def predict(self, tensor):
        with self._lock:
            return self._backend.predict(tensor)


def vote(counts: VoteCounts, weights: VoteWeights = DEFAULT_WEIGHTS) -> tuple[dict[str, float], str, list[str]]:
    """Apply the weighted patient-level vote to slice tallies.

    Returns (scores per class, winning label, warnings). All-zero counts
    resolve through the tie-break and are flagged as a degenerate vote.
    """
    scores = {
        NORMAL: counts.z + weights.normal * counts.z_prime,
        CAP: counts.y + weights.cap * counts.y_prime,
        COVID19: counts.x + weights.covid * counts.x_prime,
    }
    label = argmax_class([scores[name] for name in CLASS_NAMES])
    warnings = []
    if counts.central_total == 0 and counts.peripheral_total == 0:
        warnings.append(DEGENERATE_VOTE)
    return scores, label, warnings


def label_slices(
    volume: CtVolume,
    diagnosis: str,
    backend: Stage1Backend,
    threshold: float = 0.5,
    window_spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> SliceLabeling:
    """Stage-1: label central-window slices as infectious or not.

    A slice is infectious iff the backend probability is >= threshold.
    Only CAP and COVID19 volumes can be labeled; there is no Stage-1
    labeler for Normal volumes, whose slices carry no infection signal
    to separate.
    """
    if diagnosis not in (CAP, COVID19):
        raise ValueError(
            f"Stage-1 labeling requires a CAP or COVID19 diagnosis, got {diagnosis!r}"
        )
    window = select_middle_slices(volume.n_slices)
    labels: dict[int, bool] = {}
    for index in range(window.start, window.end):
        tensor = make_slice_tensor(volume, index, window_spec, assume_prewindowed)
        labels[index] = backend.predict(tensor) >= threshold
    return SliceLabeling(patient_id=volume.patient_id, labels=labels, window=window)


def classify_slices(
    volume: CtVolume,
    backend: Stage2Backend,
    window_spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> list[SliceVerdict]:
    """Stage-2: one three-way verdict per slice of the full volume.

    Backend failures abort the whole volume; partial verdict lists are
    never returned.
    """
    window = select_middle_slices(volume.n_slices)
    verdicts = []
    for index in range(volume.n_slices):
        tensor = make_slice_tensor(volume, index, window_spec, assume_prewindowed)
        probabilities = np.asarray(backend.predict(tensor), dtype=np.float64)
        verdicts.append(
            SliceVerdict(
                slice_index=index,
                probabilities=probabilities,
                predicted_class=argmax_class(probabilities),
                is_central=window.is_central(index),
            )
        )
    return verdicts


def tally_verdicts(verdicts: list[SliceVerdict]) -> VoteCounts:
    """Count central and peripheral verdicts per class."""
    central = [0, 0, 0]
    peripheral = [0, 0, 0]
    for verdict in verdicts:
        bucket = central if verdict.is_central else peripheral
        bucket[class_index(verdict.predicted_class)] += 1
    return VoteCounts(
        x=central[class_index(COVID19)],
        y=central[class_index(CAP)],
        z=central[class_index(NORMAL)],
        x_prime=peripheral[class_index(COVID19)],
        y_prime=peripheral[class_index(CAP)],
        z_prime=peripheral[class_index(NORMAL)],
    )


def diagnose(
    volume: CtVolume,
    backend: Stage2Backend,
    weights: VoteWeights = DEFAULT_WEIGHTS,
    window_spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
) -> PatientPrediction:
    """Classify every slice, tally centrality-split counts, and vote."""
    verdicts = classify_slices(volume, backend, window_spec, assume_prewindowed)
    counts = tally_verdicts(verdicts)
    scores, label, warnings = vote(counts, weights)
    if volume.n_slices < CENTRAL_REDUCED:
        warnings.append(SHORT_VOLUME.format(n=CENTRAL_REDUCED))
    return PatientPrediction(
        patient_id=volume.patient_id,
        counts=counts,
        scores=scores,
        label=label,
        warnings=warnings,
        verdicts=verdicts,
    )


def _check_slice_label_indices(entry, volume: CtVolume) -> None:
    # Manifest slice labels are validated lazily, once the volume is loaded
    # and its slice count is known.
    if not entry.slice_labels:
        return
    bad = [i for i in entry.slice_labels if i >= volume.n_slices]
    if bad:
        raise ValueError(
            f"slice label indices out of range for {entry.patient_id} "
            f"({volume.n_slices} slices): {sorted(bad)[:5]}"
        )


def run_dataset(
    manifest: DatasetManifest,
    backend: Stage2Backend,
    weights: VoteWeights = DEFAULT_WEIGHTS,
    window_spec: WindowSpec = WindowSpec(),
    assume_prewindowed: bool = False,
    jobs: int | None = None,
) -> EvalReport:
    """Diagnose every manifest entry into an EvalReport (predictions only).

    Entries are processed in parallel up to ``jobs`` workers, but results
    are aggregated in manifest order, so the report is deterministic for a
    deterministic backend regardless of parallelism. A failure (missing
    volume, bad sidecar, backend error) is recorded on its patient record
    and does not abort the batch.
    """
    # Backends that declare themselves single-session get their predict
    # calls funneled through one lock; everything else stays parallel.
    session = backend if getattr(backend, "thread_safe", True) else _LockedBackend(backend)

    def process(entry) -> PatientPrediction:
        volume = load_volume(entry.volume_path)
        if volume.patient_id != entry.patient_id:
            volume = CtVolume(
                patient_id=entry.patient_id,
                voxels=volume.voxels,
                slice_spacing_mm=volume.slice_spacing_mm,
            )
        _check_slice_label_indices(entry, volume)
        return diagnose(volume, session, weights, window_spec, assume_prewindowed)

    n_workers = max(1, jobs) if jobs is not None else None
    if n_workers == 1:
        outcomes = []
        for entry in manifest.entries:
            try:
                outcomes.append(process(entry))
            except Exception as exc:
                outcomes.append(exc)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(process, entry) for entry in manifest.entries]
            outcomes = []
            for future in futures:
                try:
                    outcomes.append(future.result())
                except Exception as exc:
                    outcomes.append(exc)

    report = EvalReport()
    for entry, outcome in zip(manifest.entries, outcomes):
        truth = entry.diagnosis if entry.diagnosis != UNKNOWN else None
        if isinstance(outcome, Exception):
            report.patients.append(
                PatientRecord(patient_id=entry.patient_id, truth=truth, error=str(outcome))
            )
            continue
        report.patients.append(
            PatientRecord(
                patient_id=entry.patient_id,
                counts=outcome.counts.as_dict(),
                scores={name: float(outcome.scores[name]) for name in CLASS_NAMES},
                label=outcome.label,
                truth=truth,
                warnings=list(outcome.warnings),
            )
        )
        for verdict in outcome.verdicts:
            report.slices.append(
                SliceRecord(
                    patient_id=entry.patient_id,
                    slice_index=verdict.slice_index,
                    probabilities=tuple(float(p) for p in verdict.probabilities),
                    predicted_class=verdict.predicted_class,
                    is_central=verdict.is_central,
                )
            )
    return report


class CtVolumeClassifier(ClassifierMixin, BaseEstimator):
    """Patient-level three-way classifier over CT volumes.

    Wraps a Stage-2 slice backend and the weighted vote behind a
    predict-shaped API: ``predict`` maps an iterable of CtVolume (or raw
    3D HU arrays) to (Normal, CAP, COVID19) labels.

    Parameters
    ----------
    backend : Stage2Backend
        Per-slice classifier; required before predict.
    w_covid, w_cap, w_normal : float
        Peripheral-slice vote weights.
    window_center, window_width : float
        HU display window applied during preprocessing.
    assume_prewindowed : bool
        Treat voxels as already windowed display values.
    """

    def __init__(
        self,
        backend: Stage2Backend | None = None,
        w_covid: float = DEFAULT_WEIGHTS.covid,
        w_cap: float = DEFAULT_WEIGHTS.cap,
        w_normal: float = DEFAULT_WEIGHTS.normal,
        window_center: float = WindowSpec().center_hu,
        window_width: float = WindowSpec().width_hu,
        assume_prewindowed: bool = False,
    ):
        self.backend = backend
        self.w_covid = w_covid
        self.w_cap = w_cap
        self.w_normal = w_normal
        self.window_center = window_center
        self.window_width = window_width
        self.assume_prewindowed = assume_prewindowed

    def fit(self, X=None, y=None):
        """Validate parameters; the classifier itself is inference-only."""
        if self.backend is None:
            raise ValueError("CtVolumeClassifier requires a Stage-2 backend")
        if min(self.w_covid, self.w_cap, self.w_normal) <= 0:
            raise ValueError("vote weights must be positive")
        self.window_spec_ = WindowSpec(self.window_center, self.window_width)
        self.weights_ = VoteWeights(self.w_covid, self.w_cap, self.w_normal)
        self.classes_ = np.array(CLASS_NAMES)
        return self

    def diagnose(self, volume) -> PatientPrediction:
        if not hasattr(self, "classes_"):
            self.fit()
        if not hasattr(volume, "voxels"):
            volume = CtVolume(patient_id="", voxels=volume)
        return diagnose(
            volume,
            self.backend,
            weights=self.weights_,
            window_spec=self.window_spec_,
            assume_prewindowed=self.assume_prewindowed,
        )

    def predict(self, X) -> np.ndarray:
        """Patient labels for an iterable of volumes."""
        return np.array([self.diagnose(v).label for v in X])

    def predict_scores(self, X) -> np.ndarray:
        """Raw vote scores, one (Normal, CAP, COVID19) row per volume."""
        rows = []
        for v in X:
            scores = self.diagnose(v).scores
            rows.append([scores[name] for name in CLASS_NAMES])
        return np.asarray(rows)
