"""Vote semantics, Stage-1/Stage-2 orchestration, and batch runs."""

import numpy as np
import pytest

from cttriage.labels import CAP, CLASS_NAMES, COVID19, NORMAL
from cttriage.nn_backend import MockStage1Backend, parse_mock_rule
from cttriage.pipeline import (
    DEFAULT_WEIGHTS,
    CtVolumeClassifier,
    VoteCounts,
    VoteWeights,
    classify_slices,
    diagnose,
    label_slices,
    run_dataset,
    tally_verdicts,
    vote,
)
from cttriage.volume_io import load_manifest

from conftest import (
    CAP_HU,
    COVID_HU,
    EXPECTED_LABELS,
    NORMAL_HU,
    STAGE2_RULE,
    make_volume,
)


def vote_oracle(counts: VoteCounts, weights: VoteWeights = DEFAULT_WEIGHTS):
    """Direct formula evaluation plus exhaustive priority-ordered argmax."""
    scores = {
        COVID19: counts.x + weights.covid * counts.x_prime,
        CAP: counts.y + weights.cap * counts.y_prime,
        NORMAL: counts.z + weights.normal * counts.z_prime,
    }
    best = None
    for name in (COVID19, CAP, NORMAL):
        if best is None or scores[name] > scores[best]:
            best = name
    return scores, best


class TestVote:
    def test_cap_wins_on_weighted_peripherals(self):
        counts = VoteCounts(x=10, x_prime=0, y=8, y_prime=5, z=0, z_prime=0)
        scores, label, warnings = vote(counts)
        assert scores[COVID19] == 10.0
        assert scores[CAP] == 8 + 0.7 * 5  # 11.5
        assert scores[NORMAL] == 0.0
        assert label == CAP
        assert warnings == []

    def test_single_nonzero_count(self):
        scores, label, _ = vote(VoteCounts(x=5))
        assert label == COVID19
        assert scores[COVID19] == 5.0

    def test_tie_resolves_to_covid(self):
        _, label, _ = vote(VoteCounts(x=4, y=4))
        assert label == COVID19

    def test_cap_normal_tie_resolves_to_cap(self):
        _, label, _ = vote(VoteCounts(y=3, z=3))
        assert label == CAP

    def test_scaling_preserves_label(self):
        counts = VoteCounts(x=10, x_prime=0, y=8, y_prime=5, z=0, z_prime=0)
        scaled = VoteCounts(x=30, x_prime=0, y=24, y_prime=15, z=0, z_prime=0)
        assert vote(counts)[1] == vote(scaled)[1]

    def test_degenerate_all_zero(self):
        scores, label, warnings = vote(VoteCounts())
        assert label == COVID19
        assert any("degenerate_vote" in w for w in warnings)

    def test_matches_oracle_on_random_counts(self):
        rng = np.random.default_rng(51)
        for _ in range(2000):
            counts = VoteCounts(*(int(v) for v in rng.integers(0, 201, size=6)))
            scores, label, _ = vote(counts)
            want_scores, want_label = vote_oracle(counts)
            assert scores == want_scores
            assert label == want_label

    def test_custom_weights(self):
        counts = VoteCounts(x=0, x_prime=10, z=3)
        scores, label, _ = vote(counts, VoteWeights(covid=0.2, cap=0.2, normal=0.5))
        assert scores[COVID19] == pytest.approx(2.0)
        assert label == NORMAL

    def test_monotone_in_central_counts(self):
        # growing a central count never lowers that class's score and
        # leaves the other scores untouched
        rng = np.random.default_rng(53)
        fields = ["x", "y", "z", "x_prime", "y_prime", "z_prime"]
        owner = {"x": COVID19, "y": CAP, "z": NORMAL}
        for _ in range(300):
            base = {f: int(v) for f, v in zip(fields, rng.integers(0, 50, size=6))}
            before, _, _ = vote(VoteCounts(**base))
            for central in ("x", "y", "z"):
                bumped = dict(base)
                bumped[central] += 1
                after, _, _ = vote(VoteCounts(**bumped))
                assert after[owner[central]] >= before[owner[central]]
                for name in CLASS_NAMES:
                    if name != owner[central]:
                        assert after[name] == before[name]

    def test_rejects_negative_counts(self):
        with pytest.raises(ValueError):
            VoteCounts(x=-1)


class TestLabelSlices:
    def test_all_central_infectious_with_constant_rule(self):
        volume = make_volume("p", [COVID_HU] * 100)
        labeling = label_slices(volume, COVID19, MockStage1Backend(lambda s: 1.0))
        assert set(labeling.labels) == set(range(10, 90))
        assert all(labeling.labels.values())

    def test_threshold_boundary_is_inclusive(self):
        volume = make_volume("p", [COVID_HU] * 40)
        at = label_slices(volume, CAP, MockStage1Backend(lambda s: 0.5), threshold=0.5)
        assert all(at.labels.values())
        below = label_slices(volume, CAP, MockStage1Backend(lambda s: 0.49), threshold=0.5)
        assert not any(below.labels.values())

    def test_mixed_rule_matches_hand_expectation(self):
        # 10 slices, all central; infectious wherever the mean is dark (< 64)
        slices = [COVID_HU, CAP_HU, COVID_HU, NORMAL_HU, COVID_HU,
                  CAP_HU, NORMAL_HU, COVID_HU, COVID_HU, CAP_HU]
        volume = make_volume("p", slices)
        backend = parse_mock_rule("mean<64:1.0;else:0.0")
        labeling = label_slices(volume, COVID19, backend)
        expected = {i: hu == COVID_HU for i, hu in enumerate(slices)}
        assert labeling.labels == expected

    def test_normal_diagnosis_rejected(self):
        volume = make_volume("p", [NORMAL_HU] * 10)
        with pytest.raises(ValueError, match="CAP or COVID19"):
            label_slices(volume, NORMAL, MockStage1Backend(lambda s: 1.0))

    def test_only_central_window_labeled(self):
        volume = make_volume("p", [COVID_HU] * 60)
        labeling = label_slices(volume, COVID19, MockStage1Backend(lambda s: 1.0))
        assert set(labeling.labels) == set(range(10, 50))


class TestClassifySlices:
    def test_one_verdict_per_slice_with_centrality(self):
        volume = make_volume("p", [COVID_HU] * 100)
        verdicts = classify_slices(volume, parse_mock_rule(STAGE2_RULE))
        assert len(verdicts) == 100
        assert sum(v.is_central for v in verdicts) == 80
        assert all(v.predicted_class == COVID19 for v in verdicts)

    def test_tally_conservation(self):
        rng = np.random.default_rng(52)
        backend = parse_mock_rule(STAGE2_RULE)
        for n in (1, 17, 39, 40, 80, 101):
            hu = [int(rng.choice([COVID_HU, CAP_HU, NORMAL_HU])) for _ in range(n)]
            verdicts = classify_slices(make_volume("p", hu), backend)
            counts = tally_verdicts(verdicts)
            central = min(80, 40 if n < 80 else 80, n) if n >= 40 else n
            assert counts.central_total == (80 if n >= 80 else 40 if n >= 40 else n)
            assert counts.peripheral_total == n - counts.central_total


class TestDiagnose:
    def test_all_normal_mock_on_hundred_slices(self):
        volume = make_volume("p", [NORMAL_HU] * 100)
        prediction = diagnose(volume, parse_mock_rule(STAGE2_RULE))
        assert prediction.counts.z == 80
        assert prediction.counts.z_prime == 20
        assert prediction.label == NORMAL
        assert prediction.scores[NORMAL] == 80 + 0.5 * 20

    def test_single_slice_volume(self):
        volume = make_volume("p", [CAP_HU])
        prediction = diagnose(volume, parse_mock_rule(STAGE2_RULE))
        assert prediction.counts.y == 1
        assert prediction.counts.peripheral_total == 0
        assert prediction.label == CAP

    def test_short_volume_warning(self):
        volume = make_volume("p", [NORMAL_HU] * 30)
        prediction = diagnose(volume, parse_mock_rule(STAGE2_RULE))
        assert any("short_volume" in w for w in prediction.warnings)

    def test_deterministic(self):
        volume = make_volume("p", [COVID_HU] * 10 + [CAP_HU] * 40 + [NORMAL_HU] * 10)
        backend = parse_mock_rule(STAGE2_RULE)
        a = diagnose(volume, backend)
        b = diagnose(volume, backend)
        assert (a.label, a.scores, a.counts, a.warnings) == (b.label, b.scores, b.counts, b.warnings)
        assert all(
            va.probabilities.tobytes() == vb.probabilities.tobytes()
            for va, vb in zip(a.verdicts, b.verdicts)
        )

    def test_verdicts_recorded(self):
        volume = make_volume("p", [CAP_HU] * 5)
        prediction = diagnose(volume, parse_mock_rule(STAGE2_RULE))
        assert len(prediction.verdicts) == 5
        assert all(v.predicted_class == CAP for v in prediction.verdicts)


class TestRunDataset:
    def test_five_patient_expected_labels(self, five_patient_manifest):
        manifest = load_manifest(five_patient_manifest)
        report = run_dataset(manifest, parse_mock_rule(STAGE2_RULE))
        labels = {p.patient_id: p.label for p in report.patients}
        assert labels == EXPECTED_LABELS
        assert len(report.slices) == 100 + 60 + 30 + 81 + 50

    def test_truth_joined_from_manifest(self, five_patient_manifest):
        manifest = load_manifest(five_patient_manifest)
        report = run_dataset(manifest, parse_mock_rule(STAGE2_RULE))
        truth = {p.patient_id: p.truth for p in report.patients}
        assert truth == {"P1": COVID19, "P2": CAP, "P3": NORMAL, "P4": CAP, "P5": None}

    def test_failure_recorded_without_aborting(self, five_patient_manifest, tmp_path):
        manifest = load_manifest(five_patient_manifest)
        manifest.entries[1].volume_path = tmp_path / "missing.raw"
        report = run_dataset(manifest, parse_mock_rule(STAGE2_RULE))
        by_id = {p.patient_id: p for p in report.patients}
        assert by_id["P2"].error is not None
        assert by_id["P2"].label is None
        assert by_id["P1"].label == COVID19  # batch continued
        assert all(s.patient_id != "P2" for s in report.slices)

    def test_jobs_one_equals_jobs_eight(self, five_patient_manifest):
        manifest = load_manifest(five_patient_manifest)
        backend = parse_mock_rule(STAGE2_RULE)
        assert run_dataset(manifest, backend, jobs=1) == run_dataset(manifest, backend, jobs=8)

    def test_slice_label_indices_validated_lazily(self, five_patient_manifest):
        manifest = load_manifest(five_patient_manifest)
        entry = manifest.entries[0]
        entry.slice_labels[500] = True  # P1 has only 100 slices
        report = run_dataset(manifest, parse_mock_rule(STAGE2_RULE))
        by_id = {p.patient_id: p for p in report.patients}
        assert by_id["P1"].error is not None
        assert "out of range" in by_id["P1"].error

    def test_thread_unsafe_backend_serialized(self, five_patient_manifest):
        manifest = load_manifest(five_patient_manifest)
        backend = parse_mock_rule(STAGE2_RULE)
        backend.thread_safe = False
        report = run_dataset(manifest, backend, jobs=8)
        assert {p.patient_id: p.label for p in report.patients} == EXPECTED_LABELS


class TestCtVolumeClassifier:
    def test_predict_labels(self):
        clf = CtVolumeClassifier(backend=parse_mock_rule(STAGE2_RULE)).fit()
        volumes = [
            make_volume("a", [COVID_HU] * 50),
            make_volume("b", [CAP_HU] * 50),
            make_volume("c", [NORMAL_HU] * 50),
        ]
        assert clf.predict(volumes).tolist() == [COVID19, CAP, NORMAL]
        assert clf.classes_.tolist() == list(CLASS_NAMES)

    def test_predict_scores_ordering(self):
        clf = CtVolumeClassifier(backend=parse_mock_rule(STAGE2_RULE))
        scores = clf.predict_scores([make_volume("a", [NORMAL_HU] * 100)])
        assert scores.shape == (1, 3)
        assert scores[0, 0] == 80 + 0.5 * 20

    def test_requires_backend(self):
        with pytest.raises(ValueError, match="backend"):
            CtVolumeClassifier().fit()

    def test_get_params_includes_weights(self):
        clf = CtVolumeClassifier(backend=None, w_normal=0.6)
        params = clf.get_params()
        assert params["w_normal"] == 0.6
        assert "window_center" in params
