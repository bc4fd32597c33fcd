"""Command-line entry point for reproducible batch triage runs.

Subcommands: ``preprocess``, ``label-slices``, ``diagnose``, ``evaluate``.
Options may also come from a TOML config file (``--config``); explicit
flags win over config values, which win over defaults. All runs are
seedless and deterministic: identical inputs and config produce
byte-identical outputs regardless of the parallelism degree.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import cv2

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .labels import CAP, COVID19, NORMAL, UNKNOWN, parse_diagnosis
from .metrics import evaluate, format_confusion_matrix
from .nn_backend import load_model_backend, parse_mock_rule
from .pipeline import DEFAULT_WEIGHTS, VoteWeights, label_slices, run_dataset
from .preprocess import WindowSpec, select_middle_slices, windowed_slice
from .report import write_report
from .volume_io import load_manifest, load_volume, write_slice_labels

PROG = "cttriage"

_DEFAULTS = {
    "window_center": WindowSpec().center_hu,
    "window_width": WindowSpec().width_hu,
    "weights": f"{DEFAULT_WEIGHTS.covid},{DEFAULT_WEIGHTS.cap},{DEFAULT_WEIGHTS.normal}",
    "threshold": 0.5,
    "jobs": None,
    "assume_prewindowed": False,
}


class CliError(Exception):
    """Fatal CLI failure; message becomes the single-line diagnostic."""


def _warn(message: str) -> None:
    print(f"{PROG}: warning: {message}", file=sys.stderr)


def _add_shared_options(parser: argparse.ArgumentParser, stage1: bool = False, stage2: bool = False) -> None:
    parser.add_argument("--config", type=Path, help="TOML config file; flags override it")
    parser.add_argument("--manifest", type=Path, help="dataset manifest CSV")
    parser.add_argument("--out", type=Path, help="output path (directory or report file)")
    parser.add_argument("--window-center", type=float, dest="window_center",
                        help="HU window center (default -500)")
    parser.add_argument("--window-width", type=float, dest="window_width",
                        help="HU window width (default 1300)")
    parser.add_argument("--assume-prewindowed", action="store_const", const=True,
                        dest="assume_prewindowed",
                        help="voxels are already display values; skip the HU mapping")
    if stage1 or stage2:
        parser.add_argument("--mock", help="mock backend rule spec instead of a model file")
        parser.add_argument("--jobs", type=int, help="parallel workers (default: cpu count)")
    if stage1:
        parser.add_argument("--stage1-model", type=Path, dest="stage1_model",
                            help="ONNX Stage-1 (binary) model file")
        parser.add_argument("--threshold", type=float,
                            help="infectious probability threshold (default 0.5)")
    if stage2:
        parser.add_argument("--stage2-model", type=Path, dest="stage2_model",
                            help="ONNX Stage-2 (three-way) model file")
        parser.add_argument("--weights", help="vote weights as 'w_covid,w_cap,w_normal'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Batch CT-volume triage: windowing, slice classification, patient voting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="window volumes and dump PNG slices for inspection")
    p.add_argument("volumes", nargs="*", type=Path, help="volume files (raw/sidecar or stem)")
    _add_shared_options(p)

    p = sub.add_parser("label-slices", help="Stage-1: write infectious/non-infectious slice CSVs")
    _add_shared_options(p, stage1=True)
    p.add_argument("--diagnosis", help="restrict labeling to one disease (CAP or COVID19)")

    p = sub.add_parser("diagnose", help="Stage-2 + vote: write a prediction report")
    _add_shared_options(p, stage2=True)

    p = sub.add_parser("evaluate", help="diagnose, join manifest truth, and report metrics")
    _add_shared_options(p, stage2=True)

    return parser


def _effective(args: argparse.Namespace, key: str):
    value = getattr(args, key, None)
    if value is not None:
        return value
    config = getattr(args, "_config", {})
    if key in config:
        return config[key]
    return _DEFAULTS.get(key)


def _load_config(args: argparse.Namespace) -> None:
    config_path = getattr(args, "config", None)
    if config_path is None:
        args._config = {}
        return
    try:
        with open(config_path, "rb") as handle:
            args._config = tomllib.load(handle)
    except FileNotFoundError:
        raise CliError(f"config file not found: {config_path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"bad config file {config_path}: {exc}") from None


def _window_spec(args) -> WindowSpec:
    try:
        return WindowSpec(float(_effective(args, "window_center")),
                          float(_effective(args, "window_width")))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _vote_weights(args) -> VoteWeights:
    raw = str(_effective(args, "weights"))
    parts = raw.split(",")
    if len(parts) != 3:
        raise CliError(f"--weights expects 'w_covid,w_cap,w_normal', got {raw!r}")
    try:
        w = VoteWeights(*(float(p) for p in parts))
    except ValueError:
        raise CliError(f"--weights values must be numeric, got {raw!r}") from None
    if min(w) <= 0:
        raise CliError("vote weights must be positive")
    return w


def _backend(args, n_outputs: int):
    model_key = "stage1_model" if n_outputs == 1 else "stage2_model"
    model_path = _effective(args, model_key)
    mock_spec = _effective(args, "mock")
    if (model_path is None) == (mock_spec is None):
        raise CliError(
            f"exactly one of --{model_key.replace('_', '-')} or --mock is required"
        )
    try:
        if mock_spec is not None:
            backend = parse_mock_rule(str(mock_spec))
            if backend.n_outputs != n_outputs:
                raise CliError(
                    f"mock rule has {backend.n_outputs} outputs; this command needs {n_outputs}"
                )
            return backend
        return load_model_backend(Path(model_path), n_outputs=n_outputs)
    except CliError:
        raise
    except (ValueError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from None


def _require_manifest(args):
    manifest_path = _effective(args, "manifest")
    if manifest_path is None:
        raise CliError("--manifest is required")
    try:
        return load_manifest(Path(manifest_path))
    except (ValueError, FileNotFoundError, OSError) as exc:
        raise CliError(str(exc)) from None


def _require_out(args) -> Path:
    out = _effective(args, "out")
    if out is None:
        raise CliError("--out is required")
    return Path(out)


def cmd_preprocess(args) -> int:
    out_dir = _require_out(args)
    spec = _window_spec(args)
    prewindowed = bool(_effective(args, "assume_prewindowed"))

    volume_paths = [Path(v) for v in args.volumes]
    if _effective(args, "manifest") is not None:
        manifest = _require_manifest(args)
        volume_paths.extend(entry.volume_path for entry in manifest.entries)
    if not volume_paths:
        raise CliError("preprocess needs volume paths or --manifest")

    out_dir.mkdir(parents=True, exist_ok=True)
    for path in volume_paths:
        try:
            volume = load_volume(path)
        except (ValueError, FileNotFoundError) as exc:
            raise CliError(str(exc)) from None
        window = select_middle_slices(volume.n_slices)
        for index in range(volume.n_slices):
            gray = windowed_slice(volume, index, spec, prewindowed)
            cv2.imwrite(str(out_dir / f"{volume.patient_id}_{index:04d}.png"), gray)
        summary = {
            "patient_id": volume.patient_id,
            "n_slices": volume.n_slices,
            "central_start": window.start,
            "central_end": window.end,
        }
        (out_dir / f"{volume.patient_id}_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
        print(
            f"{volume.patient_id}: n_slices={volume.n_slices} "
            f"central=[{window.start},{window.end})"
        )
    return 0


def cmd_label_slices(args) -> int:
    manifest = _require_manifest(args)
    out_dir = _require_out(args)
    spec = _window_spec(args)
    prewindowed = bool(_effective(args, "assume_prewindowed"))
    threshold = float(_effective(args, "threshold"))
    backend = _backend(args, n_outputs=1)
    only = _effective(args, "diagnosis")
    if only is not None:
        only = parse_diagnosis(str(only))
        if only not in (CAP, COVID19):
            raise CliError(f"--diagnosis must be CAP or COVID19, got {only}")

    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for entry in manifest.entries:
        if entry.diagnosis in (NORMAL, UNKNOWN):
            _warn(f"skipping {entry.patient_id}: no Stage-1 labeler for {entry.diagnosis} volumes")
            continue
        if only is not None and entry.diagnosis != only:
            continue
        try:
            volume = load_volume(entry.volume_path)
            labeling = label_slices(
                volume, entry.diagnosis, backend, threshold, spec, prewindowed
            )
        except (ValueError, FileNotFoundError, RuntimeError) as exc:
            _warn(f"{entry.patient_id} failed: {exc}")
            continue
        write_slice_labels(labeling.labels, out_dir / f"{entry.patient_id}.csv")
        infectious = sum(labeling.labels.values())
        print(
            f"{entry.patient_id}: labeled [{labeling.window.start},{labeling.window.end}) "
            f"infectious={infectious}/{len(labeling.labels)}"
        )
        written += 1
    print(f"wrote {written} slice-label file(s) to {out_dir}")
    return 0


def _run_predictions(args):
    manifest = _require_manifest(args)
    backend = _backend(args, n_outputs=3)
    jobs = _effective(args, "jobs")
    report = run_dataset(
        manifest,
        backend,
        weights=_vote_weights(args),
        window_spec=_window_spec(args),
        assume_prewindowed=bool(_effective(args, "assume_prewindowed")),
        jobs=int(jobs) if jobs is not None else None,
    )
    return manifest, report


def cmd_diagnose(args) -> int:
    out_path = _require_out(args)
    _, report = _run_predictions(args)
    write_report(report, out_path)
    for patient in report.patients:
        if patient.error is not None:
            _warn(f"{patient.patient_id} failed: {patient.error}")
        else:
            print(f"{patient.patient_id}: {patient.label}")
    print(f"report written to {out_path}")
    return 0


def cmd_evaluate(args) -> int:
    out_path = _require_out(args)
    manifest, predictions = _run_predictions(args)
    try:
        report = evaluate(predictions, manifest)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_report(report, out_path)
    metrics = report.metrics
    print(format_confusion_matrix(metrics["patient_level"], "patient-level confusion matrix"))
    if metrics["slice_level"] is not None:
        print()
        print(format_confusion_matrix(metrics["slice_level"], "slice-level confusion matrix"))
    if metrics["skipped_patients"]:
        print(f"skipped patients (unknown truth): {metrics['skipped_patients']}")
    print(f"report written to {out_path}")
    return 0


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "label-slices": cmd_label_slices,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _load_config(args)
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failure guard
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
