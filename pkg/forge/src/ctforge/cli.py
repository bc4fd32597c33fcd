"""Command-line entry points: forge-train, forge-export, forge-fixture."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .data import (
    CLASS_NAMES,
    balance_classes,
    collect_stage1_pools,
    collect_stage2_pools,
    make_shape_dataset,
    pools_to_arrays,
    read_manifest,
    split_train_holdout,
)
from .fixtures import make_fixture
from .models import InferenceModel, build_classifier
from .onnx_export import export_onnx
from .train import TrainSpec, finetune

PROG = "ctforge"


def _fail(message: str) -> int:
    print(f"{PROG}: error: {message}", file=sys.stderr)
    return 1


def _save_checkpoint(result, spec: TrainSpec, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "spec": dataclasses.asdict(spec),
            "state_dict": result.model.state_dict(),
            "history": [dataclasses.asdict(e) for e in result.history],
        },
        path,
    )


def load_checkpoint(path: Path | str):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    spec_dict = dict(payload["spec"])
    spec = TrainSpec(**spec_dict)
    model = build_classifier(spec.stage, spec.backbone)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, spec, payload.get("history", [])


def main_train(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="forge-train", description="Fine-tune a Stage-1 or Stage-2 slice classifier."
    )
    parser.add_argument("--stage", type=int, choices=(1, 2), required=True)
    parser.add_argument("--manifest", type=Path, help="triage manifest CSV with slice labels")
    parser.add_argument("--diagnosis", choices=("CAP", "COVID19"),
                        help="disease for Stage-1 labeling (required with --stage 1)")
    parser.add_argument("--synthetic-shapes", type=int, metavar="N",
                        help="train on N synthetic shape images per class instead of a manifest")
    parser.add_argument("--backbone", default="tiny",
                        help="tiny, fixture, densenet121, or efficientnet_b0")
    parser.add_argument("--weights", type=Path, help="local backbone weights file")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--learning-rate", type=float, default=2e-4)
    parser.add_argument("--no-balance", action="store_true",
                        help="skip undersampling to equal class sizes")
    parser.add_argument("--holdout-fraction", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True, help="checkpoint output path (.pt)")
    args = parser.parse_args(argv)

    spec = TrainSpec(
        stage=args.stage,
        backbone=args.backbone,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        balanced_sampling=not args.no_balance,
        seed=args.seed,
        weights_path=str(args.weights) if args.weights else None,
    )

    try:
        if args.synthetic_shapes:
            if args.stage != 2:
                return _fail("--synthetic-shapes builds a three-class dataset; use --stage 2")
            images, labels = make_shape_dataset(args.synthetic_shapes, seed=args.seed)
        elif args.manifest:
            entries = read_manifest(args.manifest)
            if args.stage == 1:
                if not args.diagnosis:
                    return _fail("--stage 1 needs --diagnosis CAP or COVID19")
                pools = collect_stage1_pools(entries, args.diagnosis)
                order = ("non_infectious", "infectious")
            else:
                pools = collect_stage2_pools(entries)
                order = CLASS_NAMES
            if spec.balanced_sampling:
                pools = balance_classes(pools, seed=args.seed)
            images, labels = pools_to_arrays(pools, order)
        else:
            return _fail("provide --manifest or --synthetic-shapes")

        train, holdout = split_train_holdout(images, labels, args.holdout_fraction, args.seed)
        result = finetune(spec, train, holdout, log=print)
        _save_checkpoint(result, spec, args.out)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        return _fail(str(exc))

    final = result.final
    print(json.dumps({
        "checkpoint": str(args.out),
        "train_accuracy": final.train_accuracy,
        "holdout_accuracy": final.holdout_accuracy,
    }))
    return 0


def main_export(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="forge-export", description="Export a trained checkpoint as an ONNX graph."
    )
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="ONNX output path")
    args = parser.parse_args(argv)
    try:
        model, spec, _ = load_checkpoint(args.checkpoint)
        export_onnx(InferenceModel(model), args.out)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        return _fail(str(exc))
    print(f"exported stage-{spec.stage} model to {args.out}")
    return 0


def main_fixture(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="forge-fixture", description="Generate a tiny deterministic fixture model."
    )
    parser.add_argument("--stage", type=int, choices=(1, 2), required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args(argv)
    try:
        path = make_fixture(args.stage, args.out, seed=args.seed)
    except (ValueError, RuntimeError) as exc:
        return _fail(str(exc))
    print(f"wrote stage-{args.stage} fixture to {path} ({path.stat().st_size} bytes)")
    return 0
