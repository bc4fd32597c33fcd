"""forge-train / forge-export / forge-fixture end-to-end."""

import json

import numpy as np
from ctforge.cli import main_export, main_fixture, main_train

from cttriage.nn_backend import load_model_backend
from cttriage.preprocess import SliceTensor


class TestFixtureCommand:
    def test_writes_loadable_fixture(self, tmp_path, capsys):
        out = tmp_path / "fx.onnx"
        assert main_fixture(["--stage", "2", "--out", str(out)]) == 0
        assert out.is_file()
        assert "stage-2 fixture" in capsys.readouterr().out
        backend = load_model_backend(out, n_outputs=3)
        pixels = np.zeros((512, 512, 3), dtype=np.float32)
        probs = backend.predict(SliceTensor(pixels=pixels))
        assert abs(float(probs.sum()) - 1.0) <= 1e-6


class TestTrainExportCommands:
    def test_synthetic_train_then_export(self, tmp_path, capsys):
        ckpt = tmp_path / "model.pt"
        code = main_train([
            "--stage", "2", "--synthetic-shapes", "6", "--backbone", "fixture",
            "--epochs", "2", "--batch-size", "6", "--seed", "3", "--out", str(ckpt),
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["checkpoint"] == str(ckpt)
        assert 0.0 <= summary["train_accuracy"] <= 1.0

        onnx_path = tmp_path / "model.onnx"
        assert main_export(["--checkpoint", str(ckpt), "--out", str(onnx_path)]) == 0
        backend = load_model_backend(onnx_path, n_outputs=3)
        probs = backend.predict(
            SliceTensor(pixels=np.full((512, 512, 3), 40.0, dtype=np.float32))
        )
        assert abs(float(probs.sum()) - 1.0) <= 1e-6

    def test_stage1_needs_diagnosis_with_manifest(self, tmp_path, capsys):
        manifest = tmp_path / "m.csv"
        manifest.write_text("patient_id,volume_path,diagnosis\n")
        code = main_train([
            "--stage", "1", "--manifest", str(manifest), "--out", str(tmp_path / "m.pt"),
        ])
        assert code == 1
        assert "--diagnosis" in capsys.readouterr().err

    def test_synthetic_requires_stage2(self, tmp_path, capsys):
        code = main_train([
            "--stage", "1", "--synthetic-shapes", "4", "--out", str(tmp_path / "m.pt"),
        ])
        assert code == 1
        assert "--stage 2" in capsys.readouterr().err

    def test_no_data_source_is_error(self, tmp_path, capsys):
        code = main_train(["--stage", "2", "--out", str(tmp_path / "m.pt")])
        assert code == 1
        assert "manifest" in capsys.readouterr().err

    def test_manifest_training_stage1(self, tmp_path):
        # small real-format dataset: one labeled COVID19 volume
        voxels = np.zeros((6, 32, 32), dtype=np.int16)
        voxels[:3] = -1150  # dark slices get the infectious label
        (tmp_path / "v.raw").write_bytes(voxels.astype("<i2").tobytes())
        (tmp_path / "v.json").write_text(
            json.dumps({"patient_id": "v", "n_slices": 6, "height": 32, "width": 32})
        )
        (tmp_path / "labels.csv").write_text(
            "slice_index,label\n" + "".join(
                f"{i},{'infectious' if i < 3 else 'non_infectious'}\n" for i in range(6)
            )
        )
        (tmp_path / "m.csv").write_text(
            "patient_id,volume_path,diagnosis,slice_labels_path\nv,v.raw,COVID19,labels.csv\n"
        )
        ckpt = tmp_path / "s1.pt"
        code = main_train([
            "--stage", "1", "--manifest", str(tmp_path / "m.csv"), "--diagnosis", "COVID19",
            "--backbone", "fixture", "--epochs", "1", "--batch-size", "4",
            "--holdout-fraction", "0.34", "--out", str(ckpt),
        ])
        assert code == 0
        assert ckpt.is_file()

    def test_export_missing_checkpoint(self, tmp_path, capsys):
        code = main_export([
            "--checkpoint", str(tmp_path / "none.pt"), "--out", str(tmp_path / "x.onnx"),
        ])
        assert code == 1
        assert "error" in capsys.readouterr().err
