"""ONNX writer and fx exporter tests.

Numeric truth comes from the torch forward pass; structural truth from
``protoc --decode_raw`` and, where torch's own C++ ONNX serializer can be
coaxed into running, from a byte-level independent exporter of the same
network.
"""

import shutil
import subprocess
import warnings

import numpy as np
import pytest
import torch
import torch.nn as nn

from ctforge.models import InferenceModel, PooledDenseHead, build_classifier
from ctforge.onnx_export import UnsupportedLayerError, export_onnx
from ctforge.onnx_write import GraphBuilder, attr_int

from cttriage.onnx_graph import OnnxGraphEvaluator, load_onnx_backend, parse_model
from cttriage.preprocess import SliceTensor

warnings.filterwarnings("ignore", category=UserWarning)


def evaluate_file(path, feed: np.ndarray) -> np.ndarray:
    model = parse_model(path.read_bytes())
    evaluator = OnnxGraphEvaluator(model)
    name = evaluator.input_infos[0].name
    out = evaluator.run({name: feed})
    return out[evaluator.output_infos[0].name]


class TestExportNumerics:
    @pytest.mark.parametrize("stage,backbone", [(1, "fixture"), (2, "fixture"), (2, "tiny")])
    def test_matches_torch_forward(self, tmp_path, stage, backbone):
        torch.manual_seed(11 + stage)
        model = InferenceModel(build_classifier(stage, backbone)).eval()
        size = 64 if backbone == "tiny" else 128
        path = tmp_path / "m.onnx"
        export_onnx(model, path, input_size=size)
        rng = np.random.default_rng(stage)
        feed = rng.uniform(0, 255, size=(1, size, size, 3)).astype(np.float32)
        got = evaluate_file(path, feed)
        with torch.no_grad():
            want = model(torch.from_numpy(feed)).numpy()
        assert got.shape == want.shape
        assert np.abs(got - want).max() <= 1e-5

    def test_contract_export_loads_in_primary(self, tmp_path):
        torch.manual_seed(13)
        model = InferenceModel(build_classifier(2, "fixture")).eval()
        path = tmp_path / "m.onnx"
        export_onnx(model, path)
        backend = load_onnx_backend(path, n_outputs=3)
        rng = np.random.default_rng(13)
        pixels = rng.uniform(0, 255, size=(512, 512, 3)).astype(np.float32)
        probs = backend.predict(SliceTensor(pixels=pixels))
        with torch.no_grad():
            want = model(torch.from_numpy(pixels[None])).numpy().reshape(-1)
        assert np.abs(probs - want).max() <= 1e-5

    def test_mixed_op_network(self, tmp_path):
        # exercises cat, silu, maxpool, batchnorm, elementwise add
        class Mixed(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv1 = nn.Conv2d(3, 4, 3, padding=1)
                self.conv2 = nn.Conv2d(3, 4, 5, padding=2)
                self.bn = nn.BatchNorm2d(8)
                self.act = nn.SiLU()
                self.pool = nn.MaxPool2d(2)
                self.head = PooledDenseHead(8, (16,), 3)

            def forward(self, x):
                x = x.permute(0, 3, 1, 2) / 255.0
                a = self.conv1(x)
                b = self.conv2(x)
                merged = torch.cat([a, b], 1)
                merged = self.act(self.bn(merged)) + 0.5
                return torch.softmax(self.head(self.pool(merged)), dim=1)

        torch.manual_seed(17)
        model = Mixed().eval()
        path = tmp_path / "mixed.onnx"
        export_onnx(model, path, input_size=32)
        rng = np.random.default_rng(17)
        feed = rng.uniform(0, 255, size=(1, 32, 32, 3)).astype(np.float32)
        got = evaluate_file(path, feed)
        with torch.no_grad():
            want = model(torch.from_numpy(feed)).numpy()
        assert np.abs(got - want).max() <= 1e-5

    def test_batchnorm_respects_trained_stats(self, tmp_path):
        torch.manual_seed(19)
        model = build_classifier(2, "tiny")
        # push running stats away from init so the export must carry them
        with torch.no_grad():
            for mod in model.modules():
                if isinstance(mod, nn.BatchNorm2d):
                    mod.running_mean.add_(torch.randn_like(mod.running_mean))
                    mod.running_var.mul_(2.0)
        wrapped = InferenceModel(model).eval()
        path = tmp_path / "bn.onnx"
        export_onnx(wrapped, path, input_size=64)
        feed = np.random.default_rng(19).uniform(0, 255, size=(1, 64, 64, 3)).astype(np.float32)
        got = evaluate_file(path, feed)
        with torch.no_grad():
            want = wrapped(torch.from_numpy(feed)).numpy()
        assert np.abs(got - want).max() <= 1e-5


class TestExportErrors:
    def test_unsupported_module(self, tmp_path):
        class WithUpsample(nn.Module):
            def __init__(self):
                super().__init__()
                self.up = nn.Upsample(scale_factor=2)

            def forward(self, x):
                x = x.permute(0, 3, 1, 2)
                return self.up(x).mean(dim=(1, 2, 3))

        with pytest.raises(UnsupportedLayerError, match="Upsample"):
            export_onnx(WithUpsample().eval(), tmp_path / "x.onnx", input_size=8)

    def test_unsupported_function(self, tmp_path):
        class WithFft(nn.Module):
            def forward(self, x):
                return torch.fft.fft(x).real

        with pytest.raises(UnsupportedLayerError):
            export_onnx(WithFft().eval(), tmp_path / "x.onnx", input_size=8)


class TestWireFormat:
    @pytest.mark.skipif(shutil.which("protoc") is None, reason="protoc not installed")
    def test_protoc_decodes_emitted_bytes(self, tmp_path):
        torch.manual_seed(23)
        model = InferenceModel(build_classifier(1, "fixture")).eval()
        path = tmp_path / "m.onnx"
        export_onnx(model, path)
        decoded = subprocess.run(
            ["protoc", "--decode_raw"], input=path.read_bytes(), capture_output=True, check=True
        ).stdout.decode()
        assert '4: "Conv"' in decoded
        assert '4: "Sigmoid"' in decoded
        assert '2: "ctforge"' in decoded  # producer string

    def test_primary_decoder_sees_expected_structure(self, tmp_path):
        torch.manual_seed(29)
        model = InferenceModel(build_classifier(2, "fixture")).eval()
        path = tmp_path / "m.onnx"
        export_onnx(model, path)
        parsed = parse_model(path.read_bytes())
        ops = [n.op_type for n in parsed.graph.nodes]
        assert ops[0] == "Transpose"
        assert "Conv" in ops and "GlobalAveragePool" in ops and "Gemm" in ops
        assert ops[-1] == "Softmax"
        assert parsed.graph.inputs[0].dims == (1, 512, 512, 3)
        assert parsed.graph.outputs[0].dims == (1, 3)
        assert parsed.opset_version == 13

    def test_builder_rejects_unsupported_dtype(self):
        builder = GraphBuilder()
        with pytest.raises(ValueError, match="float32/int64"):
            builder.add_initializer("w", np.zeros(3, dtype=np.float16))

    def test_fresh_names_unique(self):
        builder = GraphBuilder()
        first = builder.fresh_name("x")
        second = builder.fresh_name("x")
        assert first != second

    def test_attr_int_negative_roundtrip(self, tmp_path):
        builder = GraphBuilder()
        builder.add_input("input", (1, 3))
        builder.add_node("Softmax", ["input"], ["out"], [attr_int("axis", -1)])
        builder.add_output("out", (1, 3))
        parsed = parse_model(builder.serialize())
        assert parsed.graph.nodes[0].attrs["axis"] == -1


class TestTorchSerializerCrossCheck:
    """Compares against torch's own C++ ONNX serializer where available.

    torch 2.13 gates its legacy exporter behind the onnx package for a
    post-processing step that is a no-op for plain aten graphs, so the
    test patches that step out; if the internals have moved, the test
    skips rather than fails.
    """

    def _torch_export(self, model, example, path):
        try:
            from torch.onnx._internal.torchscript_exporter import onnx_proto_utils
        except ImportError:
            pytest.skip("torchscript exporter internals unavailable")
        original = onnx_proto_utils._add_onnxscript_fn
        onnx_proto_utils._add_onnxscript_fn = lambda proto, custom_opsets: proto
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                torch.onnx.export(
                    model, example, str(path), dynamo=False, opset_version=13,
                    input_names=["input"], output_names=["out"],
                )
        except Exception as exc:  # pragma: no cover - depends on torch internals
            pytest.skip(f"torch legacy exporter unavailable: {exc}")
        finally:
            onnx_proto_utils._add_onnxscript_fn = original

    def test_same_network_same_numbers(self, tmp_path):
        torch.manual_seed(31)
        model = InferenceModel(build_classifier(2, "fixture")).eval()
        size = 96
        example = torch.zeros(1, size, size, 3)

        ours = tmp_path / "ours.onnx"
        theirs = tmp_path / "theirs.onnx"
        export_onnx(model, ours, input_size=size)
        self._torch_export(model, example, theirs)

        feed = np.random.default_rng(31).uniform(0, 255, size=(1, size, size, 3)).astype(np.float32)
        got_ours = evaluate_file(ours, feed)
        got_theirs = evaluate_file(theirs, feed)
        assert np.abs(got_ours - got_theirs).max() <= 1e-5
