"""Torch-to-ONNX conversion via torch.fx symbolic tracing.

The exporter walks the traced graph and maps each call onto ONNX nodes
(opset 13), serializing weights as raw initializers. It covers the layer
vocabulary of the classifiers in this package (convolutions, batch norm,
pooling, dense layers, the usual activations, concatenation, and the
shape plumbing); anything outside that vocabulary raises
UnsupportedLayerError rather than producing a silently wrong graph.

Exported graphs take one NHWC float input, values in [0, 255], with the
/255 normalization and layout permute folded in, matching the consumer's
wire contract.
"""

from __future__ import annotations

import operator
from pathlib import Path

import numpy as np
import torch
import torch.fx
import torch.nn as nn
import torch.nn.functional as F

from .onnx_write import (
    GraphBuilder,
    attr_float,
    attr_int,
    attr_ints,
)

INPUT_SIZE = 512


class UnsupportedLayerError(ValueError):
    """Raised when a model uses a layer the exporter cannot serialize."""


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise UnsupportedLayerError(f"expected 2D parameter, got {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


class _Exporter:
    def __init__(self, module: nn.Module, input_size: int):
        self.module = module
        self.traced = torch.fx.symbolic_trace(module)
        self.modules = dict(self.traced.named_modules())
        self.builder = GraphBuilder()
        self.values: dict[str, str] = {}  # fx node name -> onnx value name
        self.input_size = input_size

    # -- helpers ---------------------------------------------------------

    def value_of(self, arg) -> str:
        if isinstance(arg, torch.fx.Node):
            return self.values[arg.name]
        if isinstance(arg, (float, int)):
            return self.builder.add_initializer(
                "const", np.asarray(arg, dtype=np.float32).reshape(())
            )
        if isinstance(arg, torch.Tensor):
            return self.builder.add_initializer("const", arg.detach().numpy().astype(np.float32))
        raise UnsupportedLayerError(f"cannot serialize argument {arg!r}")

    def weight(self, base: str, tensor: torch.Tensor, dtype=np.float32) -> str:
        return self.builder.add_initializer(base, tensor.detach().cpu().numpy().astype(dtype))

    def emit(self, op_type: str, inputs: list[str], node_name: str, attributes=()) -> str:
        out = self.builder.fresh_name(node_name)
        self.builder.add_node(op_type, inputs, [out], attributes)
        return out

    # -- module calls ----------------------------------------------------

    def convert_module(self, node: torch.fx.Node) -> str:
        mod = self.modules[node.target]
        x = self.value_of(node.args[0])
        name = node.name
        if isinstance(mod, nn.Conv2d):
            if mod.padding_mode != "zeros":
                raise UnsupportedLayerError(f"Conv2d padding_mode {mod.padding_mode!r}")
            if isinstance(mod.padding, str):
                raise UnsupportedLayerError("string Conv2d padding is not exportable")
            weight = self.weight(f"{node.target}.weight", mod.weight)
            inputs = [x, weight]
            if mod.bias is not None:
                inputs.append(self.weight(f"{node.target}.bias", mod.bias))
            ph, pw = _pair(mod.padding)
            attrs = [
                attr_ints("kernel_shape", _pair(mod.kernel_size)),
                attr_ints("strides", _pair(mod.stride)),
                attr_ints("pads", (ph, pw, ph, pw)),
                attr_ints("dilations", _pair(mod.dilation)),
                attr_int("group", mod.groups),
            ]
            return self.emit("Conv", inputs, name, attrs)
        if isinstance(mod, nn.BatchNorm2d):
            inputs = [
                x,
                self.weight(f"{node.target}.weight", mod.weight),
                self.weight(f"{node.target}.bias", mod.bias),
                self.weight(f"{node.target}.running_mean", mod.running_mean),
                self.weight(f"{node.target}.running_var", mod.running_var),
            ]
            return self.emit("BatchNormalization", inputs, name, [attr_float("epsilon", mod.eps)])
        if isinstance(mod, nn.Linear):
            inputs = [x, self.weight(f"{node.target}.weight", mod.weight)]
            if mod.bias is not None:
                inputs.append(self.weight(f"{node.target}.bias", mod.bias))
            return self.emit("Gemm", inputs, name, [attr_int("transB", 1)])
        if isinstance(mod, nn.ReLU):
            return self.emit("Relu", [x], name)
        if isinstance(mod, nn.Sigmoid):
            return self.emit("Sigmoid", [x], name)
        if isinstance(mod, nn.Softmax):
            axis = mod.dim if mod.dim is not None else -1
            return self.emit("Softmax", [x], name, [attr_int("axis", axis)])
        if isinstance(mod, nn.SiLU):
            gate = self.emit("Sigmoid", [x], f"{name}_gate")
            return self.emit("Mul", [x, gate], name)
        if isinstance(mod, nn.MaxPool2d):
            if _pair(mod.dilation) != (1, 1):
                raise UnsupportedLayerError("dilated MaxPool2d is not exportable")
            if mod.ceil_mode:
                raise UnsupportedLayerError("ceil_mode pooling is not exportable")
            ph, pw = _pair(mod.padding)
            stride = mod.stride if mod.stride is not None else mod.kernel_size
            attrs = [
                attr_ints("kernel_shape", _pair(mod.kernel_size)),
                attr_ints("strides", _pair(stride)),
                attr_ints("pads", (ph, pw, ph, pw)),
            ]
            return self.emit("MaxPool", [x], name, attrs)
        if isinstance(mod, nn.AvgPool2d):
            if mod.ceil_mode:
                raise UnsupportedLayerError("ceil_mode pooling is not exportable")
            if mod.divisor_override is not None:
                raise UnsupportedLayerError("AvgPool2d divisor_override is not exportable")
            ph, pw = _pair(mod.padding)
            stride = mod.stride if mod.stride is not None else mod.kernel_size
            attrs = [
                attr_ints("kernel_shape", _pair(mod.kernel_size)),
                attr_ints("strides", _pair(stride)),
                attr_ints("pads", (ph, pw, ph, pw)),
                attr_int("count_include_pad", 1 if mod.count_include_pad else 0),
            ]
            return self.emit("AveragePool", [x], name, attrs)
        if isinstance(mod, nn.AdaptiveAvgPool2d):
            if _pair(mod.output_size if mod.output_size is not None else 0) != (1, 1):
                raise UnsupportedLayerError("only global AdaptiveAvgPool2d((1,1)) is exportable")
            return self.emit("GlobalAveragePool", [x], name)
        if isinstance(mod, nn.Flatten):
            return self.emit("Flatten", [x], name, [attr_int("axis", mod.start_dim)])
        if isinstance(mod, (nn.Identity, nn.Dropout)):
            return x  # inference no-ops
        raise UnsupportedLayerError(f"module {type(mod).__name__} is not exportable")

    # -- function / method calls -----------------------------------------

    def convert_function(self, node: torch.fx.Node) -> str:
        target = node.target
        name = node.name
        args = node.args
        binary = {
            operator.add: "Add", torch.add: "Add",
            operator.sub: "Sub", torch.sub: "Sub",
            operator.mul: "Mul", torch.mul: "Mul",
            operator.truediv: "Div", torch.div: "Div",
        }
        if target in binary:
            return self.emit(binary[target], [self.value_of(args[0]), self.value_of(args[1])], name)
        if target in (torch.relu, F.relu):
            return self.emit("Relu", [self.value_of(args[0])], name)
        if target is torch.sigmoid:
            return self.emit("Sigmoid", [self.value_of(args[0])], name)
        if target in (torch.softmax, F.softmax):
            axis = node.kwargs.get("dim", args[1] if len(args) > 1 else -1)
            return self.emit("Softmax", [self.value_of(args[0])], name, [attr_int("axis", axis)])
        if target is F.silu:
            x = self.value_of(args[0])
            gate = self.emit("Sigmoid", [x], f"{name}_gate")
            return self.emit("Mul", [x, gate], name)
        if target is torch.flatten:
            axis = node.kwargs.get("start_dim", args[1] if len(args) > 1 else 0)
            return self.emit("Flatten", [self.value_of(args[0])], name, [attr_int("axis", axis)])
        if target is torch.cat:
            axis = node.kwargs.get("dim", args[1] if len(args) > 1 else 0)
            inputs = [self.value_of(a) for a in args[0]]
            return self.emit("Concat", inputs, name, [attr_int("axis", axis)])
        if target is F.adaptive_avg_pool2d:
            if _pair(args[1]) != (1, 1):
                raise UnsupportedLayerError("only adaptive_avg_pool2d(x, 1) is exportable")
            return self.emit("GlobalAveragePool", [self.value_of(args[0])], name)
        if target is torch.permute:
            return self._transpose(node, args[0], args[1])
        if target is torch.mean:
            return self._reduce_mean(node)
        if target is getattr:
            raise UnsupportedLayerError("dynamic attribute access is not exportable")
        raise UnsupportedLayerError(f"function {getattr(target, '__name__', target)!r} is not exportable")

    def convert_method(self, node: torch.fx.Node) -> str:
        method = node.target
        args = node.args
        if method == "permute":
            perm = args[1] if len(args) == 2 and isinstance(args[1], (tuple, list)) else args[1:]
            return self._transpose(node, args[0], perm)
        if method == "mean":
            return self._reduce_mean(node)
        if method == "flatten":
            axis = args[1] if len(args) > 1 else node.kwargs.get("start_dim", 0)
            return self.emit("Flatten", [self.value_of(args[0])], node.name, [attr_int("axis", axis)])
        if method == "contiguous":
            return self.value_of(args[0])
        if method in ("sigmoid",):
            return self.emit("Sigmoid", [self.value_of(args[0])], node.name)
        raise UnsupportedLayerError(f"method .{method}() is not exportable")

    def _transpose(self, node, tensor_arg, perm) -> str:
        perm = tuple(int(p) for p in perm)
        return self.emit(
            "Transpose", [self.value_of(tensor_arg)], node.name, [attr_ints("perm", perm)]
        )

    def _reduce_mean(self, node) -> str:
        args = node.args
        dim = node.kwargs.get("dim", args[1] if len(args) > 1 else None)
        if dim is None:
            raise UnsupportedLayerError("full-tensor mean() is not exportable")
        axes = tuple(int(d) for d in (dim if isinstance(dim, (tuple, list)) else (dim,)))
        keepdim = bool(node.kwargs.get("keepdim", args[2] if len(args) > 2 else False))
        attrs = [attr_ints("axes", axes), attr_int("keepdims", 1 if keepdim else 0)]
        return self.emit("ReduceMean", [self.value_of(args[0])], node.name, attrs)

    # -- driver ------------------------------------------------------------

    def run(self) -> bytes:
        placeholders = [n for n in self.traced.graph.nodes if n.op == "placeholder"]
        if len(placeholders) != 1:
            raise UnsupportedLayerError("exported models must take exactly one input")

        with torch.no_grad():
            probe = torch.zeros(1, self.input_size, self.input_size, 3)
            out_shape = tuple(int(d) for d in self.traced(probe).shape)

        for node in self.traced.graph.nodes:
            if node.op == "placeholder":
                self.values[node.name] = self.builder.add_input(
                    "input", (1, self.input_size, self.input_size, 3)
                )
            elif node.op == "get_attr":
                tensor = self.traced
                for part in node.target.split("."):
                    tensor = getattr(tensor, part)
                self.values[node.name] = self.weight(node.target, tensor)
            elif node.op == "call_module":
                self.values[node.name] = self.convert_module(node)
            elif node.op == "call_function":
                self.values[node.name] = self.convert_function(node)
            elif node.op == "call_method":
                self.values[node.name] = self.convert_method(node)
            elif node.op == "output":
                result = node.args[0]
                if isinstance(result, (tuple, list)):
                    raise UnsupportedLayerError("exported models must return one tensor")
                self.builder.add_output(self.value_of(result), out_shape)
            else:  # pragma: no cover - fx has no other opcodes today
                raise UnsupportedLayerError(f"fx opcode {node.op!r} is not exportable")
        return self.builder.serialize()


def export_onnx(model: nn.Module, path: Path | str, input_size: int = INPUT_SIZE) -> None:
    """Serialize an inference model to ONNX at ``path``.

    The model must map (1, input_size, input_size, 3) tensors in [0, 255]
    to its output probabilities; the activation belongs inside the model
    (wrap a classifier in InferenceModel first).
    """
    # Snapshot per-module modes: a blanket .train() on exit would flip
    # submodules that were already in eval (and corrupt BatchNorm behavior).
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        data = _Exporter(model, input_size).run()
    finally:
        for mod, mode in modes:
            mod.training = mode
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
