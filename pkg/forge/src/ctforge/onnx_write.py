"""Minimal ONNX protobuf writer.

Serializes the ModelProto subset the exported classifiers need: float32
and int64 tensors as raw data, the standard attribute kinds, static
tensor shapes, and a single default-domain opset import. Field numbers
follow the frozen ONNX schema.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FLOAT = 1
INT64 = 7

_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_TENSOR = 4
_ATTR_INTS = 7

OPSET_VERSION = 13
IR_VERSION = 8


def _varint(value: int) -> bytes:
    if value < 0:
        value += 1 << 64
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(fieldno: int, wire: int) -> bytes:
    return _varint((fieldno << 3) | wire)


def _ld(fieldno: int, payload: bytes) -> bytes:
    return _tag(fieldno, 2) + _varint(len(payload)) + payload


def _vint(fieldno: int, value: int) -> bytes:
    return _tag(fieldno, 0) + _varint(value)


def _f32(fieldno: int, value: float) -> bytes:
    return _tag(fieldno, 5) + struct.pack("<f", value)


def _string(fieldno: int, text: str) -> bytes:
    return _ld(fieldno, text.encode("utf-8"))


def tensor_proto(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    if array.dtype == np.float32:
        data_type = FLOAT
    elif array.dtype == np.int64:
        data_type = INT64
    else:
        raise ValueError(f"only float32/int64 tensors are serialized, got {array.dtype}")
    msg = b"".join(_vint(1, int(d)) for d in array.shape)
    msg += _vint(2, data_type)
    if name:
        msg += _string(8, name)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    msg += _ld(9, array.tobytes())
    return msg


def attr_int(name: str, value: int) -> bytes:
    return _string(1, name) + _vint(3, int(value)) + _vint(20, _ATTR_INT)


def attr_float(name: str, value: float) -> bytes:
    return _string(1, name) + _f32(2, float(value)) + _vint(20, _ATTR_FLOAT)


def attr_ints(name: str, values) -> bytes:
    packed = b"".join(_varint(int(v)) for v in values)
    return _string(1, name) + _ld(8, packed) + _vint(20, _ATTR_INTS)



def attr_tensor(name: str, array: np.ndarray) -> bytes:
    return _string(1, name) + _ld(5, tensor_proto("", array)) + _vint(20, _ATTR_TENSOR)


def node_proto(op_type: str, inputs, outputs, attributes=(), name: str = "") -> bytes:
    msg = b"".join(_string(1, i) for i in inputs)
    msg += b"".join(_string(2, o) for o in outputs)
    if name:
        msg += _string(3, name)
    msg += _string(4, op_type)
    msg += b"".join(_ld(5, a) for a in attributes)
    return msg


def value_info_proto(name: str, dims, elem_type: int = FLOAT) -> bytes:
    shape_msg = b""
    for dim in dims:
        if isinstance(dim, str):
            shape_msg += _ld(1, _string(2, dim))
        else:
            shape_msg += _ld(1, _vint(1, int(dim)))
    tensor_type = _vint(1, elem_type) + _ld(2, shape_msg)
    return _string(1, name) + _ld(2, _ld(1, tensor_type))


def graph_proto(nodes, inputs, outputs, initializers, name: str = "ctforge") -> bytes:
    msg = b"".join(_ld(1, n) for n in nodes)
    msg += _string(2, name)
    msg += b"".join(_ld(5, t) for t in initializers)
    msg += b"".join(_ld(11, vi) for vi in inputs)
    msg += b"".join(_ld(12, vi) for vi in outputs)
    return msg


def model_proto(graph: bytes, producer: str = "ctforge") -> bytes:
    opset = _string(1, "") + _vint(2, OPSET_VERSION)
    return _vint(1, IR_VERSION) + _string(2, producer) + _ld(7, graph) + _ld(8, opset)


@dataclass
class GraphBuilder:
    """Accumulates nodes, initializers, and I/O into a serialized model."""

    nodes: list[bytes] = field(default_factory=list)
    initializers: list[bytes] = field(default_factory=list)
    inputs: list[bytes] = field(default_factory=list)
    outputs: list[bytes] = field(default_factory=list)
    _names: set = field(default_factory=set)

    def fresh_name(self, base: str) -> str:
        name = base
        serial = 1
        while name in self._names:
            name = f"{base}_{serial}"
            serial += 1
        self._names.add(name)
        return name

    def add_input(self, name: str, dims) -> str:
        self._names.add(name)
        self.inputs.append(value_info_proto(name, dims))
        return name

    def add_output(self, name: str, dims) -> None:
        self.outputs.append(value_info_proto(name, dims))

    def add_initializer(self, base: str, array: np.ndarray) -> str:
        name = self.fresh_name(base)
        self.initializers.append(tensor_proto(name, array))
        return name

    def add_node(self, op_type: str, inputs, outputs, attributes=()) -> None:
        self.nodes.append(node_proto(op_type, inputs, outputs, attributes))

    def serialize(self) -> bytes:
        return model_proto(graph_proto(self.nodes, self.inputs, self.outputs, self.initializers))
