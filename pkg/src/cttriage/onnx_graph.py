"""Self-contained ONNX model loading and evaluation.

Neither onnx nor onnxruntime is a dependency: model files are decoded
straight from the protobuf wire format (the ONNX schema's field numbers
are frozen), and graphs are evaluated with numpy over a fixed operator
set. Anything outside that set raises UnsupportedOperatorError at load
time, before any tensor is fed.

Supported operators (default domain): Add, AveragePool, BatchNormalization,
Cast, Clip, Concat, Constant, Conv, Div, Flatten, Gemm, GlobalAveragePool,
Identity, MatMul, MaxPool, Mul, ReduceMean, Relu, Reshape, Sigmoid,
Softmax, Squeeze, Sub, Transpose, Unsqueeze.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_backend import BackendError, Stage1Backend, Stage2Backend
from .validation import check_slice_tensor


class OnnxDecodeError(ValueError):
    """Raised when a file is not a decodable ONNX model."""


class UnsupportedOperatorError(ValueError):
    """Raised when a graph uses operators outside the supported set."""


class ModelContractError(ValueError):
    """Raised when a graph violates the 1x512x512x3 -> 1|3 wire contract."""


# ---------------------------------------------------------------------------
# Protobuf wire-format decoding (ONNX subset)
# ---------------------------------------------------------------------------

_WIRE_VARINT = 0
_WIRE_FIXED64 = 1
_WIRE_LEN = 2
_WIRE_FIXED32 = 5


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxDecodeError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxDecodeError("varint too long")


def _signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) triples of one message."""
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        fieldno, wiretype = tag >> 3, tag & 0x7
        if wiretype == _WIRE_VARINT:
            value, pos = _read_varint(buf, pos)
        elif wiretype == _WIRE_FIXED64:
            value = buf[pos : pos + 8]
            pos += 8
        elif wiretype == _WIRE_LEN:
            length, pos = _read_varint(buf, pos)
            value = buf[pos : pos + length]
            if len(value) != length:
                raise OnnxDecodeError("truncated length-delimited field")
            pos += length
        elif wiretype == _WIRE_FIXED32:
            value = buf[pos : pos + 4]
            pos += 4
        else:
            raise OnnxDecodeError(f"unsupported wire type {wiretype}")
        if wiretype in (_WIRE_FIXED32, _WIRE_FIXED64) and len(value) not in (4, 8):
            raise OnnxDecodeError("truncated fixed-width field")
        yield fieldno, wiretype, value


def _packed_varints(value, wiretype, signed: bool = True) -> list[int]:
    # Repeated integer fields arrive packed (length-delimited) or as
    # individual varints depending on the writer.
    if wiretype == _WIRE_VARINT:
        vals = [value]
    else:
        vals = []
        pos = 0
        while pos < len(value):
            v, pos = _read_varint(value, pos)
            vals.append(v)
    return [_signed64(v) if signed else v for v in vals]


# onnx TensorProto.DataType -> numpy dtype
_TENSOR_DTYPES = {
    1: np.float32,
    2: np.uint8,
    3: np.int8,
    4: np.uint16,
    5: np.int16,
    6: np.int32,
    7: np.int64,
    9: np.bool_,
    10: np.float16,
    11: np.float64,
    12: np.uint32,
    13: np.uint64,
}

_FLOAT = 1


@dataclass
class OnnxTensor:
    name: str
    array: np.ndarray


@dataclass
class OnnxValueInfo:
    name: str
    elem_type: int | None = None
    dims: tuple | None = None  # ints for static dims, str for symbolic


@dataclass
class OnnxNode:
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict
    name: str = ""
    domain: str = ""


@dataclass
class OnnxGraph:
    name: str = ""
    nodes: list[OnnxNode] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[OnnxValueInfo] = field(default_factory=list)
    outputs: list[OnnxValueInfo] = field(default_factory=list)


@dataclass
class OnnxModel:
    graph: OnnxGraph
    ir_version: int = 0
    opset_version: int = 13


def _parse_tensor(buf: bytes) -> OnnxTensor:
    dims: list[int] = []
    data_type = 0
    raw: bytes | None = None
    float_data: list[float] = []
    int32_data: list[int] = []
    int64_data: list[int] = []
    double_data: list[float] = []
    uint64_data: list[int] = []
    name = ""
    for fieldno, wiretype, value in _iter_fields(buf):
        if fieldno == 1:
            dims.extend(_packed_varints(value, wiretype))
        elif fieldno == 2:
            data_type = value
        elif fieldno == 4:
            if wiretype == _WIRE_FIXED32:
                float_data.append(struct.unpack("<f", value)[0])
            else:
                float_data.extend(np.frombuffer(value, dtype="<f4").tolist())
        elif fieldno == 5:
            int32_data.extend(_packed_varints(value, wiretype))
        elif fieldno == 7:
            int64_data.extend(_packed_varints(value, wiretype))
        elif fieldno == 8:
            name = value.decode("utf-8")
        elif fieldno == 9:
            raw = value
        elif fieldno == 10:
            if wiretype == _WIRE_FIXED64:
                double_data.append(struct.unpack("<d", value)[0])
            else:
                double_data.extend(np.frombuffer(value, dtype="<f8").tolist())
        elif fieldno == 11:
            uint64_data.extend(_packed_varints(value, wiretype, signed=False))
        elif fieldno == 13:
            raise OnnxDecodeError("external tensor data is not supported")
    dtype = _TENSOR_DTYPES.get(data_type)
    if dtype is None:
        raise OnnxDecodeError(f"unsupported tensor data type {data_type}")
    if raw is not None:
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
    elif float_data:
        arr = np.asarray(float_data, dtype=dtype)
    elif int64_data:
        arr = np.asarray(int64_data, dtype=dtype)
    elif int32_data:
        if dtype == np.float16:
            arr = np.frombuffer(
                np.asarray(int32_data, dtype=np.uint16).tobytes(), dtype=np.float16
            ).copy()
        else:
            arr = np.asarray(int32_data, dtype=dtype)
    elif double_data:
        arr = np.asarray(double_data, dtype=dtype)
    elif uint64_data:
        arr = np.asarray(uint64_data, dtype=dtype)
    else:
        arr = np.zeros(0, dtype=dtype)
    expected = int(np.prod(dims)) if dims else arr.size
    if arr.size != expected:
        raise OnnxDecodeError(
            f"tensor {name!r}: payload has {arr.size} elements, dims {dims} expect {expected}"
        )
    return OnnxTensor(name=name, array=arr.reshape(dims) if dims else arr.reshape(()))


# AttributeProto.AttributeType values
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_TENSOR = 4
_ATTR_FLOATS = 6
_ATTR_INTS = 7
_ATTR_STRINGS = 8


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    atype = None
    f_val = 0.0
    i_val = 0
    s_val = b""
    t_val = None
    floats: list[float] = []
    ints: list[int] = []
    strings: list[bytes] = []
    for fieldno, wiretype, value in _iter_fields(buf):
        if fieldno == 1:
            name = value.decode("utf-8")
        elif fieldno == 2:
            f_val = struct.unpack("<f", value)[0]
        elif fieldno == 3:
            i_val = _signed64(value)
        elif fieldno == 4:
            s_val = value
        elif fieldno == 5:
            t_val = _parse_tensor(value)
        elif fieldno == 7:
            if wiretype == _WIRE_FIXED32:
                floats.append(struct.unpack("<f", value)[0])
            else:
                floats.extend(np.frombuffer(value, dtype="<f4").tolist())
        elif fieldno == 8:
            ints.extend(_packed_varints(value, wiretype))
        elif fieldno == 9:
            strings.append(value)
        elif fieldno == 20:
            atype = value
    if atype is None:
        # Writers are required to set the type; infer only as a fallback.
        if t_val is not None:
            atype = _ATTR_TENSOR
        elif ints:
            atype = _ATTR_INTS
        elif floats:
            atype = _ATTR_FLOATS
        elif strings:
            atype = _ATTR_STRINGS
        elif s_val:
            atype = _ATTR_STRING
        else:
            atype = _ATTR_INT
    if atype == _ATTR_FLOAT:
        return name, f_val
    if atype == _ATTR_INT:
        return name, i_val
    if atype == _ATTR_STRING:
        return name, s_val.decode("utf-8")
    if atype == _ATTR_TENSOR:
        return name, t_val.array if t_val is not None else None
    if atype == _ATTR_FLOATS:
        return name, tuple(floats)
    if atype == _ATTR_INTS:
        return name, tuple(ints)
    if atype == _ATTR_STRINGS:
        return name, tuple(s.decode("utf-8") for s in strings)
    raise OnnxDecodeError(f"unsupported attribute type {atype} for {name!r}")


def _parse_node(buf: bytes) -> OnnxNode:
    inputs: list[str] = []
    outputs: list[str] = []
    attrs: dict = {}
    op_type = ""
    name = ""
    domain = ""
    for fieldno, _, value in _iter_fields(buf):
        if fieldno == 1:
            inputs.append(value.decode("utf-8"))
        elif fieldno == 2:
            outputs.append(value.decode("utf-8"))
        elif fieldno == 3:
            name = value.decode("utf-8")
        elif fieldno == 4:
            op_type = value.decode("utf-8")
        elif fieldno == 5:
            attr_name, attr_value = _parse_attribute(value)
            attrs[attr_name] = attr_value
        elif fieldno == 7:
            domain = value.decode("utf-8")
    return OnnxNode(
        op_type=op_type, inputs=tuple(inputs), outputs=tuple(outputs),
        attrs=attrs, name=name, domain=domain,
    )


def _parse_dims(buf: bytes) -> tuple:
    dims: list = []
    for fieldno, _, value in _iter_fields(buf):
        if fieldno == 1:  # Dimension
            dim_value = None
            dim_param = None
            for dfield, _, dvalue in _iter_fields(value):
                if dfield == 1:
                    dim_value = _signed64(dvalue)
                elif dfield == 2:
                    dim_param = dvalue.decode("utf-8")
            dims.append(dim_value if dim_value is not None else dim_param)
    return tuple(dims)


def _parse_value_info(buf: bytes) -> OnnxValueInfo:
    name = ""
    elem_type = None
    dims = None
    for fieldno, _, value in _iter_fields(buf):
        if fieldno == 1:
            name = value.decode("utf-8")
        elif fieldno == 2:  # TypeProto
            for tfield, _, tvalue in _iter_fields(value):
                if tfield == 1:  # tensor_type
                    for sfield, _, svalue in _iter_fields(tvalue):
                        if sfield == 1:
                            elem_type = svalue
                        elif sfield == 2:
                            dims = _parse_dims(svalue)
    return OnnxValueInfo(name=name, elem_type=elem_type, dims=dims)


def _parse_graph(buf: bytes) -> OnnxGraph:
    graph = OnnxGraph()
    for fieldno, _, value in _iter_fields(buf):
        if fieldno == 1:
            graph.nodes.append(_parse_node(value))
        elif fieldno == 2:
            graph.name = value.decode("utf-8")
        elif fieldno == 5:
            tensor = _parse_tensor(value)
            graph.initializers[tensor.name] = tensor.array
        elif fieldno == 11:
            graph.inputs.append(_parse_value_info(value))
        elif fieldno == 12:
            graph.outputs.append(_parse_value_info(value))
    return graph


def parse_model(data: bytes) -> OnnxModel:
    """Decode serialized ONNX ModelProto bytes."""
    graph = None
    ir_version = 0
    opset_version = None
    try:
        for fieldno, wiretype, value in _iter_fields(data):
            if fieldno == 1 and wiretype == _WIRE_VARINT:
                ir_version = _signed64(value)
            elif fieldno == 7 and wiretype == _WIRE_LEN:
                graph = _parse_graph(value)
            elif fieldno == 8 and wiretype == _WIRE_LEN:
                domain = ""
                version = None
                for ofield, _, ovalue in _iter_fields(value):
                    if ofield == 1:
                        domain = ovalue.decode("utf-8")
                    elif ofield == 2:
                        version = ovalue
                if domain in ("", "ai.onnx") and version is not None:
                    opset_version = version
    except OnnxDecodeError:
        raise
    except Exception as exc:
        raise OnnxDecodeError(f"not a decodable ONNX model: {exc!r}") from exc
    if graph is None:
        raise OnnxDecodeError("model contains no graph")
    return OnnxModel(graph=graph, ir_version=ir_version, opset_version=opset_version or 13)


def load_model(path: Path | str) -> OnnxModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return parse_model(path.read_bytes())


# ---------------------------------------------------------------------------
# Graph evaluation
# ---------------------------------------------------------------------------

def _pair_pads(pads, spatial: int) -> tuple[tuple[int, int], ...]:
    if pads is None:
        return tuple((0, 0) for _ in range(spatial))
    pads = tuple(int(p) for p in pads)
    begin, end = pads[:spatial], pads[spatial:]
    return tuple(zip(begin, end))


def _conv2d(x, w, b, strides, pads, dilations, group):
    n, c, h, wdt = x.shape
    m, cg, kh, kw = w.shape
    if c != cg * group:
        raise BackendError(f"Conv channel mismatch: input {c}, weights {cg}x{group} groups")
    (pt, pb), (pl, pr) = _pair_pads(pads, 2)
    sh, sw = strides
    dh, dw = dilations
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    eh = (kh - 1) * dh + 1
    ew = (kw - 1) * dw + 1
    oh = (h + pt + pb - eh) // sh + 1
    ow = (wdt + pl + pr - ew) // sw + 1
    if oh < 1 or ow < 1:
        raise BackendError("Conv output would be empty")
    out = np.zeros((n, m, oh, ow), dtype=np.float32)
    mg = m // group
    for g in range(group):
        xg = xp[:, g * cg : (g + 1) * cg]
        wg = w[g * mg : (g + 1) * mg]
        acc = np.zeros((n, mg, oh, ow), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                patch = xg[:, :, i * dh : i * dh + (oh - 1) * sh + 1 : sh,
                           j * dw : j * dw + (ow - 1) * sw + 1 : sw]
                acc += np.einsum("nchw,mc->nmhw", patch, wg[:, :, i, j])
        out[:, g * mg : (g + 1) * mg] = acc
    if b is not None:
        out += b.reshape(1, m, 1, 1)
    return out


def _pool2d(x, kernel, strides, pads, mode, count_include_pad=False):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = strides
    (pt, pb), (pl, pr) = _pair_pads(pads, 2)
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill)
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise BackendError("pool output would be empty")
    pieces = []
    for i in range(kh):
        for j in range(kw):
            pieces.append(xp[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw])
    stack = np.stack(pieces)
    if mode == "max":
        return stack.max(axis=0).astype(x.dtype)
    total = stack.sum(axis=0, dtype=np.float64)
    if count_include_pad:
        divisor = float(kh * kw)
    else:
        ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        counts = []
        for i in range(kh):
            for j in range(kw):
                counts.append(ones[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw])
        divisor = np.stack(counts).sum(axis=0)
    return (total / divisor).astype(x.dtype)


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


class OnnxGraphEvaluator:
    """Evaluates a decoded ONNX graph with numpy.

    Stateless across runs: every call builds a fresh value table, so one
    evaluator may serve concurrent predictions.
    """

    def __init__(self, model: OnnxModel):
        self.model = model
        self.graph = model.graph
        unsupported = sorted(
            {
                n.op_type
                for n in self.graph.nodes
                if n.domain not in ("", "ai.onnx") or n.op_type not in _OPS
            }
        )
        if unsupported:
            raise UnsupportedOperatorError(
                f"unsupported operator(s): {', '.join(unsupported)}"
            )
        self.input_infos = [
            vi for vi in self.graph.inputs if vi.name not in self.graph.initializers
        ]
        self.output_infos = list(self.graph.outputs)

    def run(self, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        values: dict[str, np.ndarray] = dict(self.graph.initializers)
        values.update(feeds)
        values[""] = None
        for node in self.graph.nodes:
            args = []
            for name in node.inputs:
                if name not in values:
                    raise BackendError(f"node {node.op_type} input {name!r} is not available")
                args.append(values[name])
            results = _OPS[node.op_type](self, node, args)
            for name, result in zip(node.outputs, results):
                if name:
                    values[name] = result
        missing = [vi.name for vi in self.output_infos if vi.name not in values]
        if missing:
            raise BackendError(f"graph outputs never produced: {missing}")
        return {vi.name: values[vi.name] for vi in self.output_infos}


def _axes_arg(node, args, index, default=None):
    # axes moved from attribute to input over opset revisions
    if len(args) > index and args[index] is not None:
        return tuple(int(a) for a in np.asarray(args[index]).reshape(-1))
    axes = node.attrs.get("axes")
    if axes is None:
        return default
    return tuple(int(a) for a in axes)


def _op_binary(fn):
    def apply(ev, node, args):
        return [fn(args[0], args[1])]

    return apply


def _op_conv(ev, node, args):
    x, w = args[0], args[1]
    b = args[2] if len(args) > 2 else None
    if x.ndim != 4:
        raise BackendError(f"Conv supports 2D convolutions only, got input rank {x.ndim}")
    auto_pad = node.attrs.get("auto_pad", "NOTSET")
    if auto_pad not in ("NOTSET", ""):
        raise UnsupportedOperatorError(f"Conv auto_pad={auto_pad!r} is not supported")
    kh, kw = node.attrs.get("kernel_shape", w.shape[2:])
    strides = tuple(node.attrs.get("strides", (1, 1)))
    dilations = tuple(node.attrs.get("dilations", (1, 1)))
    pads = node.attrs.get("pads")
    group = int(node.attrs.get("group", 1))
    if (kh, kw) != w.shape[2:]:
        raise BackendError("Conv kernel_shape disagrees with weight tensor")
    return [_conv2d(x, w, b, strides, pads, dilations, group)]


def _op_pool(mode):
    def apply(ev, node, args):
        x = args[0]
        if x.ndim != 4:
            raise BackendError(f"{mode} pooling supports 4D inputs only")
        auto_pad = node.attrs.get("auto_pad", "NOTSET")
        if auto_pad not in ("NOTSET", ""):
            raise UnsupportedOperatorError(f"pool auto_pad={auto_pad!r} is not supported")
        if int(node.attrs.get("ceil_mode", 0)) != 0:
            raise UnsupportedOperatorError("pool ceil_mode=1 is not supported")
        kernel = tuple(node.attrs["kernel_shape"])
        strides = tuple(node.attrs.get("strides", (1,) * len(kernel)))
        pads = node.attrs.get("pads")
        include_pad = bool(node.attrs.get("count_include_pad", 0))
        return [_pool2d(x, kernel, strides, pads, mode, include_pad)]

    return apply


def _op_gemm(ev, node, args):
    a, b = args[0], args[1]
    c = args[2] if len(args) > 2 and args[2] is not None else None
    alpha = node.attrs.get("alpha", 1.0)
    beta = node.attrs.get("beta", 1.0)
    if node.attrs.get("transA", 0):
        a = a.T
    if node.attrs.get("transB", 0):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return [out.astype(a.dtype)]


def _op_reduce_mean(ev, node, args):
    x = args[0]
    axes = _axes_arg(node, args, 1)
    keepdims = bool(node.attrs.get("keepdims", 1))
    if axes is None:
        if node.attrs.get("noop_with_empty_axes", 0) and len(args) > 1:
            return [x]
        axes_t = None
    else:
        axes_t = tuple(a % x.ndim for a in axes)
    return [x.mean(axis=axes_t, keepdims=keepdims, dtype=x.dtype)]


def _op_reshape(ev, node, args):
    x, shape = args[0], np.asarray(args[1]).reshape(-1).astype(int)
    allowzero = int(node.attrs.get("allowzero", 0))
    target = []
    for i, dim in enumerate(shape):
        if dim == 0 and not allowzero:
            target.append(x.shape[i])
        else:
            target.append(int(dim))
    return [x.reshape(target)]


def _op_flatten(ev, node, args):
    x = args[0]
    axis = int(node.attrs.get("axis", 1)) % (x.ndim + 1)
    lead = int(np.prod(x.shape[:axis])) if axis else 1
    return [x.reshape(lead, -1)]


def _op_squeeze(ev, node, args):
    x = args[0]
    axes = _axes_arg(node, args, 1)
    if axes is None:
        return [np.squeeze(x)]
    return [np.squeeze(x, axis=tuple(a % x.ndim for a in axes))]


def _op_unsqueeze(ev, node, args):
    x = args[0]
    axes = _axes_arg(node, args, 1)
    if axes is None:
        raise BackendError("Unsqueeze requires axes")
    out = x
    for a in sorted(a % (x.ndim + len(axes)) for a in axes):
        out = np.expand_dims(out, a)
    return [out]


def _op_softmax(ev, node, args):
    x = args[0]
    if ev.model.opset_version >= 13:
        axis = int(node.attrs.get("axis", -1))
        return [_softmax(x, axis)]
    # Pre-13 semantics: flatten to 2D at axis, softmax rows, restore shape.
    axis = int(node.attrs.get("axis", 1)) % x.ndim
    lead = int(np.prod(x.shape[:axis])) if axis else 1
    flat = x.reshape(lead, -1)
    return [_softmax(flat, 1).reshape(x.shape)]


def _op_batchnorm(ev, node, args):
    x, scale, bias, mean, var = args[:5]
    eps = node.attrs.get("epsilon", 1e-5)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    out = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return [(out * scale.reshape(shape) + bias.reshape(shape)).astype(x.dtype)]


def _op_clip(ev, node, args):
    x = args[0]
    lo = args[1] if len(args) > 1 and args[1] is not None else node.attrs.get("min")
    hi = args[2] if len(args) > 2 and args[2] is not None else node.attrs.get("max")
    if lo is None and hi is None:
        return [x]
    return [np.clip(x, lo, hi)]


def _op_cast(ev, node, args):
    to = int(node.attrs["to"])
    dtype = _TENSOR_DTYPES.get(to)
    if dtype is None:
        raise UnsupportedOperatorError(f"Cast to data type {to} is not supported")
    return [args[0].astype(dtype)]


def _op_constant(ev, node, args):
    for key in ("value", "value_float", "value_int", "value_floats", "value_ints"):
        if key in node.attrs:
            value = node.attrs[key]
            if key == "value":
                return [np.asarray(value)]
            if key in ("value_float", "value_floats"):
                return [np.asarray(value, dtype=np.float32)]
            return [np.asarray(value, dtype=np.int64)]
    raise BackendError("Constant node carries no value")


_OPS = {
    "Add": _op_binary(lambda a, b: a + b),
    "Sub": _op_binary(lambda a, b: a - b),
    "Mul": _op_binary(lambda a, b: a * b),
    "Div": _op_binary(lambda a, b: a / b),
    "MatMul": _op_binary(lambda a, b: (a @ b).astype(a.dtype)),
    "Relu": lambda ev, node, args: [np.maximum(args[0], 0)],
    "Sigmoid": lambda ev, node, args: [_stable_sigmoid(args[0])],
    "Softmax": _op_softmax,
    "Conv": _op_conv,
    "MaxPool": _op_pool("max"),
    "AveragePool": _op_pool("avg"),
    "GlobalAveragePool": lambda ev, node, args: [
        args[0].mean(axis=tuple(range(2, args[0].ndim)), keepdims=True, dtype=args[0].dtype)
    ],
    "ReduceMean": _op_reduce_mean,
    "Gemm": _op_gemm,
    "Flatten": _op_flatten,
    "Reshape": _op_reshape,
    "Transpose": lambda ev, node, args: [
        np.transpose(args[0], node.attrs.get("perm") or None)
    ],
    "Squeeze": _op_squeeze,
    "Unsqueeze": _op_unsqueeze,
    "Concat": lambda ev, node, args: [
        np.concatenate(args, axis=int(node.attrs["axis"]))
    ],
    "Identity": lambda ev, node, args: [args[0]],
    "Constant": _op_constant,
    "BatchNormalization": _op_batchnorm,
    "Clip": _op_clip,
    "Cast": _op_cast,
}


# ---------------------------------------------------------------------------
# Backend wrappers honoring the wire contract
# ---------------------------------------------------------------------------

_CONTRACT_DIMS = (1, 512, 512, 3)


def _validate_contract(evaluator: OnnxGraphEvaluator) -> int:
    if len(evaluator.input_infos) != 1:
        raise ModelContractError(
            f"model must have exactly one input, found {len(evaluator.input_infos)}"
        )
    vi = evaluator.input_infos[0]
    if vi.elem_type is not None and vi.elem_type != _FLOAT:
        raise ModelContractError(f"model input must be float32, got data type {vi.elem_type}")
    if vi.dims is None or len(vi.dims) != 4:
        raise ModelContractError(f"model input must be rank-4 1x512x512x3, got dims {vi.dims}")
    for got, want in zip(vi.dims, _CONTRACT_DIMS):
        if isinstance(got, int) and got != want:
            raise ModelContractError(f"model input dims {vi.dims} violate 1x512x512x3 contract")
    if len(evaluator.output_infos) != 1:
        raise ModelContractError(
            f"model must have exactly one output, found {len(evaluator.output_infos)}"
        )
    out = evaluator.output_infos[0]
    if out.dims is None:
        raise ModelContractError("model output carries no shape metadata")
    static = [d for d in out.dims if isinstance(d, int)]
    if len(static) != len(out.dims):
        raise ModelContractError(f"model output shape must be static, got dims {out.dims}")
    size = int(np.prod(static)) if static else 1
    if size not in (1, 3):
        raise ModelContractError(
            f"model output must have size 1 (Stage-1) or 3 (Stage-2), got dims {out.dims}"
        )
    return size


class _OnnxBackendMixin:
    def __init__(self, evaluator: OnnxGraphEvaluator, source: str = ""):
        self.evaluator = evaluator
        self.source = source
        self.input_name = evaluator.input_infos[0].name
        self.output_name = evaluator.output_infos[0].name

    def _run(self, tensor) -> np.ndarray:
        pixels = tensor.pixels if hasattr(tensor, "pixels") else tensor
        pixels = check_slice_tensor(pixels)
        feed = np.ascontiguousarray(pixels, dtype=np.float32)[np.newaxis]
        try:
            outputs = self.evaluator.run({self.input_name: feed})
        except (UnsupportedOperatorError, BackendError):
            raise
        except Exception as exc:
            raise BackendError(f"model graph evaluation failed: {exc!r}") from exc
        return np.asarray(outputs[self.output_name], dtype=np.float64).reshape(-1)


class OnnxStage1Backend(_OnnxBackendMixin, Stage1Backend):
    def predict(self, tensor) -> float:
        out = self._run(tensor)
        if out.size != 1:
            raise BackendError(f"Stage-1 graph produced {out.size} values")
        p = float(out[0])
        if not 0.0 <= p <= 1.0 or not np.isfinite(p):
            raise BackendError(f"Stage-1 graph produced probability outside [0, 1]: {p}")
        return p


class OnnxStage2Backend(_OnnxBackendMixin, Stage2Backend):
    def predict(self, tensor) -> np.ndarray:
        out = self._run(tensor)
        if out.size != 3:
            raise BackendError(f"Stage-2 graph produced {out.size} values")
        from .validation import check_probabilities

        return check_probabilities(out)


def load_onnx_backend(path, n_outputs: int | None = None):
    """Load an ONNX file as a Stage-1 or Stage-2 backend.

    The stage is inferred from the declared output size; pass ``n_outputs``
    (1 or 3) to insist on one, e.g. when wiring CLI flags.
    """
    model = load_model(path)
    evaluator = OnnxGraphEvaluator(model)
    size = _validate_contract(evaluator)
    if n_outputs is not None and size != n_outputs:
        stage = {1: "Stage-1", 3: "Stage-2"}[n_outputs]
        raise ModelContractError(
            f"{path}: expected a {stage} model with output size {n_outputs}, "
            f"but the graph declares output size {size}"
        )
    backend_cls = OnnxStage1Backend if size == 1 else OnnxStage2Backend
    return backend_cls(evaluator, source=str(path))
