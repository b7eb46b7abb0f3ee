"""Minimal ONNX wire-format loader and numpy executor.

Parses the protobuf encoding directly (varints plus length-delimited
fields), so loading a model file needs no external runtime, and executes
the small operator set that feed-forward CNN backbones use.  Execution is
plain single-threaded numpy: identical inputs give bitwise-identical
outputs, and the arithmetic dtype follows the input tensor (feed float64
to run a float32 model at double precision for verification).

Supported operators: Conv (grouped, strided, padded), Relu, MaxPool,
AveragePool, GlobalAveragePool, BatchNormalization, Concat, Add, Mul,
HardSigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ModelLoadError

__all__ = ["OnnxModel", "load_model", "SUPPORTED_OPS"]

SUPPORTED_OPS = frozenset(
    [
        "Conv",
        "Relu",
        "MaxPool",
        "AveragePool",
        "GlobalAveragePool",
        "BatchNormalization",
        "Concat",
        "Add",
        "Mul",
        "HardSigmoid",
    ]
)

# TensorProto.DataType values for the payloads we accept.
_DTYPE_FLOAT = 1
_DTYPE_INT64 = 7
_DTYPE_DOUBLE = 11

# AttributeProto.AttributeType values.
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_TENSOR = 4
_ATTR_FLOATS = 6
_ATTR_INTS = 7


def _read_varint(buf: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise ModelLoadError("truncated varint in model file")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 70:
            raise ModelLoadError("malformed varint in model file")
    return result, pos


def _signed64(value: int) -> int:
    value &= (1 << 64) - 1
    return value - (1 << 64) if value >= (1 << 63) else value


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, payload) triples from a message.

    Payload is an int for varints and 32/64-bit fields, bytes for
    length-delimited fields.
    """
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        field, wire = key >> 3, key & 0x7
        if wire == 0:
            value, pos = _read_varint(buf, pos)
        elif wire == 1:
            if pos + 8 > len(buf):
                raise ModelLoadError("truncated 64-bit field in model file")
            value = int.from_bytes(buf[pos : pos + 8], "little")
            pos += 8
        elif wire == 2:
            length, pos = _read_varint(buf, pos)
            if pos + length > len(buf):
                raise ModelLoadError("truncated length-delimited field")
            value = buf[pos : pos + length]
            pos += length
        elif wire == 5:
            if pos + 4 > len(buf):
                raise ModelLoadError("truncated 32-bit field in model file")
            value = int.from_bytes(buf[pos : pos + 4], "little")
            pos += 4
        else:
            raise ModelLoadError(f"unsupported protobuf wire type {wire}")
        yield field, wire, value


def _packed_varints(payload) -> list:
    if isinstance(payload, int):
        return [_signed64(payload)]
    out = []
    pos = 0
    while pos < len(payload):
        value, pos = _read_varint(payload, pos)
        out.append(_signed64(value))
    return out


def _packed_floats(payload, wire: int) -> list:
    if wire == 5:
        return [struct.unpack("<f", payload.to_bytes(4, "little"))[0]]
    count = len(payload) // 4
    return list(struct.unpack(f"<{count}f", payload[: count * 4]))


def _parse_tensor(buf: bytes):
    dims = []
    data_type = _DTYPE_FLOAT
    name = ""
    raw = None
    float_data = []
    int64_data = []
    double_data = []
    for field, wire, value in _iter_fields(buf):
        if field == 1:
            dims.extend(_packed_varints(value))
        elif field == 2:
            data_type = value
        elif field == 4:
            float_data.extend(_packed_floats(value, wire))
        elif field == 7:
            int64_data.extend(_packed_varints(value))
        elif field == 8:
            name = value.decode("utf-8")
        elif field == 9:
            raw = value
        elif field == 10:
            if wire == 1:
                double_data.append(
                    struct.unpack("<d", value.to_bytes(8, "little"))[0]
                )
            else:
                count = len(value) // 8
                double_data.extend(struct.unpack(f"<{count}d", value))
    shape = tuple(int(d) for d in dims)
    if data_type == _DTYPE_FLOAT:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f4")
        else:
            arr = np.asarray(float_data, dtype=np.float32)
    elif data_type == _DTYPE_INT64:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<i8")
        else:
            arr = np.asarray(int64_data, dtype=np.int64)
    elif data_type == _DTYPE_DOUBLE:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f8")
        else:
            arr = np.asarray(double_data, dtype=np.float64)
    else:
        raise ModelLoadError(f"unsupported tensor data type {data_type}")
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise ModelLoadError(
            f"tensor {name!r}: payload holds {arr.size} values, dims say {expected}"
        )
    return name, arr.reshape(shape).copy()


def _parse_attribute(buf: bytes):
    name = ""
    attr_type = None
    f_val = None
    i_val = None
    s_val = None
    t_val = None
    floats = []
    ints = []
    for field, wire, value in _iter_fields(buf):
        if field == 1:
            name = value.decode("utf-8")
        elif field == 2:
            f_val = struct.unpack("<f", value.to_bytes(4, "little"))[0]
        elif field == 3:
            i_val = _signed64(value)
        elif field == 4:
            s_val = value.decode("utf-8")
        elif field == 5:
            t_val = _parse_tensor(value)[1]
        elif field == 7:
            floats.extend(_packed_floats(value, wire))
        elif field == 8:
            ints.extend(_packed_varints(value))
        elif field == 20:
            attr_type = value
    if attr_type == _ATTR_FLOAT:
        return name, float(f_val if f_val is not None else 0.0)
    if attr_type == _ATTR_INT:
        return name, int(i_val if i_val is not None else 0)
    if attr_type == _ATTR_STRING:
        return name, s_val if s_val is not None else ""
    if attr_type == _ATTR_TENSOR:
        return name, t_val
    if attr_type == _ATTR_FLOATS:
        return name, [float(v) for v in floats]
    if attr_type == _ATTR_INTS:
        return name, [int(v) for v in ints]
    # Tolerate writers that omit the type tag by inferring from payload.
    if ints:
        return name, [int(v) for v in ints]
    if floats:
        return name, [float(v) for v in floats]
    if i_val is not None:
        return name, int(i_val)
    if f_val is not None:
        return name, float(f_val)
    if s_val is not None:
        return name, s_val
    return name, t_val


@dataclass(frozen=True)
class _Node:
    op_type: str
    name: str
    inputs: tuple
    outputs: tuple
    attrs: dict


def _parse_node(buf: bytes) -> _Node:
    inputs = []
    outputs = []
    name = ""
    op_type = ""
    attrs = {}
    for field, wire, value in _iter_fields(buf):
        if field == 1:
            inputs.append(value.decode("utf-8"))
        elif field == 2:
            outputs.append(value.decode("utf-8"))
        elif field == 3:
            name = value.decode("utf-8")
        elif field == 4:
            op_type = value.decode("utf-8")
        elif field == 5:
            key, val = _parse_attribute(value)
            attrs[key] = val
    return _Node(
        op_type=op_type,
        name=name,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        attrs=attrs,
    )


def _parse_value_info_name(buf: bytes) -> str:
    for field, wire, value in _iter_fields(buf):
        if field == 1:
            return value.decode("utf-8")
    return ""


def _parse_graph(buf: bytes):
    nodes = []
    initializers = {}
    inputs = []
    outputs = []
    for field, wire, value in _iter_fields(buf):
        if field == 1:
            nodes.append(_parse_node(value))
        elif field == 5:
            name, arr = _parse_tensor(value)
            initializers[name] = arr
        elif field == 11:
            inputs.append(_parse_value_info_name(value))
        elif field == 12:
            outputs.append(_parse_value_info_name(value))
    return nodes, initializers, inputs, outputs


class OnnxModel:
    """A parsed model: node list, weights, and a numpy executor."""

    def __init__(self, nodes, initializers, input_names, output_names, opset):
        self.nodes = nodes
        self.initializers = initializers
        self.input_names = input_names
        self.output_names = output_names
        self.opset = opset
        self._validate()

    def _validate(self):
        if len(self.input_names) != 1:
            raise ModelLoadError(
                f"expected exactly one graph input, found {self.input_names}"
            )
        unsupported = sorted(
            {n.op_type for n in self.nodes if n.op_type not in SUPPORTED_OPS}
        )
        if unsupported:
            raise ModelLoadError(f"unsupported operators: {unsupported}")
        known = set(self.initializers) | set(self.input_names)
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor and tensor not in known:
                    raise ModelLoadError(
                        f"node {node.name or node.op_type!r} consumes "
                        f"{tensor!r} before it is produced"
                    )
            known.update(node.outputs)
        missing = [o for o in self.output_names if o not in known]
        if missing:
            raise ModelLoadError(f"graph outputs never produced: {missing}")

    def run(self, tensor, output_names=None):
        """Execute the graph on one input tensor.

        Computation runs in ``tensor``'s floating dtype; weights are cast
        to match.  Returns activations for ``output_names`` (default: the
        graph's declared outputs) in the requested order.
        """
        requested = list(output_names) if output_names is not None else list(
            self.output_names
        )
        unknown = [name for name in requested if name not in self._producible()]
        if unknown:
            raise ModelLoadError(f"unknown output tensors requested: {unknown}")
        x = np.asarray(tensor)
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(np.float32)
        values = {self.input_names[0]: x}
        pending = set(requested)
        pending.discard(self.input_names[0])
        for node in self.nodes:
            if not pending:
                break
            args = [
                self._fetch(values, name, x.dtype) if name else None
                for name in node.inputs
            ]
            results = _OP_TABLE[node.op_type](node, args)
            for out_name, result in zip(node.outputs, results):
                if out_name:
                    values[out_name] = result
                    pending.discard(out_name)
        still = [name for name in requested if name not in values]
        if still:
            raise ModelLoadError(f"graph did not produce outputs: {still}")
        return [values[name] for name in requested]

    def _producible(self):
        names = set(self.input_names) | set(self.initializers)
        for node in self.nodes:
            names.update(node.outputs)
        return names

    def _fetch(self, values, name, dtype):
        if name in values:
            return values[name]
        arr = self.initializers[name]
        if arr.dtype in (np.float32, np.float64) and arr.dtype != dtype:
            return arr.astype(dtype)
        return arr


def load_model(path) -> OnnxModel:
    """Parse an ONNX file into an executable OnnxModel.

    Raises ModelLoadError for unreadable files, malformed protobuf, graphs
    with unsupported operators, or dangling tensor references.
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    graph_buf = None
    opset = 0
    try:
        for field, wire, value in _iter_fields(blob):
            if field == 7 and wire == 2:
                graph_buf = value
            elif field == 8 and wire == 2:
                domain = ""
                version = 0
                for sub_field, _, sub_value in _iter_fields(value):
                    if sub_field == 1:
                        domain = sub_value.decode("utf-8")
                    elif sub_field == 2:
                        version = sub_value
                if domain == "":
                    opset = max(opset, version)
        if graph_buf is None:
            raise ModelLoadError(f"{path} contains no graph")
        nodes, initializers, inputs, outputs = _parse_graph(graph_buf)
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"{path} is not a readable model file: {exc}") from exc
    input_names = [n for n in inputs if n not in initializers]
    return OnnxModel(
        nodes=nodes,
        initializers=initializers,
        input_names=input_names,
        output_names=outputs,
        opset=opset,
    )


def _pair(attrs, key, default):
    value = attrs.get(key, default)
    if isinstance(value, int):
        value = [value, value]
    return [int(v) for v in value]


def _pads4(attrs):
    pads = attrs.get("pads", [0, 0, 0, 0])
    if len(pads) == 2:
        pads = [pads[0], pads[1], pads[0], pads[1]]
    if len(pads) != 4:
        raise ModelLoadError(f"unsupported pads {pads}")
    return [int(p) for p in pads]


def _patches(xp, kh, kw, sh, sw, oh, ow):
    """View of all (kh, kw) windows: shape (N, C, KH, KW, OH, OW)."""
    n, c = xp.shape[:2]
    sn, sc, srow, scol = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, srow, scol, srow * sh, scol * sw),
        writeable=False,
    )


def _op_conv(node, args):
    x, w = args[0], args[1]
    bias = args[2] if len(args) > 2 else None
    attrs = node.attrs
    if attrs.get("auto_pad", "NOTSET") not in ("", "NOTSET"):
        raise ModelLoadError("Conv auto_pad is not supported; use explicit pads")
    dil = _pair(attrs, "dilations", [1, 1])
    if dil != [1, 1]:
        raise ModelLoadError("Conv dilations other than 1 are not supported")
    sh, sw = _pair(attrs, "strides", [1, 1])
    pt, pl, pb, pr = _pads4(attrs)
    group = int(attrs.get("group", 1))
    n, ic, h, wdt = x.shape
    oc, icg, kh, kw = w.shape
    if ic != icg * group:
        raise ModelLoadError(
            f"Conv channel mismatch: input {ic}, weight {icg} x group {group}"
        )
    oh = (h + pt + pb - kh) // sh + 1
    ow = (wdt + pl + pr - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    patches = _patches(xp, kh, kw, sh, sw, oh, ow)
    if group == ic and icg == 1:
        # Depthwise: one filter per channel, no cross-channel reduction.
        out = np.einsum("ncklhw,ckl->nchw", patches, w[:, 0], optimize=True)
    else:
        out = np.empty((n, oc, oh, ow), dtype=x.dtype)
        ocg = oc // group
        w2 = w.reshape(oc, icg * kh * kw)
        for g in range(group):
            cols = np.ascontiguousarray(
                patches[:, g * icg : (g + 1) * icg]
            ).reshape(n, icg * kh * kw, oh * ow)
            for b in range(n):
                out[b, g * ocg : (g + 1) * ocg] = (
                    w2[g * ocg : (g + 1) * ocg] @ cols[b]
                ).reshape(ocg, oh, ow)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return [np.ascontiguousarray(out)]


def _pool_geometry(x, attrs):
    kh, kw = _pair(attrs, "kernel_shape", None)
    sh, sw = _pair(attrs, "strides", [1, 1])
    pt, pl, pb, pr = _pads4(attrs)
    ceil_mode = int(attrs.get("ceil_mode", 0))
    h, w = x.shape[2], x.shape[3]
    if ceil_mode:
        oh = -((h + pt + pb - kh) // -sh) + 1
        ow = -((w + pl + pr - kw) // -sw) + 1
        # A window must start inside the input or its left padding.
        if (oh - 1) * sh >= h + pt:
            oh -= 1
        if (ow - 1) * sw >= w + pl:
            ow -= 1
    else:
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
    return kh, kw, sh, sw, pt, pl, pb, pr, oh, ow


def _op_max_pool(node, args):
    x = args[0]
    if _pair(node.attrs, "dilations", [1, 1]) != [1, 1]:
        raise ModelLoadError("MaxPool dilations other than 1 are not supported")
    kh, kw, sh, sw, pt, pl, pb, pr, oh, ow = _pool_geometry(x, node.attrs)
    # Extra right/bottom padding so ceil-mode windows stay in bounds.
    need_h = (oh - 1) * sh + kh - (x.shape[2] + pt)
    need_w = (ow - 1) * sw + kw - (x.shape[3] + pl)
    pb = max(pb, need_h, 0)
    pr = max(pr, need_w, 0)
    fill = np.array(-np.inf, dtype=x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill)
    patches = _patches(xp, kh, kw, sh, sw, oh, ow)
    return [np.ascontiguousarray(patches.max(axis=(2, 3)))]


def _op_average_pool(node, args):
    x = args[0]
    kh, kw, sh, sw, pt, pl, pb, pr, oh, ow = _pool_geometry(x, node.attrs)
    include_pad = int(node.attrs.get("count_include_pad", 0))
    need_h = (oh - 1) * sh + kh - (x.shape[2] + pt)
    need_w = (ow - 1) * sw + kw - (x.shape[3] + pl)
    pad_b = max(pb, need_h, 0)
    pad_r = max(pr, need_w, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pad_b), (pl, pad_r)))
    patches = _patches(xp, kh, kw, sh, sw, oh, ow)
    sums = patches.sum(axis=(2, 3), dtype=x.dtype)
    if include_pad:
        # Cells the attribute-declared padding covers count; implicit
        # ceil-mode overhang beyond declared padding never does.
        declared_h = min(pad_b, pb)
        declared_w = min(pad_r, pr)
        limit_h = x.shape[2] + pt + declared_h
        limit_w = x.shape[3] + pl + declared_w
        rows = np.arange(oh) * sh
        cols = np.arange(ow) * sw
        count_h = np.minimum(rows + kh, limit_h) - rows
        count_w = np.minimum(cols + kw, limit_w) - cols
    else:
        rows = np.arange(oh) * sh
        cols = np.arange(ow) * sw
        count_h = np.minimum(rows + kh, x.shape[2] + pt) - np.maximum(rows, pt)
        count_w = np.minimum(cols + kw, x.shape[3] + pl) - np.maximum(cols, pl)
    counts = (count_h[:, None] * count_w[None, :]).astype(x.dtype)
    return [np.ascontiguousarray(sums / counts)]


def _op_global_average_pool(node, args):
    x = args[0]
    return [x.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)]


def _op_batch_normalization(node, args):
    x, scale, bias, mean, var = args[:5]
    eps = node.attrs.get("epsilon", 1e-5)
    denom = np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    gain = (scale / denom).reshape(1, -1, 1, 1)
    shift = (bias - mean * scale / denom).reshape(1, -1, 1, 1)
    return [x * gain + shift]


def _op_relu(node, args):
    return [np.maximum(args[0], 0)]


def _op_concat(node, args):
    axis = int(node.attrs.get("axis", 1))
    return [np.concatenate(args, axis=axis)]


def _op_add(node, args):
    return [args[0] + args[1]]


def _op_mul(node, args):
    return [args[0] * args[1]]


def _op_hard_sigmoid(node, args):
    x = args[0]
    alpha = np.asarray(node.attrs.get("alpha", 0.2), dtype=x.dtype)
    beta = np.asarray(node.attrs.get("beta", 0.5), dtype=x.dtype)
    return [np.clip(alpha * x + beta, 0, 1)]


_OP_TABLE = {
    "Conv": _op_conv,
    "Relu": _op_relu,
    "MaxPool": _op_max_pool,
    "AveragePool": _op_average_pool,
    "GlobalAveragePool": _op_global_average_pool,
    "BatchNormalization": _op_batch_normalization,
    "Concat": _op_concat,
    "Add": _op_add,
    "Mul": _op_mul,
    "HardSigmoid": _op_hard_sigmoid,
}
