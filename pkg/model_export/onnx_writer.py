"""Hand-rolled ONNX protobuf serializer for feed-forward CNN graphs.

Emits the subset of the wire format the downstream runtime consumes:
float32 initializers stored as raw little-endian bytes, node attributes
of int, float, string, and int-list kinds, and value-info records that
carry only tensor names.  Serialization is deterministic, so identical
graphs produce byte-identical files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NodeSpec", "serialize_model", "write_model"]

_WIRE_VARINT = 0
_WIRE_FIXED32 = 5

# AttributeProto.AttributeType enum values.
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_INTS = 7

# TensorProto.DataType for float32.
_DTYPE_FLOAT = 1


def _varint(value: int) -> bytes:
    if value < 0:
        value &= (1 << 64) - 1
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field_number: int, wire_type: int) -> bytes:
    return _varint((field_number << 3) | wire_type)


def _len_field(field_number: int, payload: bytes) -> bytes:
    return _tag(field_number, 2) + _varint(len(payload)) + payload


def _str_field(field_number: int, text: str) -> bytes:
    return _len_field(field_number, text.encode("utf-8"))


def _varint_field(field_number: int, value: int) -> bytes:
    return _tag(field_number, _WIRE_VARINT) + _varint(value)


def _attribute(name: str, value) -> bytes:
    payload = _str_field(1, name)
    if isinstance(value, bool):
        raise TypeError(f"attribute {name!r}: pass ints, not bools")
    if isinstance(value, int):
        payload += _varint_field(3, value) + _varint_field(20, _ATTR_INT)
    elif isinstance(value, float):
        payload += _tag(2, _WIRE_FIXED32) + struct.pack("<f", value)
        payload += _varint_field(20, _ATTR_FLOAT)
    elif isinstance(value, str):
        payload += _str_field(4, value) + _varint_field(20, _ATTR_STRING)
    elif isinstance(value, (list, tuple)):
        packed = b"".join(_varint(int(v)) for v in value)
        payload += _len_field(8, packed) + _varint_field(20, _ATTR_INTS)
    else:
        raise TypeError(f"attribute {name!r}: unsupported value {value!r}")
    return payload


def _tensor(name: str, array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    payload = b"".join(_varint_field(1, int(d)) for d in arr.shape)
    payload += _varint_field(2, _DTYPE_FLOAT)
    payload += _str_field(8, name)
    payload += _len_field(9, arr.tobytes())
    return payload


@dataclass(frozen=True)
class NodeSpec:
    """One operator: op type, tensor names, and scalar/list attributes."""

    op_type: str
    inputs: tuple
    outputs: tuple
    name: str = ""
    attrs: dict = field(default_factory=dict)


def _node(spec: NodeSpec) -> bytes:
    payload = b"".join(_str_field(1, t) for t in spec.inputs)
    payload += b"".join(_str_field(2, t) for t in spec.outputs)
    if spec.name:
        payload += _str_field(3, spec.name)
    payload += _str_field(4, spec.op_type)
    payload += b"".join(
        _len_field(5, _attribute(key, value)) for key, value in spec.attrs.items()
    )
    return payload


def serialize_model(
    nodes,
    initializers,
    input_name,
    output_names,
    *,
    graph_name="export",
    opset=13,
    ir_version=8,
) -> bytes:
    """Serialize a graph to ONNX bytes.

    Parameters
    ----------
    nodes : sequence of NodeSpec
        Operator list in topological order.
    initializers : sequence of (str, ndarray)
        Weight tensors, stored as float32 raw data in the given order.
    input_name : str
        Name of the single graph input.
    output_names : sequence of str
        Graph outputs, one per tap, shallow to deep.

    Returns
    -------
    bytes
        The serialized model, identical across calls with equal inputs.
    """
    graph = b"".join(_len_field(1, _node(spec)) for spec in nodes)
    graph += _str_field(2, graph_name)
    graph += b"".join(
        _len_field(5, _tensor(name, arr)) for name, arr in initializers
    )
    graph += _len_field(11, _str_field(1, input_name))
    graph += b"".join(_len_field(12, _str_field(1, nm)) for nm in output_names)
    opset_msg = _varint_field(2, opset)
    return _varint_field(1, ir_version) + _len_field(7, graph) + _len_field(8, opset_msg)


def write_model(path, nodes, initializers, input_name, output_names, **kwargs):
    """Serialize and write a model file; see :func:`serialize_model`."""
    blob = serialize_model(nodes, initializers, input_name, output_names, **kwargs)
    with open(path, "wb") as handle:
        handle.write(blob)
