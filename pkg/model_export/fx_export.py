"""Graph capture and conversion to the interchange operator set.

``create_feature_extractor`` prunes everything past the requested taps and
yields an fx graph whose nodes are primitive torch modules, a few tensor
functions (add, mul, cat, relu, hardswish), or torchvision composites
(Conv2dNormActivation, SqueezeExcitation) that this module expands into
primitives.  Hardswish lowers to HardSigmoid followed by Mul because the
interchange set has no fused form.  Tensors that realize a requested tap
are named by the tap string itself, so the exported graph's outputs match
the manifest's tap names exactly.
"""

from __future__ import annotations

import operator

import torch
from torch import nn
import torch.nn.functional as F
from torchvision.models.feature_extraction import create_feature_extractor
from torchvision.ops.misc import SqueezeExcitation

from .onnx_writer import NodeSpec

__all__ = [
    "INPUT_NAME",
    "UnknownTap",
    "UnsupportedGraphOp",
    "build_extractor",
    "export_graph",
]

INPUT_NAME = "input"

_HARD_SIGMOID_ATTRS = {"alpha": 1.0 / 6.0, "beta": 0.5}


class UnknownTap(ValueError):
    """A requested tap names no node in the backbone's graph."""


class UnsupportedGraphOp(ValueError):
    """The traced graph contains an operation outside the interchange set."""


def build_extractor(model, taps):
    """Trace ``model`` in eval mode and truncate it to the requested taps."""
    try:
        extractor = create_feature_extractor(
            model.eval(), return_nodes={tap: tap for tap in taps}
        )
    except ValueError as exc:
        raise UnknownTap(str(exc)) from exc
    return extractor.eval()


def _pair(value):
    if isinstance(value, int):
        return [value, value]
    return [int(v) for v in value]


class _GraphExporter:
    """Walk an fx graph and emit interchange nodes plus weight tensors."""

    def __init__(self, gm):
        self.gm = gm
        self.modules = dict(gm.named_modules())
        self.nodes = []
        self.inits = []
        self._init_names = set()
        self.env = {}
        self._forced = {}
        self._used = {INPUT_NAME}

    def _fresh(self, base):
        name = base
        suffix = 1
        while name in self._used:
            suffix += 1
            name = f"{base}_{suffix}"
        self._used.add(name)
        return name

    def _result_name(self, node):
        forced = self._forced.get(node)
        if forced is not None:
            self._used.add(forced)
            return forced
        return self._fresh(node.name)

    def _tensor_name(self, arg):
        if not isinstance(arg, torch.fx.Node):
            raise UnsupportedGraphOp(
                f"non-tensor operand {arg!r}; only tensor-to-tensor ops export"
            )
        return self.env[arg]

    def emit(self, op_type, inputs, output, attrs=None):
        self.nodes.append(
            NodeSpec(
                op_type=op_type,
                inputs=tuple(inputs),
                outputs=(output,),
                name=output,
                attrs=dict(attrs or {}),
            )
        )
        return output

    def add_init(self, name, tensor):
        # Shared modules appear as repeated call_module nodes; store their
        # parameters once.
        if name not in self._init_names:
            self._init_names.add(name)
            self.inits.append((name, tensor.detach().cpu().numpy()))
        return name

    def run(self, taps):
        output_node = next(n for n in self.gm.graph.nodes if n.op == "output")
        mapping = dict(output_node.args[0])
        for key, node in mapping.items():
            self._forced[node] = key
        for node in self.gm.graph.nodes:
            if node.op == "placeholder":
                self.env[node] = INPUT_NAME
            elif node.op == "call_module":
                module = self.modules[str(node.target)]
                self.env[node] = self._emit_module(
                    module,
                    str(node.target),
                    self._tensor_name(node.args[0]),
                    self._result_name(node),
                )
            elif node.op == "call_function":
                self.env[node] = self._emit_function(node)
            elif node.op == "output":
                break
            else:
                raise UnsupportedGraphOp(
                    f"graph op {node.op!r} targeting {node.target!r} is not exportable"
                )
        bad = [key for key, node in mapping.items() if self.env.get(node) != key]
        if bad:
            raise UnsupportedGraphOp(
                f"taps {bad} land on pass-through layers; tap the producing layer"
            )
        output_names = [key for key in mapping]
        return self.nodes, self.inits, INPUT_NAME, output_names

    # -- modules -----------------------------------------------------

    def _emit_module(self, module, path, x, out):
        if isinstance(module, nn.Conv2d):
            return self._conv(module, path, x, out)
        if isinstance(module, nn.BatchNorm2d):
            return self._batch_norm(module, path, x, out)
        if isinstance(module, nn.ReLU):
            return self.emit("Relu", [x], out)
        if isinstance(module, nn.Hardswish):
            return self._hardswish(x, out)
        if isinstance(module, nn.Hardsigmoid):
            return self.emit("HardSigmoid", [x], out, _HARD_SIGMOID_ATTRS)
        if isinstance(module, nn.MaxPool2d):
            return self._max_pool(module, path, x, out)
        if isinstance(module, nn.AvgPool2d):
            return self._avg_pool(module, path, x, out)
        if isinstance(module, nn.AdaptiveAvgPool2d):
            return self._adaptive_avg_pool(module, path, x, out)
        if isinstance(module, SqueezeExcitation):
            return self._squeeze_excitation(module, path, x, out)
        if isinstance(module, nn.Sequential):
            return self._sequential(module, path, x, out)
        if isinstance(module, (nn.Dropout, nn.Identity)):
            return x
        raise UnsupportedGraphOp(
            f"module {path!r} of type {type(module).__name__} is not exportable"
        )

    def _conv(self, module, path, x, out):
        if module.padding_mode != "zeros":
            raise UnsupportedGraphOp(f"{path}: padding mode {module.padding_mode!r}")
        if isinstance(module.padding, str):
            raise UnsupportedGraphOp(f"{path}: string padding {module.padding!r}")
        if _pair(module.dilation) != [1, 1]:
            raise UnsupportedGraphOp(f"{path}: dilation {module.dilation}")
        kh, kw = _pair(module.kernel_size)
        sh, sw = _pair(module.stride)
        ph, pw = _pair(module.padding)
        inputs = [x, self.add_init(f"{path}.weight", module.weight)]
        if module.bias is not None:
            inputs.append(self.add_init(f"{path}.bias", module.bias))
        attrs = {
            "kernel_shape": [kh, kw],
            "strides": [sh, sw],
            "pads": [ph, pw, ph, pw],
            "dilations": [1, 1],
            "group": int(module.groups),
        }
        return self.emit("Conv", inputs, out, attrs)

    def _batch_norm(self, module, path, x, out):
        if not module.affine or not module.track_running_stats:
            raise UnsupportedGraphOp(f"{path}: batch norm without affine stats")
        inputs = [
            x,
            self.add_init(f"{path}.weight", module.weight),
            self.add_init(f"{path}.bias", module.bias),
            self.add_init(f"{path}.running_mean", module.running_mean),
            self.add_init(f"{path}.running_var", module.running_var),
        ]
        return self.emit(
            "BatchNormalization", inputs, out, {"epsilon": float(module.eps)}
        )

    def _max_pool(self, module, path, x, out):
        if _pair(module.dilation) != [1, 1]:
            raise UnsupportedGraphOp(f"{path}: pooling dilation {module.dilation}")
        kh, kw = _pair(module.kernel_size)
        stride = module.stride if module.stride is not None else module.kernel_size
        sh, sw = _pair(stride)
        ph, pw = _pair(module.padding)
        attrs = {
            "kernel_shape": [kh, kw],
            "strides": [sh, sw],
            "pads": [ph, pw, ph, pw],
            "ceil_mode": int(module.ceil_mode),
        }
        return self.emit("MaxPool", [x], out, attrs)

    def _avg_pool(self, module, path, x, out):
        if module.divisor_override is not None:
            raise UnsupportedGraphOp(f"{path}: divisor_override is not exportable")
        kh, kw = _pair(module.kernel_size)
        stride = module.stride if module.stride is not None else module.kernel_size
        sh, sw = _pair(stride)
        ph, pw = _pair(module.padding)
        attrs = {
            "kernel_shape": [kh, kw],
            "strides": [sh, sw],
            "pads": [ph, pw, ph, pw],
            "ceil_mode": int(module.ceil_mode),
            "count_include_pad": int(module.count_include_pad),
        }
        return self.emit("AveragePool", [x], out, attrs)

    def _adaptive_avg_pool(self, module, path, x, out):
        size = module.output_size
        pair = (size, size) if isinstance(size, int) else tuple(size)
        if pair != (1, 1):
            raise UnsupportedGraphOp(f"{path}: adaptive pool to {size!r}")
        return self.emit("GlobalAveragePool", [x], out)

    def _hardswish(self, x, out):
        gate = self.emit(
            "HardSigmoid", [x], self._fresh(f"{out}.gate"), _HARD_SIGMOID_ATTRS
        )
        return self.emit("Mul", [x, gate], out)

    def _squeeze_excitation(self, module, path, x, out):
        pooled = self._emit_module(
            module.avgpool, f"{path}.avgpool", x, self._fresh(f"{path}.pool")
        )
        scale = self._emit_module(
            module.fc1, f"{path}.fc1", pooled, self._fresh(f"{path}.fc1_out")
        )
        scale = self._emit_module(
            module.activation, f"{path}.activation", scale, self._fresh(f"{path}.act")
        )
        scale = self._emit_module(
            module.fc2, f"{path}.fc2", scale, self._fresh(f"{path}.fc2_out")
        )
        scale = self._emit_module(
            module.scale_activation,
            f"{path}.scale_activation",
            scale,
            self._fresh(f"{path}.scale"),
        )
        return self.emit("Mul", [x, scale], out)

    def _sequential(self, module, path, x, out):
        current = x
        children = list(module.named_children())
        for index, (child_name, child) in enumerate(children):
            is_last = index == len(children) - 1
            target = out if is_last else self._fresh(f"{path}.{child_name}")
            current = self._emit_module(child, f"{path}.{child_name}", current, target)
        return current

    # -- functions ---------------------------------------------------

    def _emit_function(self, node):
        target = node.target
        out = self._result_name(node)
        if target in (operator.add, operator.iadd, torch.add):
            a, b = (self._tensor_name(arg) for arg in node.args[:2])
            return self.emit("Add", [a, b], out)
        if target in (operator.mul, operator.imul, torch.mul):
            a, b = (self._tensor_name(arg) for arg in node.args[:2])
            return self.emit("Mul", [a, b], out)
        if target is torch.cat:
            tensors = [self._tensor_name(arg) for arg in node.args[0]]
            if len(node.args) > 1:
                dim = node.args[1]
            else:
                dim = node.kwargs.get("dim", 0)
            return self.emit("Concat", tensors, out, {"axis": int(dim)})
        if target is F.relu:
            return self.emit("Relu", [self._tensor_name(node.args[0])], out)
        if target is F.hardswish:
            return self._hardswish(self._tensor_name(node.args[0]), out)
        if target is F.hardsigmoid:
            return self.emit(
                "HardSigmoid", [self._tensor_name(node.args[0])], out,
                _HARD_SIGMOID_ATTRS,
            )
        if target is F.dropout:
            return self._tensor_name(node.args[0])
        name = getattr(target, "__name__", target)
        raise UnsupportedGraphOp(f"function {name!r} is not exportable")


def export_graph(extractor, taps):
    """Convert a truncated fx graph to interchange nodes and weights.

    Parameters
    ----------
    extractor : torch.fx.GraphModule
        The result of :func:`build_extractor`, in eval mode.
    taps : sequence of str
        The tap names the extractor was built with; the returned output
        names equal these strings in order.

    Returns
    -------
    (nodes, initializers, input_name, output_names)
        Arguments for :func:`onnx_writer.serialize_model`.
    """
    nodes, inits, input_name, output_names = _GraphExporter(extractor).run(taps)
    if list(output_names) != list(taps):
        raise UnsupportedGraphOp(
            f"graph outputs {output_names} do not match requested taps {list(taps)}"
        )
    return nodes, inits, input_name, output_names
