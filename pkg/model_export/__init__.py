"""Model-export tooling for the correspondence-matching pipeline.

Truncates ImageNet backbones at tap layers, serializes each truncated
graph to the interchange format the matcher's feature backend executes,
emits the matching manifest JSON, and verifies numerical agreement
between the source framework and the downstream runtime.
"""

from .backbones import (
    BACKBONES,
    BackboneInfo,
    build_backbone,
    randomize_model_,
    resolve_backbone,
)
from .export import (
    PROBE_SIZE,
    TOLERANCE,
    ExportResult,
    ExportSpec,
    ExportVerificationFailed,
    export_backbone,
    main,
    verify_export,
)
from .fx_export import (
    INPUT_NAME,
    UnknownTap,
    UnsupportedGraphOp,
    build_extractor,
    export_graph,
)
from .onnx_writer import NodeSpec, serialize_model, write_model

__all__ = [
    "BACKBONES",
    "BackboneInfo",
    "build_backbone",
    "randomize_model_",
    "resolve_backbone",
    "PROBE_SIZE",
    "TOLERANCE",
    "ExportResult",
    "ExportSpec",
    "ExportVerificationFailed",
    "export_backbone",
    "main",
    "verify_export",
    "INPUT_NAME",
    "UnknownTap",
    "UnsupportedGraphOp",
    "build_extractor",
    "export_graph",
    "NodeSpec",
    "serialize_model",
    "write_model",
]
