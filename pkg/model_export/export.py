"""Backbone truncation, serialization, manifest emission, and verification.

``export_backbone`` builds a torchvision network, truncates it at the tap
layers, writes the serialized graph plus a manifest JSON describing taps,
scales, channels, and preprocessing, then verifies the artifacts: the same
probe tensors run through the source framework at float64 and through the
downstream interchange runtime, and every tap's activations must agree to
within 1e-4.  Scales and channel counts are read from live activation
shapes on a non-square probe, never hardcoded.

Runs standalone:

    python3 model_export/export.py --backbone vgg19 --out exports/ \
        --weights random --seed 7
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import torch

if __package__ in (None, ""):
    sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    from model_export.backbones import build_backbone, resolve_backbone
    from model_export.fx_export import (
        UnknownTap,
        UnsupportedGraphOp,
        build_extractor,
        export_graph,
    )
    from model_export.onnx_writer import write_model
else:
    from .backbones import build_backbone, resolve_backbone
    from .fx_export import (
        UnknownTap,
        UnsupportedGraphOp,
        build_extractor,
        export_graph,
    )
    from .onnx_writer import write_model

__all__ = [
    "TOLERANCE",
    "PROBE_SIZE",
    "ExportSpec",
    "ExportResult",
    "ExportVerificationFailed",
    "export_backbone",
    "verify_export",
    "main",
]

# Per-tap max |deviation| bound between the two runtimes.
TOLERANCE = 1e-4

# Verification probes are square with this side; it must be a multiple of
# every backbone's resize multiple so all taps see exact downsamplings.
PROBE_SIZE = 96

_PROBE_NOISE_SEED = 2024


class ExportVerificationFailed(RuntimeError):
    """Dual-runtime activation comparison exceeded the tolerance."""


@dataclass(frozen=True)
class ExportSpec:
    """What to export: backbone, taps, destination, and weight policy."""

    backbone: str
    taps: tuple = ()
    out_dir: str = "."
    weights: str = "pretrained"
    seed: int = 0


@dataclass(frozen=True)
class ExportResult:
    model_path: str
    manifest_path: str
    manifest: dict
    deviations: dict = field(default_factory=dict)


def _probe_layers(extractor, taps, multiple):
    """Read (tap, scale, channels) records from live activation shapes.

    The probe is non-square so a height/width mix-up cannot cancel out.
    """
    height, width = 2 * multiple, 3 * multiple
    with torch.no_grad():
        acts = extractor(torch.zeros(1, 3, height, width))
    layers = []
    for tap in taps:
        act = acts[tap]
        if act.ndim != 4 or act.shape[0] != 1:
            raise ValueError(f"tap {tap!r} produced shape {tuple(act.shape)}")
        channels, act_h, act_w = act.shape[1], act.shape[2], act.shape[3]
        if height % act_h or width % act_w or height // act_h != width // act_w:
            raise ValueError(
                f"tap {tap!r} output {act_w}x{act_h} is not an integral "
                f"downsampling of a {width}x{height} probe"
            )
        layers.append((tap, float(height // act_h), int(channels)))
    scales = [scale for _, scale, _ in layers]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(
            f"taps must run shallow to deep with strictly increasing scales, "
            f"got {scales}"
        )
    return layers


def _probe_pixels(size):
    """Two probe images in [0, 1]: constant gray and smooth seeded noise."""
    gray = np.full((1, 3, size, size), 0.5, dtype=np.float64)
    rng = np.random.default_rng(_PROBE_NOISE_SEED)
    coarse = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 3, 12, 12)))
    smooth = torch.nn.functional.interpolate(
        coarse, size=(size, size), mode="bilinear", align_corners=False
    )
    return [gray, smooth.numpy()]


def verify_export(model, manifest_path, probe_size=PROBE_SIZE):
    """Compare source-framework and interchange-runtime activations.

    Runs two probe images through ``model`` (at float64, truncated to the
    manifest's taps) and through the interchange runtime executing the
    manifest's model file, also at float64.  Both see the identical
    normalized input tensor.

    Parameters
    ----------
    model : torch.nn.Module
        The network the artifacts were exported from, with its weights.
    manifest_path : str
        Manifest JSON written by :func:`export_backbone`.
    probe_size : int
        Probe side length; must be a multiple of the manifest's resize
        multiple.

    Returns
    -------
    dict
        Max |deviation| per tap across both probes.

    Raises
    ------
    ExportVerificationFailed
        If any tap deviates by TOLERANCE or more, naming the tap.
    """
    from epimatch import onnx_rt

    with open(manifest_path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    taps = [rec["tap"] for rec in doc["layers"]]
    mean = np.asarray(doc["preprocess"]["mean"], dtype=np.float64)
    std = np.asarray(doc["preprocess"]["std"], dtype=np.float64)
    model_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                              doc["model"])

    runtime = onnx_rt.load_model(model_path)
    extractor = build_extractor(copy.deepcopy(model), taps).double()

    deviations = {tap: 0.0 for tap in taps}
    for pixels in _probe_pixels(probe_size):
        tensor = (pixels - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
        with torch.no_grad():
            reference = extractor(torch.from_numpy(tensor))
        produced = runtime.run(tensor, taps)
        for tap, act in zip(taps, produced):
            dev = float(np.max(np.abs(reference[tap].numpy() - act)))
            deviations[tap] = max(deviations[tap], dev)
    failing = {t: d for t, d in deviations.items() if not d < TOLERANCE}
    if failing:
        detail = ", ".join(f"{t}: {d:.3e}" for t, d in failing.items())
        raise ExportVerificationFailed(
            f"activation deviation at or above {TOLERANCE:g} for taps {detail}"
        )
    return deviations


def export_backbone(spec: ExportSpec) -> ExportResult:
    """Export one backbone: model file, manifest JSON, and verification.

    Returns an :class:`ExportResult` whose ``deviations`` field holds the
    per-tap verification maxima.  Raises UnknownTap for taps absent from
    the backbone, UnsupportedGraphOp if the truncated graph reaches
    outside the interchange operator set, and ExportVerificationFailed if
    the dual-runtime comparison misses the tolerance.
    """
    info = resolve_backbone(spec.backbone)
    taps = tuple(spec.taps) if spec.taps else info.default_taps
    model = build_backbone(info, spec.weights, spec.seed)
    extractor = build_extractor(model, taps)
    layers = _probe_layers(extractor, taps, info.resize_multiple)
    nodes, inits, input_name, output_names = export_graph(extractor, taps)

    os.makedirs(spec.out_dir, exist_ok=True)
    slug = info.name.lower()
    model_file = f"{slug}.onnx"
    model_path = os.path.join(spec.out_dir, model_file)
    write_model(model_path, nodes, inits, input_name, output_names,
                graph_name=slug)

    doc = {
        "backend": info.name,
        "model": model_file,
        "preprocess": {
            "mean": list(info.mean),
            "std": list(info.std),
            "resize": f"multiple-of-{info.resize_multiple}",
        },
        "layers": [
            {"tap": tap, "scale": scale, "channels": channels}
            for tap, scale, channels in layers
        ],
    }
    manifest_path = os.path.join(spec.out_dir, f"{slug}.manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    deviations = verify_export(model, manifest_path)
    return ExportResult(
        model_path=model_path,
        manifest_path=manifest_path,
        manifest=doc,
        deviations=deviations,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="model-export",
        description="Truncate an ImageNet backbone at tap layers, serialize "
        "it for the matching pipeline, and emit the manifest JSON.",
    )
    parser.add_argument("--backbone", required=True,
                        help="backbone name, e.g. vgg19 or MobileNet-Large")
    parser.add_argument("--taps", default=None,
                        help="comma-separated tap names (default: the "
                        "backbone's standard five)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--weights", choices=("pretrained", "random"),
                        default="pretrained",
                        help="pretrained ImageNet weights or a seeded "
                        "random draw (for offline testing)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for --weights random")
    args = parser.parse_args(argv)

    taps = ()
    if args.taps:
        taps = tuple(t.strip() for t in args.taps.split(",") if t.strip())
    spec = ExportSpec(
        backbone=args.backbone,
        taps=taps,
        out_dir=args.out,
        weights=args.weights,
        seed=args.seed,
    )
    try:
        result = export_backbone(spec)
    except (UnknownTap, UnsupportedGraphOp, ExportVerificationFailed,
            ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"model:    {result.model_path}")
    print(f"manifest: {result.manifest_path}")
    for tap, dev in result.deviations.items():
        print(f"verified {tap}: max deviation {dev:.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
