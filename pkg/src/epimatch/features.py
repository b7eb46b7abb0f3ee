"""Feature pyramids: pluggable backends and layer/image coordinate mapping.

Two backends are provided.  The built-in backend needs no model file: it
box-downsamples the image octave by octave and builds an 18-dimensional
hand-crafted descriptor per cell, which is enough to exercise the full
matching cascade deterministically.  The inference backend executes an
exported convolutional network (see :mod:`epimatch.onnx_rt`) and taps the
activations named in a manifest.

Coordinate conventions: image points are (x, y) pixels, cell coordinates are
(row, col) grid indices, and a cell covers the ``scale x scale`` pixel patch
whose center ``layer_to_image`` returns.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ImageTooSmall,
    ModelLoadError,
    OutOfBounds,
    PreprocessError,
    ShapeMismatch,
)

__all__ = [
    "FeatureMap",
    "FeaturePyramid",
    "ManifestLayer",
    "BackendManifest",
    "load_manifest",
    "load_image",
    "to_image_array",
    "builtin_pyramid",
    "extract_pyramid",
    "layer_to_image",
    "image_to_layer",
    "builtin_manifest",
    "BUILTIN_DESCRIPTOR_DIMS",
]

# 3 RGB samples + 3x2 central-difference gradients + 9 luma neighborhood taps.
BUILTIN_DESCRIPTOR_DIMS = 18

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class FeatureMap:
    """Dense descriptor grid for one pyramid layer.

    ``data`` is (height, width, channels) float32; ``scale`` is the edge
    length in image pixels of the patch each cell covers.
    """

    layer: int
    scale: float
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch("feature map data must be (H, W, C)")
        if self.channels < 1:
            raise ShapeMismatch("feature map needs at least one channel")
        if self.scale <= 0:
            raise ShapeMismatch("scale must be positive")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def cells(self) -> int:
        return self.height * self.width

    def descriptors(self) -> np.ndarray:
        """Row-major (cells, channels) view of the descriptor grid."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class FeaturePyramid:
    """Ordered feature maps, layer 0 shallowest to L-1 deepest."""

    layers: tuple
    width: int
    height: int

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ShapeMismatch("a pyramid needs at least 2 layers")
        scales = [m.scale for m in self.layers]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ShapeMismatch("layer scales must be strictly increasing")
        for index, fmap in enumerate(self.layers):
            if fmap.layer != index:
                raise ShapeMismatch("layer indices must be contiguous from 0")

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> FeatureMap:
        return self.layers[index]


@dataclass(frozen=True)
class ManifestLayer:
    tap: str
    scale: float
    channels: int


@dataclass(frozen=True)
class BackendManifest:
    """Backend description: model file, preprocessing, and tap records."""

    backend: str
    model: str | None
    mean: tuple
    std: tuple
    resize: str
    layers: tuple
    base_dir: str = "."

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ModelLoadError("preprocess mean/std must have 3 entries")
        if any(s <= 0 for s in self.std):
            raise ModelLoadError("preprocess std entries must be positive")
        scales = [l.scale for l in self.layers]
        if len(scales) < 2:
            raise ModelLoadError("manifest needs at least 2 layer records")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ModelLoadError("manifest scales must increase shallow to deep")
        if self.resize != "none" and not self.resize.startswith("multiple-of-"):
            raise ModelLoadError(f"unknown resize policy {self.resize!r}")

    @property
    def resize_multiple(self) -> int:
        if self.resize == "none":
            return 1
        return int(self.resize.split("multiple-of-")[1])

    def model_path(self) -> str | None:
        if self.model is None:
            return None
        if os.path.isabs(self.model):
            return self.model
        return os.path.join(self.base_dir, self.model)

    def to_json(self) -> str:
        doc = {
            "backend": self.backend,
            "model": self.model,
            "preprocess": {
                "mean": list(self.mean),
                "std": list(self.std),
                "resize": self.resize,
            },
            "layers": [
                {"tap": l.tap, "scale": l.scale, "channels": l.channels}
                for l in self.layers
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_manifest(path: str) -> BackendManifest:
    """Parse and validate a backend manifest JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ModelLoadError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        pre = doc["preprocess"]
        layers = tuple(
            ManifestLayer(
                tap=str(rec["tap"]),
                scale=float(rec["scale"]),
                channels=int(rec["channels"]),
            )
            for rec in doc["layers"]
        )
        manifest = BackendManifest(
            backend=str(doc["backend"]),
            model=doc.get("model"),
            mean=tuple(float(v) for v in pre["mean"]),
            std=tuple(float(v) for v in pre["std"]),
            resize=str(pre.get("resize", "none")),
            layers=layers,
            base_dir=os.path.dirname(os.path.abspath(path)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"manifest {path} is malformed: {exc}") from exc
    return manifest


def builtin_manifest(levels: int) -> BackendManifest:
    """Manifest describing the built-in backend at a given layer count."""
    if levels < 2:
        raise ModelLoadError("builtin backend needs at least 2 layers")
    return BackendManifest(
        backend="builtin",
        model=None,
        mean=(0.0, 0.0, 0.0),
        std=(1.0, 1.0, 1.0),
        resize=f"multiple-of-{2 ** (levels - 1)}",
        layers=tuple(
            ManifestLayer(tap=f"builtin/{l}", scale=float(2**l), channels=BUILTIN_DESCRIPTOR_DIMS)
            for l in range(levels)
        ),
    )


def to_image_array(data) -> np.ndarray:
    """Coerce to a (H, W, 3) float32 array in [0, 1].

    Accepts uint8 (scaled by 1/255) or float arrays; grayscale (H, W) input
    is broadcast to 3 channels.
    """
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PreprocessError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 16 or arr.shape[1] < 16:
        raise PreprocessError("images must be at least 16x16 pixels")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise PreprocessError("image contains non-finite samples")
    return arr


def load_image(path: str) -> np.ndarray:
    """Load an image file as (H, W, 3) float32 in [0, 1]."""
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except OSError as exc:
        raise PreprocessError(f"cannot read image {path}: {exc}") from exc
    return to_image_array(arr)


def _crop_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    if multiple <= 1:
        return image
    h = (image.shape[0] // multiple) * multiple
    w = (image.shape[1] // multiple) * multiple
    if h == 0 or w == 0:
        raise ImageTooSmall(
            f"image {image.shape[1]}x{image.shape[0]} smaller than one "
            f"multiple-of-{multiple} tile"
        )
    return image[:h, :w]


def _box_downsample(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[0] // 2, image.shape[1] // 2
    view = image[: 2 * h, : 2 * w].reshape(h, 2, w, 2, image.shape[2])
    return view.mean(axis=(1, 3), dtype=np.float32)


def _builtin_descriptors(level_image: np.ndarray) -> np.ndarray:
    """18-dim descriptor grid for one pyramid level.

    Channels 0-2: RGB sample at the cell.
    Channels 3-5 / 6-8: per-RGB horizontal / vertical central differences
    (edge-replicated).
    Channels 9-17: the 3x3 luma neighborhood, row-major, edge-replicated.
    """
    padded = np.pad(level_image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = level_image.shape[:2]
    desc = np.empty((h, w, BUILTIN_DESCRIPTOR_DIMS), dtype=np.float32)
    desc[:, :, 0:3] = level_image
    desc[:, :, 3:6] = (padded[1:-1, 2:] - padded[1:-1, :-2]) * np.float32(0.5)
    desc[:, :, 6:9] = (padded[2:, 1:-1] - padded[:-2, 1:-1]) * np.float32(0.5)
    luma = padded @ _LUMA
    k = 9
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            desc[:, :, k] = luma[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
            k += 1
    return desc


def builtin_pyramid(image, levels: int) -> FeaturePyramid:
    """Model-free feature pyramid: one octave of box downsampling per layer.

    The image is cropped top-left to a multiple of ``2**(levels-1)`` so every
    layer's grid is exact; the deepest map must come out at least 8x8 cells.
    Pure function: identical inputs give bitwise-identical pyramids.
    """
    if levels < 2:
        raise ImageTooSmall("a pyramid needs at least 2 layers")
    arr = to_image_array(image)
    arr = _crop_to_multiple(arr, 2 ** (levels - 1))
    deepest_h = arr.shape[0] >> (levels - 1)
    deepest_w = arr.shape[1] >> (levels - 1)
    if deepest_h < 8 or deepest_w < 8:
        raise ImageTooSmall(
            f"deepest map would be {deepest_w}x{deepest_h} cells; need >= 8x8"
        )
    maps = []
    level_image = arr
    for level in range(levels):
        if level > 0:
            level_image = _box_downsample(level_image)
        maps.append(
            FeatureMap(layer=level, scale=float(2**level), data=_builtin_descriptors(level_image))
        )
    return FeaturePyramid(layers=tuple(maps), width=arr.shape[1], height=arr.shape[0])


def _parse_builtin_spec(spec: str) -> int:
    try:
        _, levels = spec.split(":")
        return int(levels)
    except ValueError as exc:
        raise ModelLoadError(
            f"builtin backend spec must look like 'builtin:4', got {spec!r}"
        ) from exc


def extract_pyramid(image, backend) -> FeaturePyramid:
    """Run a backend over an image and return its feature pyramid.

    ``backend`` is a :class:`BackendManifest`, a path handled upstream by
    :func:`load_manifest`, or the string ``"builtin:L"``.  Inference backends
    execute the manifest's model file and validate every tap's activation
    shape against the manifest.
    """
    if isinstance(backend, str):
        if backend.startswith("builtin"):
            return builtin_pyramid(image, _parse_builtin_spec(backend))
        backend = load_manifest(backend)
    if not isinstance(backend, BackendManifest):
        raise ModelLoadError(f"unsupported backend spec {backend!r}")
    if backend.backend == "builtin":
        return builtin_pyramid(image, len(backend.layers))

    from . import onnx_rt

    model_path = backend.model_path()
    if model_path is None:
        raise ModelLoadError(
            f"backend {backend.backend!r} requires a model file path"
        )
    model = onnx_rt.load_model(model_path)

    arr = to_image_array(image)
    arr = _crop_to_multiple(arr, backend.resize_multiple)
    height, width = arr.shape[:2]
    mean = np.asarray(backend.mean, dtype=np.float32)
    std = np.asarray(backend.std, dtype=np.float32)
    tensor = ((arr - mean) / std).transpose(2, 0, 1)[None].astype(np.float32)

    taps = [l.tap for l in backend.layers]
    missing = [t for t in taps if t not in model.output_names]
    if missing:
        raise ModelLoadError(
            f"model {model_path} does not expose taps {missing}; "
            f"available outputs: {sorted(model.output_names)}"
        )
    outputs = model.run(tensor, taps)

    maps = []
    for index, (rec, act) in enumerate(zip(backend.layers, outputs)):
        if act.ndim != 4 or act.shape[0] != 1:
            raise ShapeMismatch(
                f"tap {rec.tap!r} produced shape {act.shape}; expected NCHW"
            )
        channels, act_h, act_w = act.shape[1], act.shape[2], act.shape[3]
        if channels != rec.channels:
            raise ShapeMismatch(
                f"tap {rec.tap!r} emits {channels} channels; manifest says "
                f"{rec.channels}"
            )
        want_h, want_w = height / rec.scale, width / rec.scale
        if act_h != int(want_h) or act_w != int(want_w) or want_h != int(want_h):
            raise ShapeMismatch(
                f"tap {rec.tap!r} produced {act_w}x{act_h} cells; manifest "
                f"scale {rec.scale} over a {width}x{height} input requires "
                f"{want_w:g}x{want_h:g}"
            )
        data = np.ascontiguousarray(act[0].transpose(1, 2, 0).astype(np.float32))
        maps.append(FeatureMap(layer=index, scale=float(rec.scale), data=data))
    return FeaturePyramid(layers=tuple(maps), width=width, height=height)


def layer_to_image(cell, fmap: FeatureMap):
    """Map a (row, col) cell to the image-pixel center of its patch."""
    row, col = cell
    if not (0 <= row < fmap.height and 0 <= col < fmap.width):
        raise OutOfBounds(
            f"cell {cell} outside {fmap.width}x{fmap.height} map"
        )
    return ((col + 0.5) * fmap.scale, (row + 0.5) * fmap.scale)


def image_to_layer(point, fmap: FeatureMap):
    """Map an image point (x, y) to the (row, col) cell containing it."""
    x, y = point
    col = int(np.floor(x / fmap.scale))
    row = int(np.floor(y / fmap.scale))
    if not (0 <= row < fmap.height and 0 <= col < fmap.width):
        raise OutOfBounds(f"point {point} outside the map's image footprint")
    return (row, col)


def cells_to_image(cells: np.ndarray, fmap: FeatureMap) -> np.ndarray:
    """Vectorized layer_to_image: (N, 2) rows/cols -> (N, 2) x/y pixels."""
    cells = np.asarray(cells)
    return np.column_stack(
        [
            (cells[:, 1] + 0.5) * fmap.scale,
            (cells[:, 0] + 0.5) * fmap.scale,
        ]
    )
