"""Deterministic synthetic scenes with exact epipolar ground truth.

Scene construction works backwards from what the matcher can observe.  An
image-A point sits exactly on a pixel center; its partner is the foot of
the perpendicular from a nearby B pixel center onto the true epipolar
line, accepted only when that foot is within ``snap_max`` pixels of the
center.  The correspondence list therefore satisfies the epipolar identity
to float evaluation noise, while the rendered markers sit in exactly the
cells a dense matcher should report, with sub-half-pixel quantization.

Rendered markers are single pixels of distinct hues: descriptor matching
is unambiguous, empty background cells reject themselves through the ratio
test (all-equal distances), and every marker occupies one known cell at
every pyramid level.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateCameraSpec
from .geometry import (
    CameraIntrinsics,
    essential_from_pose,
    fundamental_from_pose,
)

__all__ = [
    "SceneSpec",
    "SyntheticScene",
    "WarpSpec",
    "WarpScene",
    "synth_scene",
    "synth_warp_pair",
    "write_hpatches_sequence",
    "write_pose_pairs",
]


@dataclass(frozen=True)
class SceneSpec:
    """Camera and layout parameters for a rendered two-view scene.

    ``spacing`` is in deepest-layer cells (markers at least ``spacing``
    cells apart on the placement grid); ``snap_max`` bounds the distance
    from a B marker's pixel center to the true epipolar line, which in
    turn bounds the Sampson residual of the matchable cell pair.
    """

    width: int = 256
    height: int = 256
    levels: int = 4
    focal: tuple = (170.0, 260.0)
    rotation_deg: float = 8.0
    baseline: float = 0.9
    depth: tuple = (2.5, 18.0)
    margin: int = 8
    spacing: int = 1
    snap_max: float = 0.03
    min_separation: float = 6.0

    def __post_init__(self):
        if self.levels < 2:
            raise DegenerateCameraSpec("need at least 2 pyramid levels")
        if self.margin < 2:
            raise DegenerateCameraSpec("margin must leave room for gradients")
        if self.width < 4 * self.margin or self.height < 4 * self.margin:
            raise DegenerateCameraSpec("image too small for the margin")
        if not (0 < self.focal[0] <= self.focal[1]):
            raise DegenerateCameraSpec("focal range must be positive ascending")
        if not (0 < self.depth[0] < self.depth[1]):
            raise DegenerateCameraSpec("depth range must be positive ascending")
        if self.baseline <= 0:
            raise DegenerateCameraSpec(
                "zero baseline leaves the fundamental matrix undefined"
            )
        if self.rotation_deg < 0:
            raise DegenerateCameraSpec("rotation magnitude must be non-negative")
        if not (0 < self.snap_max < 0.5):
            raise DegenerateCameraSpec("snap_max must lie in (0, 0.5)")
        if self.spacing < 1:
            raise DegenerateCameraSpec("spacing must be at least 1 cell")


@dataclass(frozen=True)
class SyntheticScene:
    """Exact correspondences plus optional rendered image pair.

    ``points_b[i]`` lies on the epipolar line of ``points_a[i]`` (float
    evaluation noise only); the rendered B marker sits in the pixel whose
    center is nearest that point.
    """

    points_a: np.ndarray
    points_b: np.ndarray
    f_gt: np.ndarray
    e_gt: np.ndarray
    k_a: CameraIntrinsics
    k_b: CameraIntrinsics
    rotation: np.ndarray
    translation: np.ndarray
    image_a: np.ndarray | None
    image_b: np.ndarray | None

    def __len__(self) -> int:
        return self.points_a.shape[0]


@dataclass(frozen=True)
class WarpSpec:
    """Layout parameters for a homography-warped rendered pair."""

    width: int = 256
    height: int = 256
    levels: int = 4
    rotation_deg: float = 10.0
    scale: tuple = (0.9, 1.15)
    translation_px: float = 6.0
    perspective: float = 1.5e-5
    margin: int = 8
    spacing: int = 1
    min_separation: float = 9.0

    def __post_init__(self):
        if self.levels < 2:
            raise DegenerateCameraSpec("need at least 2 pyramid levels")
        if self.margin < 2:
            raise DegenerateCameraSpec("margin must leave room for gradients")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise DegenerateCameraSpec("scale range must be positive ascending")
        if self.spacing < 1:
            raise DegenerateCameraSpec("spacing must be at least 1 cell")


@dataclass(frozen=True)
class WarpScene:
    """Rendered image pair related by a known homography."""

    image_a: np.ndarray
    image_b: np.ndarray
    h_gt: np.ndarray
    points_a: np.ndarray
    points_b: np.ndarray

    def __len__(self) -> int:
        return self.points_a.shape[0]


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    if max_deg == 0:
        return np.eye(3)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-6:
        axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.25 * max_deg, max_deg))
    return _rotation_matrix(axis, angle)


def _marker_hues(n: int, rng: np.random.Generator) -> np.ndarray:
    """n evenly spread hues with a random phase."""
    start = rng.uniform()
    return (start + np.arange(n) / max(n, 1)) % 1.0


def _hues_to_rgb(hues: np.ndarray, saturation=0.85) -> np.ndarray:
    sat = np.broadcast_to(np.asarray(saturation, dtype=np.float64), hues.shape)
    rgb = np.array(
        [colorsys.hsv_to_rgb(h, s, 0.95) for h, s in zip(hues, sat)]
    )
    quantized = np.round(rgb * 255.0).astype(np.uint8)
    return quantized.astype(np.float32) / np.float32(255.0)


def _jittered_palette(
    base_hues: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Second-view palette with small per-marker saturation shifts.

    Cross-view photometric variation keeps descriptor distances nonzero and
    distinct across markers, so confidence rankings are continuous instead
    of collapsing into ties.  Saturation is the safe axis to perturb: hue
    shifts can collide with a neighboring marker's identity once the palette
    is dense, and value shifts scale the whole pixel, which cosine distance
    ignores.
    """
    n = len(base_hues)
    shift = rng.uniform(0.006, 0.012, size=n) * rng.choice([-1.0, 1.0], size=n)
    sat = np.clip(0.85 + shift, 0.35, 1.0)
    return _hues_to_rgb(base_hues, sat)


def _marker_sites(rng: np.random.Generator, width, height, levels, margin, spacing):
    """Pixel (row, col) sites on a jittered deepest-layer cell grid."""
    cell = 2 ** (levels - 1)
    row_cells = np.arange(-(-margin // cell), (height - margin) // cell)
    col_cells = np.arange(-(-margin // cell), (width - margin) // cell)
    row_cells = row_cells[::spacing]
    col_cells = col_cells[::spacing]
    sites = []
    for r in row_cells:
        for c in col_cells:
            if cell >= 3:
                jr = int(rng.integers(1, cell - 1))
                jc = int(rng.integers(1, cell - 1))
            else:
                jr = int(rng.integers(0, cell))
                jc = int(rng.integers(0, cell))
            sites.append((int(r) * cell + jr, int(c) * cell + jc))
    order = rng.permutation(len(sites))
    return [sites[i] for i in order]


def _render_markers(height, width, pixels, colors) -> np.ndarray:
    img = np.zeros((height, width, 3), dtype=np.float32)
    for (r, c), color in zip(pixels, colors):
        img[r, c] = color
    return img


def _line_foot(line: np.ndarray, point: np.ndarray) -> tuple:
    """Perpendicular foot of ``point`` on line ax+by+c=0 and its distance."""
    norm_sq = line[0] ** 2 + line[1] ** 2
    residual = line[0] * point[0] + line[1] * point[1] + line[2]
    foot = np.array(
        [
            point[0] - residual * line[0] / norm_sq,
            point[1] - residual * line[1] / norm_sq,
        ]
    )
    return foot, abs(residual) / np.sqrt(norm_sq)


def synth_scene(
    seed: int,
    n_points: int = 48,
    spec: SceneSpec | None = None,
    render: bool = False,
) -> SyntheticScene:
    """Build a deterministic two-view scene with exact ground truth.

    Parameters
    ----------
    seed : int
        Drives every random choice; equal seeds give identical scenes.
    n_points : int
        Target correspondence count (at least 8); the scene may hold
        fewer if visibility constraints reject sites, but never < 8.
    spec : SceneSpec, optional
        Camera and layout parameters.
    render : bool
        Also produce the marker image pair for end-to-end pipeline tests.

    Raises
    ------
    DegenerateCameraSpec
        Invalid parameters, or fewer than 8 points visible in both views.
    """
    spec = spec or SceneSpec()
    if n_points < 8:
        raise DegenerateCameraSpec("need at least 8 points")
    rng = np.random.default_rng(seed)

    k_a = CameraIntrinsics(
        fx=rng.uniform(*spec.focal),
        fy=rng.uniform(*spec.focal),
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
    )
    k_b = CameraIntrinsics(
        fx=rng.uniform(*spec.focal),
        fy=rng.uniform(*spec.focal),
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
    )
    rotation = _random_rotation(rng, spec.rotation_deg)
    # Damp the forward component: near-forward motion gives little parallax,
    # which starves the lattice-aligned placement below of usable sites.
    direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.35])
    while np.linalg.norm(direction) < 1e-6:
        direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.35])
    translation = spec.baseline * direction / np.linalg.norm(direction)
    f_gt = fundamental_from_pose(k_a, k_b, rotation, translation)
    e_gt = essential_from_pose(rotation, translation)

    inv_ka = np.linalg.inv(k_a.matrix)
    kb = k_b.matrix
    cell = 2 ** (spec.levels - 1)
    # Central within-cell offsets keep markers within ~0.7 px of the cell
    # center at every pyramid level; forcing the two markers onto the same
    # offset modulo the deepest cell makes every level's cell-center pair a
    # common-translation shift of the exact correspondence, so Sampson
    # residuals stay far below every per-layer threshold and the confidence
    # footprints align.
    half = cell // 2
    offsets = [
        (half - 1, half - 1),
        (half - 1, half),
        (half, half - 1),
        (half, half),
    ]
    z_grid = np.linspace(spec.depth[0], spec.depth[1], 1920)
    sites = _marker_sites(
        rng, spec.width, spec.height, spec.levels, spec.margin, spec.spacing
    )
    pts_a, pts_b, pix_a, pix_b = [], [], [], []
    # Occupied deepest-layer cells per view.  Keeping a one-cell empty ring
    # around every marker (Chebyshev distance >= 2, enforced greedily in
    # both views) means the gradient and luma-window channels of a marker's
    # descriptor see only background at every pyramid level, so descriptors
    # reduce to pure per-marker color signatures and stay view-invariant
    # despite per-marker parallax.
    a_cells = set()
    b_cells = set()

    def ring_free(cells, cell_rc):
        return not any(
            (cell_rc[0] + dr, cell_rc[1] + dc) in cells
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
        )
    for site_row, site_col in sites:
        if len(pts_a) >= n_points:
            break
        corner_row = site_row - site_row % cell
        corner_col = site_col - site_col % cell
        a_cell = (corner_row // cell, corner_col // cell)
        if not ring_free(a_cells, a_cell):
            continue
        accepted = False
        for o_r, o_c in offsets:
            row = corner_row + o_r
            col = corner_col + o_c
            p_a = np.array([col + 0.5, row + 0.5])
            ray = inv_ka @ np.array([p_a[0], p_a[1], 1.0])
            line = f_gt @ np.array([p_a[0], p_a[1], 1.0])
            x_b = z_grid[:, None] * (rotation @ ray)[None, :] + translation
            front = x_b[:, 2] > 0.5
            proj = x_b @ kb.T
            with np.errstate(divide="ignore", invalid="ignore"):
                q = proj[:, :2] / proj[:, 2:3]
            inside = (
                front
                & (q[:, 0] >= spec.margin)
                & (q[:, 0] < spec.width - spec.margin)
                & (q[:, 1] >= spec.margin)
                & (q[:, 1] < spec.height - spec.margin)
            )
            pixels = np.floor(q).astype(np.int64)
            aligned = ((pixels[:, 0] - col) % cell == 0) & (
                (pixels[:, 1] - row) % cell == 0
            )
            centers = pixels + 0.5
            residual = (
                line[0] * centers[:, 0] + line[1] * centers[:, 1] + line[2]
            )
            dist = np.abs(residual) / np.hypot(line[0], line[1])
            ok = np.nonzero(inside & aligned & (dist <= spec.snap_max))[0]
            # The snap distance is a function of the pixel alone, so dedup
            # candidate pixels and try the best-snapped ones first; that
            # halves the effective quantization noise of the marker pair.
            candidates = {}
            for idx in ok:
                pixel = (int(pixels[idx, 1]), int(pixels[idx, 0]))
                if pixel not in candidates:
                    candidates[pixel] = float(dist[idx])
            ranked = sorted(candidates.items(), key=lambda kv: kv[1])[:16]
            for pixel, _snap in ranked:
                if any(
                    (pixel[0] - pb[0]) ** 2 + (pixel[1] - pb[1]) ** 2
                    < spec.min_separation**2
                    for pb in pix_b
                ):
                    continue
                b_cell = (pixel[0] // cell, pixel[1] // cell)
                if not ring_free(b_cells, b_cell):
                    continue
                center = np.array([pixel[1] + 0.5, pixel[0] + 0.5])
                foot, _ = _line_foot(line, center)
                pts_a.append(p_a)
                pts_b.append(foot)
                pix_a.append((row, col))
                pix_b.append(pixel)
                a_cells.add(a_cell)
                b_cells.add(b_cell)
                accepted = True
                break
            if accepted:
                break
    if len(pts_a) < 8:
        raise DegenerateCameraSpec(
            f"only {len(pts_a)} points visible in both views; need 8"
        )

    image_a = image_b = None
    if render:
        hues = _marker_hues(len(pts_a), rng)
        image_a = _render_markers(spec.height, spec.width, pix_a, _hues_to_rgb(hues))
        image_b = _render_markers(
            spec.height, spec.width, pix_b, _jittered_palette(hues, rng)
        )

    return SyntheticScene(
        points_a=np.array(pts_a),
        points_b=np.array(pts_b),
        f_gt=f_gt,
        e_gt=e_gt,
        k_a=k_a,
        k_b=k_b,
        rotation=rotation,
        translation=translation,
        image_a=image_a,
        image_b=image_b,
    )


def _similarity_homography(rng: np.random.Generator, spec: WarpSpec) -> np.ndarray:
    theta = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    scale = rng.uniform(*spec.scale)
    tx, ty = rng.uniform(-spec.translation_px, spec.translation_px, size=2)
    cx, cy = spec.width / 2.0, spec.height / 2.0
    core = np.array(
        [
            [scale * np.cos(theta), -scale * np.sin(theta), tx],
            [scale * np.sin(theta), scale * np.cos(theta), ty],
            [0.0, 0.0, 1.0],
        ]
    )
    if spec.perspective > 0:
        core[2, 0] = rng.uniform(-spec.perspective, spec.perspective)
        core[2, 1] = rng.uniform(-spec.perspective, spec.perspective)
    shift = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    unshift = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return shift @ core @ unshift


def _warp_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homog = np.column_stack([pts, np.ones(len(pts))])
    mapped = homog @ h.T
    return mapped[:, :2] / mapped[:, 2:3]


def _build_warp_scene(
    rng: np.random.Generator, h_gt: np.ndarray, sites, n_points: int, spec: WarpSpec
):
    """Marker layout for a homography pair.

    Accepts only sites whose warped pixel equals the source pixel modulo
    the deepest cell (confidence footprints then pair up across views) and
    keeps a one-cell empty ring around every marker in both views so the
    descriptors stay pure per-marker color signatures.
    """
    cell = 2 ** (spec.levels - 1)
    half = cell // 2
    # Central offsets only: on a planar scene the estimated matrix is
    # noise-determined, so keeping cell centers within ~0.7 px of the true
    # correspondence keeps every layer's filter threshold comfortable.
    offsets = [
        (half - 1, half - 1),
        (half - 1, half),
        (half, half - 1),
        (half, half),
    ]
    pts_a, pts_b, pix_a, pix_b = [], [], [], []
    a_cells = set()
    b_cells = set()

    def ring_free(cells, cell_rc):
        return not any(
            (cell_rc[0] + dr, cell_rc[1] + dc) in cells
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
        )

    for site_row, site_col in sites:
        if len(pts_a) >= n_points:
            break
        corner_row = site_row - site_row % cell
        corner_col = site_col - site_col % cell
        a_cell = (corner_row // cell, corner_col // cell)
        if not ring_free(a_cells, a_cell):
            continue
        for o_r, o_c in offsets:
            row = corner_row + o_r
            col = corner_col + o_c
            p_a = np.array([col + 0.5, row + 0.5])
            q = _warp_points(h_gt, p_a[None, :])[0]
            if not (
                spec.margin <= q[0] < spec.width - spec.margin
                and spec.margin <= q[1] < spec.height - spec.margin
            ):
                continue
            pixel = (int(np.floor(q[1])), int(np.floor(q[0])))
            if (pixel[0] - row) % cell or (pixel[1] - col) % cell:
                continue
            if any(
                (pixel[0] - pb[0]) ** 2 + (pixel[1] - pb[1]) ** 2
                < spec.min_separation**2
                for pb in pix_b
            ):
                continue
            b_cell = (pixel[0] // cell, pixel[1] // cell)
            if not ring_free(b_cells, b_cell):
                continue
            pts_a.append(p_a)
            pts_b.append(q)
            pix_a.append((row, col))
            pix_b.append(pixel)
            a_cells.add(a_cell)
            b_cells.add(b_cell)
            break
    return pts_a, pts_b, pix_a, pix_b


def synth_warp_pair(
    seed: int, n_points: int = 80, spec: WarpSpec | None = None
) -> WarpScene:
    """Rendered image pair related by a known random homography.

    ``points_b`` is the exact homography image of ``points_a``; the B
    marker is rendered in the pixel containing it, so a cell-level matcher
    reports positions within half a pixel diagonal of ground truth.
    """
    spec = spec or WarpSpec()
    if n_points < 4:
        raise DegenerateCameraSpec("need at least 4 points")
    rng = np.random.default_rng(seed)
    h_gt = _similarity_homography(rng, spec)
    sites = _marker_sites(
        rng, spec.width, spec.height, spec.levels, spec.margin, spec.spacing
    )
    pts_a, pts_b, pix_a, pix_b = _build_warp_scene(rng, h_gt, sites, n_points, spec)
    if len(pts_a) < 4:
        raise DegenerateCameraSpec(
            f"only {len(pts_a)} points visible in both views; need 4"
        )
    hues = _marker_hues(len(pts_a), rng)
    return WarpScene(
        image_a=_render_markers(spec.height, spec.width, pix_a, _hues_to_rgb(hues)),
        image_b=_render_markers(
            spec.height, spec.width, pix_b, _jittered_palette(hues, rng)
        ),
        h_gt=h_gt,
        points_a=np.array(pts_a),
        points_b=np.array(pts_b),
    )


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_hpatches_sequence(
    root, seed: int, n_points: int = 80, spec: WarpSpec | None = None
) -> Path:
    """Write a 6-image sequence directory with ASCII homography files.

    Image 1 is a marker field; images 2..6 are warps of it by known
    homographies of increasing strength, written as ``H_1_k`` files (3
    rows of 3 floats).  Returns the sequence directory path.
    """
    spec = spec or WarpSpec()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sites = _marker_sites(
        rng, spec.width, spec.height, spec.levels, spec.margin, spec.spacing
    )
    base_sites = sites[:n_points]
    hues = _marker_hues(len(base_sites), rng)
    base = _render_markers(spec.height, spec.width, base_sites, _hues_to_rgb(hues))
    Image.fromarray(_to_uint8(base)).save(root / "1.ppm")
    for k in range(2, 7):
        strength = (k - 1) / 5.0
        sub = WarpSpec(
            width=spec.width,
            height=spec.height,
            levels=spec.levels,
            rotation_deg=spec.rotation_deg * strength,
            scale=(
                1.0 + (spec.scale[0] - 1.0) * strength,
                1.0 + (spec.scale[1] - 1.0) * strength,
            ),
            translation_px=spec.translation_px * strength,
            perspective=spec.perspective * strength,
            margin=spec.margin,
            spacing=spec.spacing,
            min_separation=spec.min_separation,
        )
        h = _similarity_homography(rng, sub)
        view_colors = _jittered_palette(hues, rng)
        pix_b, kept_colors = [], []
        for (row, col), color in zip(base_sites, view_colors):
            q = _warp_points(h, np.array([[col + 0.5, row + 0.5]]))[0]
            if not (
                spec.margin <= q[0] < spec.width - spec.margin
                and spec.margin <= q[1] < spec.height - spec.margin
            ):
                continue
            pixel = (int(np.floor(q[1])), int(np.floor(q[0])))
            if any(
                (pixel[0] - pb[0]) ** 2 + (pixel[1] - pb[1]) ** 2 < 9.0
                for pb in pix_b
            ):
                continue
            pix_b.append(pixel)
            kept_colors.append(color)
        warped = _render_markers(spec.height, spec.width, pix_b, kept_colors)
        Image.fromarray(_to_uint8(warped)).save(root / f"{k}.ppm")
        lines = "\n".join(" ".join(f"{v:.17g}" for v in rowv) for rowv in h)
        (root / f"H_1_{k}").write_text(lines + "\n")
    return root


def write_pose_pairs(
    root,
    seeds,
    n_points: int = 48,
    spec: SceneSpec | None = None,
    list_name: str = "pairs.jsonl",
) -> Path:
    """Render pose-benchmark image pairs plus their JSONL ground truth.

    One record per seed: ``{imgA, imgB, KA, KB, R, t}`` with 3x3 matrices
    as nested lists.  Returns the JSONL path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in seeds:
        scene = synth_scene(seed, n_points=n_points, spec=spec, render=True)
        name_a = f"pose_{seed}_a.png"
        name_b = f"pose_{seed}_b.png"
        Image.fromarray(_to_uint8(scene.image_a)).save(root / name_a)
        Image.fromarray(_to_uint8(scene.image_b)).save(root / name_b)
        records.append(
            {
                "imgA": name_a,
                "imgB": name_b,
                "KA": scene.k_a.matrix.tolist(),
                "KB": scene.k_b.matrix.tolist(),
                "R": scene.rotation.tolist(),
                "t": scene.translation.tolist(),
            }
        )
    list_path = root / list_name
    with open(list_path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return list_path
