"""Confidence-scored, epipolar-constrained coarse-to-fine refinement.

The pipeline matches the deepest pyramid layer densely, scores each deep
match by how well the shallowest-layer cells inside its patch footprint
agree (confidence ``c = sum m_ij / max(d_ij, eps)`` over the ``s x s``
footprint block, with ``m_ij`` membership in the global shallowest-layer
match set), estimates a fundamental matrix from the eight most confident
matches, and then walks toward the shallowest layer: each surviving match
restricts its children cells' search to the matched cell's children plus a
one-cell margin ring, the new matches are filtered by Sampson distance
against the previous layer's fundamental matrix, and the matrix is
re-estimated from all retained matches.

All geometry runs in image pixels (cell centers); thresholds scale with the
squared cell size, since a cell center localizes its patch no better than
``scale/2`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInput,
    IllConditioned,
    InsufficientMatches,
    InsufficientSeedMatches,
    ShapeMismatch,
)
from .features import FeatureMap, FeaturePyramid, cells_to_image
from .geometry import eight_point, sampson_distances
from .matching import CandidateMask, MatchSet, dense_nn_match

__all__ = [
    "CascadeConfig",
    "LayerDiagnostics",
    "LayerMatches",
    "CascadeResult",
    "confidence_score",
    "score_cells",
    "score_matches",
    "select_top_confident",
    "filter_by_epipolar",
    "cascade_match",
]


@dataclass(frozen=True)
class CascadeConfig:
    """Tunable policy for the refinement cascade.

    ``layers`` selects pyramid layer indices (ascending, shallowest first);
    ``None`` uses every layer.  ``ratio_threshold`` may be a single float or
    a ``{layer: float}`` mapping.  The Sampson inlier threshold at a layer
    of scale ``s`` is ``sampson_base * s**2`` square pixels.
    """

    layers: tuple | None = None
    ratio_threshold: float | dict = 0.9
    sampson_base: float = 1.0
    top_k: int = 8
    min_matches: int = 8
    epsilon: float = 1e-6
    mutual: bool = True
    keep_layer_matches: bool = False

    def __post_init__(self):
        if self.top_k < 8:
            raise DegenerateInput("top_k must be at least 8")
        if self.min_matches < 8:
            raise DegenerateInput("min_matches must be at least 8")
        if self.sampson_base <= 0:
            raise DegenerateInput("sampson_base must be positive")
        if self.epsilon <= 0:
            raise DegenerateInput("epsilon must be positive")

    def ratio_for(self, layer: int) -> float:
        if isinstance(self.ratio_threshold, dict):
            return float(self.ratio_threshold[layer])
        return float(self.ratio_threshold)

    def sampson_threshold(self, scale: float) -> float:
        return self.sampson_base * float(scale) ** 2


@dataclass(frozen=True)
class LayerDiagnostics:
    """Per-layer record of what the cascade did."""

    layer: int
    scale: float
    matched: int
    retained: int
    inlier_ratio: float
    f: np.ndarray | None
    degenerate: bool
    fallback: bool


@dataclass(frozen=True)
class LayerMatches:
    """Retained matches of one cascade stage, in image pixels.

    Only captured when ``CascadeConfig.keep_layer_matches`` is set; useful
    for auditing how residuals evolve layer by layer.
    """

    layer: int
    points_a: np.ndarray
    points_b: np.ndarray

    def __len__(self) -> int:
        return self.points_a.shape[0]


@dataclass(frozen=True)
class CascadeResult:
    """Final matches in image pixels plus the fundamental matrix.

    ``degenerate`` is True when the final matrix came out of an
    ill-conditioned estimation (planar scene, zero baseline) and should not
    be trusted as two-view geometry even though the matches themselves are
    consistent with it.
    """

    points_a: np.ndarray
    points_b: np.ndarray
    distance: np.ndarray
    confidence: np.ndarray
    f_final: np.ndarray
    degenerate: bool
    diagnostics: tuple
    layer_matches: tuple | None = None

    def __len__(self) -> int:
        return self.points_a.shape[0]


def _normalized_f64(desc: np.ndarray) -> np.ndarray:
    desc = desc.astype(np.float64)
    sq = np.einsum("ij,ij->i", desc, desc)
    out = np.zeros_like(desc)
    nz = sq > 0
    out[nz] = desc[nz] / np.sqrt(sq[nz])[:, None]
    return out


def _pair_distances_f64(
    shallow_a: FeatureMap, shallow_b: FeatureMap, qa: np.ndarray, qb: np.ndarray
) -> np.ndarray:
    """Cosine distances between shallow cells qa (of A) and qb (of B)."""
    da = _normalized_f64(shallow_a.descriptors()[qa])
    db = _normalized_f64(shallow_b.descriptors()[qb])
    sims = np.clip(np.einsum("ij,ij->i", da, db), -1.0, 1.0)
    return 1.0 - sims


def score_cells(
    cells_a: np.ndarray,
    cells_b: np.ndarray,
    scale_ratio: float,
    shallow_a: FeatureMap,
    shallow_b: FeatureMap,
    shallow_matches: MatchSet,
    epsilon: float = 1e-6,
) -> np.ndarray:
    """Confidence scores for (N, 2) arrays of layer-l (row, col) cells.

    ``scale_ratio`` is scale(l)/scale(shallowest); each match's footprint is
    the aligned ``s x s`` block of shallowest-layer cells.  Blocks that
    overhang a map edge are clipped to the in-bounds cells.
    """
    s = int(round(scale_ratio))
    if s < 1 or abs(scale_ratio - s) > 1e-9:
        raise DegenerateInput(
            f"scale ratio {scale_ratio} is not a positive integer"
        )
    cells_a = np.asarray(cells_a, dtype=np.int64).reshape(-1, 2)
    cells_b = np.asarray(cells_b, dtype=np.int64).reshape(-1, 2)
    n = cells_a.shape[0]
    if cells_b.shape[0] != n:
        raise ShapeMismatch("cells_a and cells_b must pair up")
    if n and (cells_a.min() < 0 or cells_b.min() < 0):
        raise DegenerateInput("cell coordinates must be non-negative")
    if tuple(shallow_matches.shape_a) != (shallow_a.height, shallow_a.width) or (
        tuple(shallow_matches.shape_b) != (shallow_b.height, shallow_b.width)
    ):
        raise ShapeMismatch("shallow match set does not belong to the shallow maps")
    if n == 0:
        return np.empty(0, dtype=np.float64)
    offsets = np.stack(
        np.meshgrid(np.arange(s), np.arange(s), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    qa_rows = cells_a[:, 0, None] * s + offsets[None, :, 0]
    qa_cols = cells_a[:, 1, None] * s + offsets[None, :, 1]
    qb_rows = cells_b[:, 0, None] * s + offsets[None, :, 0]
    qb_cols = cells_b[:, 1, None] * s + offsets[None, :, 1]
    in_bounds = (
        (qa_rows < shallow_a.height)
        & (qa_cols < shallow_a.width)
        & (qb_rows < shallow_b.height)
        & (qb_cols < shallow_b.width)
    )
    qa_flat = qa_rows * shallow_a.width + qa_cols
    qb_flat = qb_rows * shallow_b.width + qb_cols
    keys = qa_flat.astype(np.int64) * np.int64(shallow_b.cells) + qb_flat
    shallow_keys = shallow_matches.pair_keys()
    pos = np.searchsorted(shallow_keys, keys)
    pos_clipped = np.minimum(pos, max(len(shallow_keys) - 1, 0))
    member = in_bounds & (
        (shallow_keys[pos_clipped] == keys)
        if len(shallow_keys)
        else np.zeros_like(in_bounds)
    )
    rows, cols = np.nonzero(member)
    if rows.size == 0:
        return np.zeros(n, dtype=np.float64)
    d = _pair_distances_f64(
        shallow_a, shallow_b, qa_flat[rows, cols], qb_flat[rows, cols]
    )
    contrib = 1.0 / np.maximum(d, epsilon)
    return np.bincount(rows, weights=contrib, minlength=n)


def score_matches(
    matches: MatchSet,
    scale_ratio: float,
    shallow_a: FeatureMap,
    shallow_b: FeatureMap,
    shallow_matches: MatchSet,
    epsilon: float = 1e-6,
) -> np.ndarray:
    """Confidence scores for every match in a MatchSet (vectorized)."""
    if len(matches) == 0:
        return np.empty(0, dtype=np.float64)
    return score_cells(
        matches.cells_a(),
        matches.cells_b(),
        scale_ratio,
        shallow_a,
        shallow_b,
        shallow_matches,
        epsilon,
    )


def confidence_score(
    cell_a,
    cell_b,
    scale_ratio: float,
    shallow_a: FeatureMap,
    shallow_b: FeatureMap,
    shallow_matches: MatchSet,
    epsilon: float = 1e-6,
) -> float:
    """Confidence of a single match given by its layer cells (row, col)."""
    return float(
        score_cells(
            np.asarray([cell_a]),
            np.asarray([cell_b]),
            scale_ratio,
            shallow_a,
            shallow_b,
            shallow_matches,
            epsilon,
        )[0]
    )


def select_top_confident(matches: MatchSet, k: int = 8) -> MatchSet:
    """The k most confident matches, deterministically ordered.

    Ties break by (confidence desc, distance asc, A cell index asc).  The
    returned subset is in selection order, not A-index order.
    """
    if len(matches) < k:
        raise InsufficientMatches(
            f"need {k} scored matches, have {len(matches)}"
        )
    if np.any(np.isnan(matches.confidence)):
        raise DegenerateInput("matches must be scored before selection")
    order = np.lexsort((matches.pa, matches.distance, -matches.confidence))
    return matches.take(order[:k])


def filter_by_epipolar(
    matches: MatchSet,
    f: np.ndarray,
    threshold: float,
    fmap_a: FeatureMap,
    fmap_b: FeatureMap,
) -> MatchSet:
    """Keep matches whose patch centers have Sampson distance <= threshold."""
    if len(matches) == 0:
        return matches
    pts_a = cells_to_image(matches.cells_a(), fmap_a)
    pts_b = cells_to_image(matches.cells_b(), fmap_b)
    d = sampson_distances(f, pts_a, pts_b)
    return matches.take(d <= threshold)


def _ragged_arange(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenate arange(start, start+length) for every row."""
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offsets = np.repeat(np.cumsum(lengths) - lengths, lengths)
    return np.arange(total, dtype=np.int64) - offsets + np.repeat(starts, lengths)


def _children_mask(
    parents: MatchSet,
    ratio: int,
    map_a: FeatureMap,
    map_b: FeatureMap,
    margin: int = 1,
) -> CandidateMask:
    """Hierarchical candidate restriction from layer l+1 matches to layer l.

    Every child cell (the ``ratio x ratio`` block refining a parent's A
    cell) may match within the block refining the parent's B cell plus a
    ``margin``-cell ring, clipped to the map.
    """
    cells_a = parents.cells_a()
    cells_b = parents.cells_b()
    n_parents = len(parents)
    width_a, width_b = map_a.width, map_b.width

    row_lo = np.maximum(cells_b[:, 0] * ratio - margin, 0)
    row_hi = np.minimum(cells_b[:, 0] * ratio + ratio + margin, map_b.height)
    col_lo = np.maximum(cells_b[:, 1] * ratio - margin, 0)
    col_hi = np.minimum(cells_b[:, 1] * ratio + ratio + margin, map_b.width)
    n_rows = row_hi - row_lo
    n_cols = col_hi - col_lo
    block_sizes = n_rows * n_cols

    # B candidate pool, parent by parent, in ascending flat order.
    block_rows = _ragged_arange(row_lo, n_rows)
    rows_rep = np.repeat(block_rows, np.repeat(n_cols, n_rows))
    col_starts = np.repeat(col_lo, n_rows)
    col_lengths = np.repeat(n_cols, n_rows)
    cols_rep = _ragged_arange(col_starts, col_lengths)
    pool = rows_rep * width_b + cols_rep
    pool_starts = np.cumsum(block_sizes) - block_sizes

    # Each parent owns ratio*ratio disjoint A children.
    offsets = np.stack(
        np.meshgrid(np.arange(ratio), np.arange(ratio), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    child_rows = cells_a[:, 0, None] * ratio + offsets[None, :, 0]
    child_cols = cells_a[:, 1, None] * ratio + offsets[None, :, 1]
    child_flat = (child_rows * width_a + child_cols).reshape(-1)
    child_parent = np.repeat(np.arange(n_parents, dtype=np.int64), ratio * ratio)

    counts = np.zeros(map_a.cells, dtype=np.int64)
    counts[child_flat] = block_sizes[child_parent]
    indptr = np.zeros(map_a.cells + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    order = np.argsort(child_flat, kind="stable")
    sorted_parent = child_parent[order]
    gather = _ragged_arange(
        pool_starts[sorted_parent], block_sizes[sorted_parent]
    )
    return CandidateMask(
        indptr=indptr,
        indices=pool[gather],
        cells_a=map_a.cells,
        cells_b=map_b.cells,
    )


def _estimate_f(pts_a: np.ndarray, pts_b: np.ndarray):
    """eight_point that tolerates degeneracy: returns (F, degenerate_flag)."""
    try:
        return eight_point(pts_a, pts_b), False
    except IllConditioned as exc:
        return exc.matrix, True


def _check_compatible(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid):
    if len(pyr_a) != len(pyr_b):
        raise ShapeMismatch("pyramids have different layer counts")
    for ma, mb in zip(pyr_a.layers, pyr_b.layers):
        if ma.scale != mb.scale or ma.channels != mb.channels:
            raise ShapeMismatch(
                f"layer {ma.layer}: maps disagree on scale or channels"
            )


def _select_layers(pyr: FeaturePyramid, cfg: CascadeConfig):
    if cfg.layers is None:
        selected = list(range(len(pyr)))
    else:
        selected = sorted(int(l) for l in cfg.layers)
        if len(set(selected)) != len(selected):
            raise DegenerateInput("layer list has duplicates")
        if selected[0] < 0 or selected[-1] >= len(pyr):
            raise DegenerateInput(
                f"layer list {selected} outside pyramid of {len(pyr)} layers"
            )
    if len(selected) < 2:
        raise DegenerateInput("the cascade needs at least 2 layers")
    return selected


def _integer_ratio(coarse: FeatureMap, fine: FeatureMap) -> int:
    ratio = coarse.scale / fine.scale
    r = int(round(ratio))
    if r < 2 or abs(ratio - r) > 1e-9:
        raise ShapeMismatch(
            f"scale ratio {ratio} between layers {coarse.layer} and "
            f"{fine.layer} must be an integer >= 2"
        )
    if coarse.height * r != fine.height or coarse.width * r != fine.width:
        raise ShapeMismatch(
            f"layer {fine.layer} grid is not an exact {r}x refinement of "
            f"layer {coarse.layer}"
        )
    return r


def cascade_match(
    pyr_a: FeaturePyramid, pyr_b: FeaturePyramid, cfg: CascadeConfig | None = None
) -> CascadeResult:
    """Run the full deepest-to-shallowest matching cascade.

    Raises
    ------
    InsufficientSeedMatches
        Fewer than ``cfg.top_k`` matches at the deepest layer; the partial
        diagnostics ride on the exception.
    """
    cfg = cfg or CascadeConfig()
    _check_compatible(pyr_a, pyr_b)
    selected = _select_layers(pyr_a, cfg)
    shallowest = selected[0]
    deepest = selected[-1]
    sh_a, sh_b = pyr_a[shallowest], pyr_b[shallowest]

    # Global shallowest-layer match set: membership oracle for confidence
    # scoring.
    shallow_matches = dense_nn_match(
        sh_a, sh_b, cfg.ratio_for(shallowest), cfg.mutual
    )
    shallow_keys = shallow_matches.pair_keys()

    deep_a, deep_b = pyr_a[deepest], pyr_b[deepest]
    deep_matches = dense_nn_match(
        deep_a, deep_b, cfg.ratio_for(deepest), cfg.mutual
    )
    diagnostics = []
    if len(deep_matches) < cfg.top_k:
        diagnostics.append(
            LayerDiagnostics(
                layer=deepest,
                scale=deep_a.scale,
                matched=len(deep_matches),
                retained=len(deep_matches),
                inlier_ratio=0.0,
                f=None,
                degenerate=False,
                fallback=False,
            )
        )
        raise InsufficientSeedMatches(
            f"deepest layer produced {len(deep_matches)} matches; "
            f"{cfg.top_k} needed to seed the fundamental matrix",
            diagnostics=diagnostics,
        )

    scores = score_matches(
        deep_matches,
        deep_a.scale / sh_a.scale,
        sh_a,
        sh_b,
        shallow_matches,
        cfg.epsilon,
    )
    deep_matches = deep_matches.with_confidence(scores)
    seeds = select_top_confident(deep_matches, cfg.top_k)
    try:
        f_current, degenerate = _estimate_f(
            cells_to_image(seeds.cells_a(), deep_a),
            cells_to_image(seeds.cells_b(), deep_b),
        )
    except DegenerateInput as exc:
        raise InsufficientSeedMatches(
            f"seed matches are geometrically degenerate at layer {deepest}: {exc}",
            diagnostics=diagnostics,
        ) from exc
    diagnostics.append(
        LayerDiagnostics(
            layer=deepest,
            scale=deep_a.scale,
            matched=len(deep_matches),
            retained=len(deep_matches),
            inlier_ratio=1.0,
            f=f_current,
            degenerate=degenerate,
            fallback=False,
        )
    )
    captured = [] if cfg.keep_layer_matches else None
    if captured is not None:
        captured.append(
            LayerMatches(
                layer=deepest,
                points_a=cells_to_image(deep_matches.cells_a(), deep_a),
                points_b=cells_to_image(deep_matches.cells_b(), deep_b),
            )
        )

    survivors = deep_matches
    parent_map_a = deep_a
    for layer in reversed(selected[:-1]):
        map_a, map_b = pyr_a[layer], pyr_b[layer]
        ratio = _integer_ratio(parent_map_a, map_a)
        mask = _children_mask(survivors, ratio, map_a, map_b)
        raw = dense_nn_match(
            map_a, map_b, cfg.ratio_for(layer), cfg.mutual, candidates=mask
        )
        threshold = cfg.sampson_threshold(map_a.scale)
        filtered = filter_by_epipolar(raw, f_current, threshold, map_a, map_b)
        fallback = False
        if len(filtered) >= cfg.min_matches:
            try:
                f_current, degenerate = _estimate_f(
                    cells_to_image(filtered.cells_a(), map_a),
                    cells_to_image(filtered.cells_b(), map_b),
                )
            except DegenerateInput:
                fallback = True
        else:
            fallback = True
        diagnostics.append(
            LayerDiagnostics(
                layer=layer,
                scale=map_a.scale,
                matched=len(raw),
                retained=len(filtered),
                inlier_ratio=(len(filtered) / len(raw)) if len(raw) else 0.0,
                f=f_current,
                degenerate=degenerate,
                fallback=fallback,
            )
        )
        if captured is not None:
            captured.append(
                LayerMatches(
                    layer=layer,
                    points_a=cells_to_image(filtered.cells_a(), map_a),
                    points_b=cells_to_image(filtered.cells_b(), map_b),
                )
            )
        survivors = filtered
        parent_map_a = map_a

    # The last re-estimation can strand matches beyond the shallowest
    # threshold; one final pass restores the structural invariant that every
    # reported match is an inlier of the reported matrix.
    final_threshold = cfg.sampson_threshold(sh_a.scale)
    final = filter_by_epipolar(survivors, f_current, final_threshold, sh_a, sh_b)

    # Final confidences are the shallowest-layer scores: membership in the
    # global shallow match set over a 1x1 footprint.
    keys = final.pair_keys()
    pos = np.searchsorted(shallow_keys, keys)
    pos_clipped = np.minimum(pos, max(len(shallow_keys) - 1, 0))
    member = (
        (shallow_keys[pos_clipped] == keys)
        if len(shallow_keys)
        else np.zeros(len(final), dtype=bool)
    )
    confidence = np.where(
        member, 1.0 / np.maximum(final.distance, cfg.epsilon), 0.0
    )

    return CascadeResult(
        points_a=cells_to_image(final.cells_a(), sh_a),
        points_b=cells_to_image(final.cells_b(), sh_b),
        distance=final.distance.copy(),
        confidence=confidence,
        f_final=f_current,
        degenerate=degenerate,
        diagnostics=tuple(diagnostics),
        layer_matches=tuple(captured) if captured is not None else None,
    )
