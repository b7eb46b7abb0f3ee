"""Dense nearest-neighbor matching between feature maps.

Distances are cosine distances ``d = 1 - dot/(|a||b|)``, computed in
float32 over unit-normalized descriptors.  The full distance map between two
layer-0 grids of a VGA image would need tens of gigabytes, so similarities
stream through a blocked matrix product that keeps only per-cell running
best/second-best rows and per-column bests for the mutual check; the
semantics are identical to materializing the whole map.

Tie-breaking is deterministic everywhere: among equal distances the lowest
row-major cell index wins, matching a double-loop scan that only replaces
the incumbent on a strict improvement.

Conventions for degenerate cases (documented, used consistently by tests):
* zero-norm descriptors compare with similarity 0 (distance 1) instead of
  propagating NaN;
* a cell with a single candidate has no second-best evidence, so its ratio
  is 0.0 (accepted by any threshold);
* best and second-best both at distance 0 give ratio 1.0 (rejected by any
  strict threshold), since the competitors are indistinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInput, EmptyCandidates, ShapeMismatch
from .features import FeatureMap

__all__ = [
    "Match",
    "MatchSet",
    "CandidateMask",
    "cosine_similarity",
    "descriptor_distance",
    "dense_nn_match",
]

_GEMM_BLOCK = 256


@dataclass(frozen=True)
class Match:
    """One correspondence in layer-cell coordinates."""

    pa: tuple
    pb: tuple
    distance: float
    ratio: float
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    """Column-oriented match collection for one layer.

    ``pa``/``pb`` are flat row-major cell indices (int64) into maps of shape
    ``shape_a``/``shape_b``; rows are sorted by ``pa`` ascending.  The
    ``confidence`` column is NaN until the cascade scores it.
    """

    layer: int
    shape_a: tuple
    shape_b: tuple
    pa: np.ndarray
    pb: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return self.pa.shape[0]

    def cells_a(self) -> np.ndarray:
        """(N, 2) array of (row, col) cells in map A."""
        width = self.shape_a[1]
        return np.column_stack([self.pa // width, self.pa % width])

    def cells_b(self) -> np.ndarray:
        width = self.shape_b[1]
        return np.column_stack([self.pb // width, self.pb % width])

    def pair_keys(self) -> np.ndarray:
        """Unique int64 key per (pa, pb) pair, for membership tests."""
        cells_b = self.shape_b[0] * self.shape_b[1]
        return self.pa * np.int64(cells_b) + self.pb

    def take(self, selector) -> "MatchSet":
        """Subset by boolean mask or index array; order is preserved."""
        return replace(
            self,
            pa=self.pa[selector],
            pb=self.pb[selector],
            distance=self.distance[selector],
            ratio=self.ratio[selector],
            confidence=self.confidence[selector],
        )

    def with_confidence(self, confidence: np.ndarray) -> "MatchSet":
        confidence = np.asarray(confidence, dtype=np.float64)
        if confidence.shape != self.pa.shape:
            raise ShapeMismatch("confidence column must match the match count")
        return replace(self, confidence=confidence)

    def matches(self):
        """Materialize as a list of :class:`Match` (small sets only)."""
        cells_a = self.cells_a()
        cells_b = self.cells_b()
        return [
            Match(
                pa=(int(cells_a[i, 0]), int(cells_a[i, 1])),
                pb=(int(cells_b[i, 0]), int(cells_b[i, 1])),
                distance=float(self.distance[i]),
                ratio=float(self.ratio[i]),
                confidence=float(self.confidence[i]),
            )
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class CandidateMask:
    """Per-A-cell candidate lists over B cells, CSR-style.

    ``indptr`` has length ``cells_a + 1``; row ``i`` may consider the B cells
    ``indices[indptr[i]:indptr[i+1]]``, stored in ascending order.  A row
    with no candidates simply yields no match.
    """

    indptr: np.ndarray
    indices: np.ndarray
    cells_a: int
    cells_b: int

    @classmethod
    def from_rows(cls, rows, cells_a: int, cells_b: int) -> "CandidateMask":
        """Build from an iterable of per-A-cell candidate index lists."""
        indptr = np.zeros(cells_a + 1, dtype=np.int64)
        chunks = []
        for i, rows_i in enumerate(rows):
            arr = np.unique(np.asarray(rows_i, dtype=np.int64))
            if arr.size and (arr[0] < 0 or arr[-1] >= cells_b):
                raise EmptyCandidates("candidate index outside map B")
            chunks.append(arr)
            indptr[i + 1] = indptr[i] + arr.size
        if len(chunks) != cells_a:
            raise EmptyCandidates("candidate mask rows do not cover map A")
        indices = (
            np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        )
        return cls(indptr=indptr, indices=indices, cells_a=cells_a, cells_b=cells_b)


def _normalized_rows(descriptors: np.ndarray) -> np.ndarray:
    """Unit-normalize rows in float32; zero rows stay zero (similarity 0)."""
    desc = descriptors.astype(np.float32, copy=True)
    norms = np.sqrt(np.einsum("ij,ij->i", desc, desc, dtype=np.float32))
    nonzero = norms > 0
    desc[nonzero] /= norms[nonzero, None]
    return desc


def cosine_similarity(ca, cb) -> float:
    """Cosine similarity of two descriptors, clamped to [-1, 1].

    Zero-norm descriptors compare with similarity 0 by convention.
    Computed in float64 regardless of input dtype.
    """
    a = np.asarray(ca, dtype=np.float64).ravel()
    b = np.asarray(cb, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DegenerateInput("descriptors must have equal dimensions")
    sq_a = float(np.dot(a, a))
    sq_b = float(np.dot(b, b))
    if sq_a == 0.0 or sq_b == 0.0:
        return 0.0
    # sqrt of the product of squared norms makes identical inputs compare
    # at exactly 1.0 (and antipodal ones at exactly -1.0).
    return float(np.clip(np.dot(a, b) / np.sqrt(sq_a * sq_b), -1.0, 1.0))


def descriptor_distance(ca, cb) -> float:
    """Cosine distance 1 - similarity, in [0, 2]."""
    return 1.0 - cosine_similarity(ca, cb)


def _ratio_from_distances(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """Ratio test statistic with the documented degenerate conventions."""
    ratio = np.zeros_like(d1)
    positive = d2 > 0
    ratio[positive] = d1[positive] / d2[positive]
    ratio[(d2 == 0)] = 1.0
    ratio[~np.isfinite(d2)] = 0.0
    return ratio


def _plan_dense(desc_a: np.ndarray, desc_b: np.ndarray):
    """Streaming best/second-best (rows of A) and best (columns) similarities.

    Returns float32 row best/second, int64 row argbest, float32 column best,
    int64 column argbest.  Ties resolve to the lowest index on both axes.
    """
    n_a = desc_a.shape[0]
    n_b = desc_b.shape[0]
    bt = np.ascontiguousarray(desc_b.T)
    row_best = np.empty(n_a, dtype=np.float32)
    row_second = np.empty(n_a, dtype=np.float32)
    row_arg = np.empty(n_a, dtype=np.int64)
    col_best = np.full(n_b, -np.inf, dtype=np.float32)
    col_arg = np.zeros(n_b, dtype=np.int64)
    buffer = np.empty((min(_GEMM_BLOCK, n_a), n_b), dtype=np.float32)
    rows = np.arange(min(_GEMM_BLOCK, n_a))
    for start in range(0, n_a, _GEMM_BLOCK):
        stop = min(start + _GEMM_BLOCK, n_a)
        count = stop - start
        sims = np.matmul(desc_a[start:stop], bt, out=buffer[:count])

        block_col_best = sims.max(axis=0)
        improved = block_col_best > col_best
        n_improved = int(improved.sum())
        if n_improved:
            if n_improved > n_b // 8:
                block_col_arg = np.ascontiguousarray(sims.T).argmax(axis=1)
                col_best[improved] = block_col_best[improved]
                col_arg[improved] = block_col_arg[improved] + start
            else:
                cols = np.nonzero(improved)[0]
                sub = np.ascontiguousarray(sims[:, cols].T)
                col_best[cols] = block_col_best[cols]
                col_arg[cols] = sub.argmax(axis=1) + start

        arg = sims.argmax(axis=1)
        idx = rows[:count]
        best = sims[idx, arg]
        row_best[start:stop] = best
        row_arg[start:stop] = arg
        if n_b > 1:
            sims[idx, arg] = -np.inf
            row_second[start:stop] = sims.max(axis=1)
        else:
            row_second[start:stop] = -np.inf
    return row_best, row_second, row_arg, col_best, col_arg


def _plan_masked(desc_a: np.ndarray, desc_b: np.ndarray, mask: CandidateMask):
    """Best/second/argbest per A row and column bests over masked entries."""
    n_a = desc_a.shape[0]
    n_b = desc_b.shape[0]
    lengths = np.diff(mask.indptr)
    entry_rows = np.repeat(np.arange(n_a, dtype=np.int64), lengths)
    entry_cols = mask.indices
    sims = np.einsum(
        "ij,ij->i", desc_a[entry_rows], desc_b[entry_cols], dtype=np.float32
    )

    row_best = np.full(n_a, -np.inf, dtype=np.float32)
    row_second = np.full(n_a, -np.inf, dtype=np.float32)
    row_arg = np.full(n_a, -1, dtype=np.int64)
    nonempty = lengths > 0
    starts = mask.indptr[:-1][nonempty]
    if sims.size:
        best_vals = np.maximum.reduceat(sims, starts)
        row_best[nonempty] = best_vals
        # First entry achieving the row maximum; entries are stored with
        # ascending B index, so this is the lowest-index tie-break.
        positions = np.arange(sims.size, dtype=np.int64)
        hit = sims == np.repeat(
            row_best[nonempty].astype(np.float32), lengths[nonempty]
        )
        big = np.int64(sims.size)
        first_hit = np.minimum.reduceat(np.where(hit, positions, big), starts)
        row_arg[nonempty] = entry_cols[first_hit]
        # Second best: mask out the winning entry and reduce again.
        sims_wo_best = sims.copy()
        sims_wo_best[first_hit] = -np.inf
        row_second[nonempty] = np.maximum.reduceat(sims_wo_best, starts)

        col_best = np.full(n_b, -np.inf, dtype=np.float32)
        np.maximum.at(col_best, entry_cols, sims)
        col_arg = np.full(n_b, np.int64(n_a), dtype=np.int64)
        col_hit = sims == col_best[entry_cols]
        np.minimum.at(col_arg, entry_cols[col_hit], entry_rows[col_hit])
    else:
        col_best = np.full(n_b, -np.inf, dtype=np.float32)
        col_arg = np.full(n_b, np.int64(n_a), dtype=np.int64)
    return row_best, row_second, row_arg, col_best, col_arg


def dense_nn_match(
    fa: FeatureMap,
    fb: FeatureMap,
    ratio_threshold: float = 0.9,
    mutual: bool = True,
    candidates: CandidateMask | None = None,
) -> MatchSet:
    """Match every cell of ``fa`` to its nearest neighbor in ``fb``.

    A cell emits a match iff its best/second-best cosine-distance ratio is
    strictly below ``ratio_threshold`` and, when ``mutual`` is set, the best
    B cell's own best A cell (within the reverse restriction of
    ``candidates``) is the emitting cell.  The returned set is sorted by A
    cell index and is invariant to any uniform positive rescaling of either
    map's descriptors.
    """
    if fa.layer != fb.layer:
        raise ShapeMismatch("maps must come from the same pyramid layer")
    if fa.channels != fb.channels:
        raise ShapeMismatch(
            f"channel mismatch: {fa.channels} vs {fb.channels}"
        )
    if not (0.0 < ratio_threshold <= 1.0):
        raise DegenerateInput("ratio threshold must lie in (0, 1]")
    desc_a = _normalized_rows(fa.descriptors())
    desc_b = _normalized_rows(fb.descriptors())
    if candidates is None:
        plan = _plan_dense(desc_a, desc_b)
    else:
        if candidates.cells_a != fa.cells or candidates.cells_b != fb.cells:
            raise EmptyCandidates(
                f"candidate mask is {candidates.cells_a}x{candidates.cells_b}; "
                f"maps have {fa.cells}x{fb.cells} cells"
            )
        plan = _plan_masked(desc_a, desc_b, candidates)
    row_best, row_second, row_arg, col_best, col_arg = plan

    matched = row_arg >= 0 if candidates is not None else np.ones(
        row_arg.shape, dtype=bool
    )
    d1 = np.clip(1.0 - row_best.astype(np.float64), 0.0, 2.0)
    # Clamp negatives from similarity rounding but keep the +inf that marks
    # a missing second candidate (np.clip would collapse it to 2).
    d2 = np.maximum(1.0 - row_second.astype(np.float64), 0.0)
    ratio = _ratio_from_distances(d1, d2)
    keep = matched & (ratio < ratio_threshold)
    if mutual:
        safe_arg = np.where(row_arg >= 0, row_arg, 0)
        keep &= col_arg[safe_arg] == np.arange(row_arg.shape[0], dtype=np.int64)
    pa = np.nonzero(keep)[0].astype(np.int64)
    return MatchSet(
        layer=fa.layer,
        shape_a=(fa.height, fa.width),
        shape_b=(fb.height, fb.width),
        pa=pa,
        pb=row_arg[pa],
        distance=d1[pa],
        ratio=ratio[pa],
        confidence=np.full(pa.shape[0], np.nan),
    )
