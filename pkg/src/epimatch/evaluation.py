"""Metric engines and dataset adapters for correspondence evaluation.

Implements the standard benchmark protocols: mean matching accuracy over
pixel thresholds, homography accuracy from DLT re-estimation, pose AUC by
exact piecewise-constant integration of the empirical error CDF, and
epipolar matching precision.  Dataset adapters read the usual sequence
layout (numbered images plus ASCII homography files) and JSONL pose-pair
lists.

Empty match sets are a reporting convention here, not an error: metric
functions return their zero value with an ``empty`` flag set so callers can
distinguish "no matches" from "all matches wrong".
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    AmbiguousCheirality,
    DegenerateInput,
    IllConditioned,
    MalformedMatrix,
    MalformedRecord,
    MissingFile,
    ProjectionAtInfinity,
)
from .geometry import (
    CameraIntrinsics,
    apply_homography,
    calibrate_points,
    corner_error,
    decompose_essential,
    eight_point,
    essential_from_fundamental,
    essential_from_pose,
    fundamental_from_pose,
    homography_dlt,
    pose_angular_error,
    sampson_distances,
)
from .synthetic import (
    SceneSpec,
    SyntheticScene,
    WarpScene,
    WarpSpec,
    synth_scene,
    synth_warp_pair,
)

__all__ = [
    "MMA_THRESHOLDS",
    "HOMOGRAPHY_THRESHOLDS",
    "POSE_THRESHOLDS",
    "PRECISION_EPIPOLAR_THRESHOLD",
    "HomographyGT",
    "PoseGT",
    "MmaResult",
    "HomographyAccuracy",
    "PrecisionResult",
    "PairRecord",
    "MetricReport",
    "HpatchesSequence",
    "PosePair",
    "mma",
    "homography_accuracy",
    "pose_auc",
    "matching_precision",
    "pose_error_for_pair",
    "ransac_fundamental",
    "summarize_mma",
    "summarize_homography",
    "summarize_pose",
    "load_hpatches_sequence",
    "load_pose_pairs",
    "synth_scene",
    "synth_warp_pair",
    "SceneSpec",
    "SyntheticScene",
    "WarpSpec",
    "WarpScene",
]

MMA_THRESHOLDS = tuple(range(1, 11))
HOMOGRAPHY_THRESHOLDS = (1.0, 3.0, 5.0)
POSE_THRESHOLDS = (5.0, 10.0, 20.0)
PRECISION_EPIPOLAR_THRESHOLD = 5e-4


@dataclass(frozen=True)
class HomographyGT:
    """Ground truth for a planar pair: pB ~ h @ pA."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise DegenerateInput("ground-truth homography must be 3x3")
        object.__setattr__(self, "h", h)


@dataclass(frozen=True)
class PoseGT:
    """Ground truth for a two-view pair: X_B = rotation @ X_A + translation."""

    k_a: CameraIntrinsics
    k_b: CameraIntrinsics
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3):
            raise DegenerateInput("rotation must be 3x3")
        if t.shape != (3,):
            raise DegenerateInput("translation must be a 3-vector")
        if np.linalg.norm(t) == 0:
            raise DegenerateInput("translation must be nonzero")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def fundamental(self) -> np.ndarray:
        return fundamental_from_pose(
            self.k_a, self.k_b, self.rotation, self.translation
        )

    @property
    def essential(self) -> np.ndarray:
        return essential_from_pose(self.rotation, self.translation)


@dataclass(frozen=True)
class MmaResult:
    """Per-pair matching accuracy at each pixel threshold."""

    thresholds: tuple
    fractions: np.ndarray
    empty: bool


@dataclass(frozen=True)
class HomographyAccuracy:
    """Corner error of the re-estimated homography, thresholded."""

    corner_error: float
    success: tuple
    failed: bool


@dataclass(frozen=True)
class PrecisionResult:
    """Fraction of matches consistent with the ground-truth geometry."""

    fraction: float
    empty: bool


def _as_xy(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateInput("points must be (N, 2)")
    return pts


def _unwrap_h(h_gt) -> np.ndarray:
    if isinstance(h_gt, HomographyGT):
        return h_gt.h
    h = np.asarray(h_gt, dtype=np.float64)
    if h.shape != (3, 3):
        raise DegenerateInput("ground-truth homography must be 3x3")
    return h


def mma(points_a, points_b, h_gt, thresholds=MMA_THRESHOLDS) -> MmaResult:
    """Mean matching accuracy of one pair over pixel thresholds.

    For each threshold t the score is the fraction of matches whose
    ground-truth reprojection error ``|h_gt(pA) - pB|`` is <= t.  An empty
    match list reports 0.0 at every threshold with ``empty`` set.
    """
    h = _unwrap_h(h_gt)
    thresholds = tuple(float(t) for t in thresholds)
    pts_a = _as_xy(points_a)
    pts_b = _as_xy(points_b)
    if pts_a.shape != pts_b.shape:
        raise DegenerateInput("match arrays must have equal shapes")
    if pts_a.shape[0] == 0:
        return MmaResult(
            thresholds=thresholds,
            fractions=np.zeros(len(thresholds)),
            empty=True,
        )
    err = np.linalg.norm(apply_homography(h, pts_a) - pts_b, axis=1)
    fractions = np.array([(err <= t).mean() for t in thresholds])
    return MmaResult(thresholds=thresholds, fractions=fractions, empty=False)


def homography_accuracy(
    points_a,
    points_b,
    h_gt,
    width: int,
    height: int,
    thresholds=HOMOGRAPHY_THRESHOLDS,
) -> HomographyAccuracy:
    """Re-estimate a homography from matches and threshold its corner error.

    Pairs with fewer than 4 matches, or whose DLT estimate is degenerate,
    count as failures at every threshold (corner error +inf) rather than
    raising; benchmark protocols score failures, they do not skip them.
    """
    h = _unwrap_h(h_gt)
    thresholds = tuple(float(t) for t in thresholds)
    pts_a = _as_xy(points_a)
    pts_b = _as_xy(points_b)
    if pts_a.shape != pts_b.shape:
        raise DegenerateInput("match arrays must have equal shapes")
    if pts_a.shape[0] < 4:
        return HomographyAccuracy(
            corner_error=float("inf"),
            success=tuple(False for _ in thresholds),
            failed=True,
        )
    try:
        h_est = homography_dlt(pts_a, pts_b)
        err = corner_error(h_est, h, width, height)
    except (DegenerateInput, IllConditioned, ProjectionAtInfinity):
        return HomographyAccuracy(
            corner_error=float("inf"),
            success=tuple(False for _ in thresholds),
            failed=True,
        )
    return HomographyAccuracy(
        corner_error=float(err),
        success=tuple(bool(err <= t) for t in thresholds),
        failed=False,
    )


def pose_auc(errors_deg, thresholds=POSE_THRESHOLDS) -> np.ndarray:
    """Area under the pose-accuracy curve, one value per threshold.

    ``errors_deg`` holds per-pair angular errors in degrees; failed pairs
    enter as +inf.  For a threshold T the score is the exact integral of
    the empirical CDF ``e -> fraction(errors <= e)`` over [0, T], divided
    by T.  Each error e <= T therefore contributes (T - e) / (n T); the
    integral of a piecewise-constant CDF needs no grid.
    """
    errors = np.asarray(errors_deg, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise DegenerateInput("need at least one pose error")
    if np.any(np.isnan(errors)) or np.any(errors < 0):
        raise DegenerateInput("pose errors must be non-negative (or +inf)")
    out = []
    for t in thresholds:
        t = float(t)
        if t <= 0:
            raise DegenerateInput("thresholds must be positive")
        inside = errors[errors <= t]
        out.append(float(np.sum(t - inside) / (errors.size * t)))
    return np.asarray(out)


def _symmetric_epipolar_sq(e, x_a, x_b) -> np.ndarray:
    """Squared symmetric epipolar distance in normalized coordinates."""
    ones = np.ones((x_a.shape[0], 1))
    ha = np.hstack([x_a, ones])
    hb = np.hstack([x_b, ones])
    line_b = ha @ e.T
    line_a = hb @ e
    resid = np.einsum("ij,ij->i", hb, line_b) ** 2
    denom_b = line_b[:, 0] ** 2 + line_b[:, 1] ** 2
    denom_a = line_a[:, 0] ** 2 + line_a[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = resid * (1.0 / denom_b + 1.0 / denom_a)
    return np.where((denom_a > 0) & (denom_b > 0), d, np.inf)


def matching_precision(
    points_a,
    points_b,
    gt,
    epipolar_threshold: float = PRECISION_EPIPOLAR_THRESHOLD,
    reprojection_threshold: float = 3.0,
) -> PrecisionResult:
    """Fraction of matches consistent with the ground truth.

    Two-view ground truth uses the squared symmetric epipolar distance in
    normalized camera coordinates against ``epipolar_threshold``; planar
    ground truth uses the reprojection error in pixels against
    ``reprojection_threshold``.  Empty input reports 0.0 with the flag set.
    """
    pts_a = _as_xy(points_a)
    pts_b = _as_xy(points_b)
    if pts_a.shape != pts_b.shape:
        raise DegenerateInput("match arrays must have equal shapes")
    if pts_a.shape[0] == 0:
        return PrecisionResult(fraction=0.0, empty=True)
    if isinstance(gt, PoseGT):
        t_unit = gt.translation / np.linalg.norm(gt.translation)
        e = essential_from_pose(gt.rotation, t_unit)
        x_a = calibrate_points(gt.k_a, pts_a)
        x_b = calibrate_points(gt.k_b, pts_b)
        d = _symmetric_epipolar_sq(e, x_a, x_b)
        return PrecisionResult(
            fraction=float((d < epipolar_threshold).mean()), empty=False
        )
    h = _unwrap_h(gt)
    err = np.linalg.norm(apply_homography(h, pts_a) - pts_b, axis=1)
    return PrecisionResult(
        fraction=float((err < reprojection_threshold).mean()), empty=False
    )


def pose_error_for_pair(f, points_a, points_b, gt: PoseGT) -> float:
    """Angular pose error (degrees) of a fundamental matrix vs ground truth.

    Decomposes F through the intrinsics into (R, t) using the matches for
    cheirality voting, then takes the max of rotation and translation
    direction error.  Estimation failures return +inf, the convention for
    failed pairs in AUC aggregation.
    """
    pts_a = _as_xy(points_a)
    pts_b = _as_xy(points_b)
    if pts_a.shape[0] == 0:
        return float("inf")
    try:
        e = essential_from_fundamental(f, gt.k_a, gt.k_b)
        x_a = calibrate_points(gt.k_a, pts_a)
        x_b = calibrate_points(gt.k_b, pts_b)
        r, t = decompose_essential(e, x_a, x_b)
    except (AmbiguousCheirality, DegenerateInput, IllConditioned):
        return float("inf")
    return float(pose_angular_error(r, t, gt.rotation, gt.translation))


def ransac_fundamental(
    points_a,
    points_b,
    threshold: float = 1.0,
    iterations: int = 500,
    seed: int = 0,
):
    """Seeded RANSAC wrapper around the eight-point solver.

    Samples 8-point subsets, scores Sampson inliers at ``threshold``
    (square pixels), then re-fits on the best consensus set.  Fully
    deterministic for a fixed seed.  Returns (f, inlier_mask).
    """
    pts_a = _as_xy(points_a)
    pts_b = _as_xy(points_b)
    n = pts_a.shape[0]
    if pts_a.shape != pts_b.shape or n < 8:
        raise DegenerateInput("RANSAC needs at least 8 matched points")
    rng = np.random.default_rng(seed)
    best_f = None
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            f = eight_point(pts_a[idx], pts_b[idx])
        except (DegenerateInput, IllConditioned):
            continue
        mask = sampson_distances(f, pts_a, pts_b) <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_f, best_mask, best_count = f, mask, count
    if best_f is None:
        raise DegenerateInput("no RANSAC sample produced a valid estimate")
    if best_count >= 8:
        try:
            refit = eight_point(pts_a[best_mask], pts_b[best_mask])
            mask = sampson_distances(refit, pts_a, pts_b) <= threshold
            if int(mask.sum()) >= best_count:
                return refit, mask
        except (DegenerateInput, IllConditioned):
            pass
    return best_f, best_mask


@dataclass(frozen=True)
class PairRecord:
    """One evaluated pair: identity, match count, metric values."""

    pair_id: str
    match_count: int
    metrics: dict


@dataclass(frozen=True)
class MetricReport:
    """Per-pair records plus aggregate metrics, serializable."""

    records: tuple
    aggregates: dict

    def to_json(self) -> str:
        payload = {
            "pairs": [
                {
                    "pair_id": r.pair_id,
                    "match_count": r.match_count,
                    "metrics": {k: r.metrics[k] for k in sorted(r.metrics)},
                }
                for r in sorted(self.records, key=lambda r: r.pair_id)
            ],
            "aggregates": {k: self.aggregates[k] for k in sorted(self.aggregates)},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        keys = sorted({k for r in self.records for k in r.metrics})
        buf = io.StringIO()
        buf.write(",".join(["pair_id", "match_count"] + keys) + "\n")
        for r in sorted(self.records, key=lambda r: r.pair_id):
            row = [r.pair_id, str(r.match_count)]
            row += [repr(float(r.metrics.get(k, float("nan")))) for k in keys]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


def summarize_mma(results, thresholds=MMA_THRESHOLDS) -> dict:
    """Mean MMA curve over pairs; empty pairs count as zero."""
    if not results:
        raise DegenerateInput("no pairs to aggregate")
    stack = np.stack([np.asarray(r.fractions) for r in results])
    means = stack.mean(axis=0)
    return {f"mma@{int(t)}": float(v) for t, v in zip(thresholds, means)}


def summarize_homography(results, thresholds=HOMOGRAPHY_THRESHOLDS) -> dict:
    """Fraction of pairs whose corner error clears each threshold."""
    if not results:
        raise DegenerateInput("no pairs to aggregate")
    out = {}
    for i, t in enumerate(thresholds):
        out[f"acc@{int(t)}px"] = float(
            np.mean([1.0 if r.success[i] else 0.0 for r in results])
        )
    out["failure_rate"] = float(np.mean([1.0 if r.failed else 0.0 for r in results]))
    return out


def summarize_pose(errors_deg, precisions, thresholds=POSE_THRESHOLDS) -> dict:
    """Pose AUC at each threshold plus mean matching precision."""
    aucs = pose_auc(errors_deg, thresholds)
    out = {f"auc@{int(t)}deg": float(a) for t, a in zip(thresholds, aucs)}
    out["precision"] = float(np.mean([p.fraction for p in precisions]))
    return out


@dataclass(frozen=True)
class HpatchesSequence:
    """One benchmark sequence: six images, five (1, k) homography pairs."""

    name: str
    images: tuple
    ground_truth: tuple

    def pairs(self):
        """(index_a, index_b, HomographyGT) triples, 0-based indices."""
        return tuple(
            (0, k + 1, gt) for k, gt in enumerate(self.ground_truth)
        )


_IMAGE_EXTENSIONS = (".ppm", ".png", ".jpg", ".jpeg", ".pgm", ".bmp")


def _load_image(directory: Path, stem: str) -> np.ndarray:
    for ext in _IMAGE_EXTENSIONS:
        path = directory / f"{stem}{ext}"
        if path.exists():
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"), dtype=np.uint8)
    raise MissingFile(
        f"no image {stem}.* in {directory} (tried {', '.join(_IMAGE_EXTENSIONS)})"
    )


def _parse_matrix_file(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    tokens = path.read_text().split()
    if len(tokens) != 9:
        raise MalformedMatrix(
            f"{path}: expected 9 floats, found {len(tokens)} tokens"
        )
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise MalformedMatrix(f"{path}: {exc}") from exc
    return np.asarray(values, dtype=np.float64).reshape(3, 3)


def load_hpatches_sequence(directory) -> HpatchesSequence:
    """Read one sequence directory: images 1..6 and files H_1_2 .. H_1_6."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"sequence directory {directory} does not exist")
    images = tuple(_load_image(directory, str(k)) for k in range(1, 7))
    ground_truth = tuple(
        HomographyGT(_parse_matrix_file(directory / f"H_1_{k}"))
        for k in range(2, 7)
    )
    return HpatchesSequence(
        name=directory.name, images=images, ground_truth=ground_truth
    )


@dataclass(frozen=True)
class PosePair:
    """One two-view evaluation pair: image paths plus pose ground truth."""

    image_a: str
    image_b: str
    gt: PoseGT


def _matrix_from(record: dict, key: str, rows: int, cols: int) -> np.ndarray:
    value = np.asarray(record[key], dtype=np.float64)
    if value.shape != (rows, cols) and not (
        cols == 1 and value.shape == (rows,)
    ):
        raise ValueError(f"field {key} must be {rows}x{cols}")
    return value.reshape(rows, cols) if cols > 1 else value.reshape(rows)


def load_pose_pairs(list_file) -> tuple:
    """Parse a JSONL pose-pair list into PosePair records.

    Each line holds one JSON object with fields imgA, imgB (paths relative
    to the list file), KA, KB, R (3x3 nested lists), and t (3-vector).
    Translations are normalized to unit length.  Any malformed line raises
    MalformedRecord naming the 1-based line number.
    """
    list_file = Path(list_file)
    if not list_file.exists():
        raise MissingFile(str(list_file))
    base = list_file.parent
    pairs = []
    for lineno, line in enumerate(list_file.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            img_a = str(base / record["imgA"])
            img_b = str(base / record["imgB"])
            k_a = CameraIntrinsics.from_matrix(_matrix_from(record, "KA", 3, 3))
            k_b = CameraIntrinsics.from_matrix(_matrix_from(record, "KB", 3, 3))
            rotation = _matrix_from(record, "R", 3, 3)
            translation = _matrix_from(record, "t", 3, 1)
            norm = np.linalg.norm(translation)
            if norm == 0:
                raise ValueError("translation must be nonzero")
            gt = PoseGT(
                k_a=k_a,
                k_b=k_b,
                rotation=rotation,
                translation=translation / norm,
            )
        except (KeyError, TypeError, ValueError, DegenerateInput) as exc:
            raise MalformedRecord(f"{list_file} line {lineno}: {exc}") from exc
        pairs.append(PosePair(image_a=img_a, image_b=img_b, gt=gt))
    return tuple(pairs)
