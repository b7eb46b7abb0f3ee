"""Two-view geometry primitives.

Point conditioning, eight-point fundamental-matrix estimation, Sampson
distance, essential-matrix pose recovery, homography fitting, and the error
metrics built on them.  All functions are pure and operate on float64 numpy
arrays; points are (N, 2) arrays of (x, y) pixel coordinates unless stated
otherwise.

Conventions
-----------
* The epipolar constraint is written ``p_B^T F p_A = 0`` with homogeneous
  points ``(x, y, 1)``.
* A valid fundamental matrix has rank exactly 2, Frobenius norm 1, and its
  largest-magnitude entry positive (so estimates are comparable across runs).
* Relative pose maps camera-A coordinates to camera-B: ``X_B = R X_A + t``;
  the translation is a direction only (unit norm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AmbiguousCheirality,
    DegenerateInput,
    IllConditioned,
    ProjectionAtInfinity,
)

__all__ = [
    "CameraIntrinsics",
    "hartley_normalize",
    "eight_point",
    "enforce_rank2",
    "normalize_fundamental",
    "sampson_distance",
    "sampson_distances",
    "essential_from_fundamental",
    "essential_from_pose",
    "fundamental_from_pose",
    "decompose_essential",
    "triangulate_points",
    "pose_angular_error",
    "homography_dlt",
    "apply_homography",
    "corner_error",
    "calibrate_points",
    "skew",
]

_CONDITIONING_BOUND = 0.95
_RANK_DEFICIENT_REL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, k) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=float)
        if k.shape != (3, 3):
            raise DegenerateInput("intrinsics matrix must be 3x3")
        return cls(
            fx=float(k[0, 0]),
            fy=float(k[1, 1]),
            cx=float(k[0, 2]),
            cy=float(k[1, 2]),
            skew=float(k[0, 1]),
        )


def _k_matrix(k) -> np.ndarray:
    if isinstance(k, CameraIntrinsics):
        return k.matrix
    k = np.asarray(k, dtype=float)
    if k.shape != (3, 3):
        raise DegenerateInput("intrinsics must be CameraIntrinsics or 3x3")
    return k


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateInput("points must be an (N, 2) array")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("points must be finite")
    return pts


def _homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((pts.shape[0], 1))])


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def hartley_normalize(points):
    """Similarity-normalize points: centroid at the origin, mean distance sqrt(2).

    Returns
    -------
    (normalized, T)
        ``normalized`` is the (N, 2) transformed point array and ``T`` the
        3x3 similarity with ``normalized_h = T @ input_h`` homogeneously.

    Raises
    ------
    DegenerateInput
        Fewer than 2 points, or all points coincident.
    """
    pts = _as_points(points)
    if pts.shape[0] < 2:
        raise DegenerateInput("normalization needs at least 2 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = float(np.mean(np.sqrt(np.sum(centered**2, axis=1))))
    if mean_dist <= 0.0:
        raise DegenerateInput("all points coincide; cannot normalize")
    scale = np.sqrt(2.0) / mean_dist
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return centered * scale, t


def normalize_fundamental(f) -> np.ndarray:
    """Scale to Frobenius norm 1 and make the largest-|entry| positive."""
    f = np.asarray(f, dtype=float)
    if f.shape != (3, 3):
        raise DegenerateInput("fundamental matrix must be 3x3")
    norm = float(np.linalg.norm(f))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInput("cannot normalize a zero or non-finite matrix")
    f = f / norm
    flat = f.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    if lead < 0:
        f = -f
    return f


def enforce_rank2(f) -> np.ndarray:
    """Project to the closest rank-2 matrix (Frobenius), then normalize.

    Idempotent: a matrix already satisfying the convention passes through
    unchanged up to floating-point rounding.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (3, 3):
        raise DegenerateInput("expected a 3x3 matrix")
    if not np.any(f):
        raise DegenerateInput("zero matrix has no rank-2 projection")
    u, s, vt = np.linalg.svd(f)
    s = s.copy()
    s[2] = 0.0
    return normalize_fundamental((u * s) @ vt)


def eight_point(pts_a, pts_b, conditioning_bound: float = _CONDITIONING_BOUND) -> np.ndarray:
    """Estimate the fundamental matrix from >= 8 correspondences.

    Both point sets are Hartley-normalized, the linearized epipolar residual
    is minimized by the smallest right singular vector of the design matrix
    (least squares when more than 8 pairs are given), and the result is
    de-normalized, projected to rank 2, and sign/scale normalized.

    Raises
    ------
    DegenerateInput
        Fewer than 8 pairs, mismatched shapes, or coincident point sets.
    IllConditioned
        Near-degenerate configuration (planar scene, collinear points,
        zero baseline).  The exception carries the estimate computed anyway
        in ``.matrix`` plus the offending singular-value ratio, so callers
        that tolerate a degenerate F can proceed with it.  Triggered when
        the ratio of the two smallest design-matrix singular values exceeds
        ``conditioning_bound``, or when the second-smallest is zero relative
        to the largest (exact extra rank deficiency, where the ratio itself
        is meaningless).
    """
    pa = _as_points(pts_a)
    pb = _as_points(pts_b)
    if pa.shape != pb.shape:
        raise DegenerateInput("correspondence arrays must have equal shapes")
    n = pa.shape[0]
    if n < 8:
        raise DegenerateInput(f"eight_point needs >= 8 correspondences, got {n}")
    na, ta = hartley_normalize(pa)
    nb, tb = hartley_normalize(pb)
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    design = np.column_stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones(n)])
    _, s, vt = np.linalg.svd(design)
    f = enforce_rank2(tb.T @ vt[-1].reshape(3, 3) @ ta)
    if s[-2] <= _RANK_DEFICIENT_REL * s[0]:
        raise IllConditioned(
            "design matrix has a multi-dimensional nullspace (planar or "
            "zero-baseline configuration)",
            matrix=f,
            ratio=0.0,
        )
    ratio = float(s[-1] / s[-2])
    if ratio > conditioning_bound:
        raise IllConditioned(
            f"design matrix conditioning ratio {ratio:.3f} exceeds "
            f"{conditioning_bound}",
            matrix=f,
            ratio=ratio,
        )
    return f


def sampson_distances(f, pts_a, pts_b) -> np.ndarray:
    """Vectorized Sampson distance for paired point arrays (px^2).

    Returns ``(pb^T F pa)^2 / ((Fpa)_1^2 + (Fpa)_2^2 + (F^T pb)_1^2 +
    (F^T pb)_2^2)`` per pair.  A zero denominator (both points at the
    epipoles) yields ``inf`` rather than raising.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (3, 3):
        raise DegenerateInput("fundamental matrix must be 3x3")
    pa = _homogeneous(_as_points(pts_a))
    pb = _homogeneous(_as_points(pts_b))
    if pa.shape != pb.shape:
        raise DegenerateInput("point arrays must have equal shapes")
    fa = pa @ f.T
    fb = pb @ f
    numer = np.sum(pb * fa, axis=1) ** 2
    denom = fa[:, 0] ** 2 + fa[:, 1] ** 2 + fb[:, 0] ** 2 + fb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0.0, numer / denom, np.inf)
    return out


def sampson_distance(f, p_a, p_b) -> float:
    """Sampson distance of a single correspondence (px^2); ``inf`` when the
    denominator vanishes."""
    return float(sampson_distances(f, [p_a], [p_b])[0])


def essential_from_fundamental(f, k_a, k_b) -> np.ndarray:
    """E = K_B^T F K_A, projected onto the essential manifold.

    The projection replaces the singular values by (s, s, 0) with s the mean
    of the two largest; the matrix scale is otherwise preserved.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (3, 3):
        raise DegenerateInput("fundamental matrix must be 3x3")
    ka = _k_matrix(k_a)
    kb = _k_matrix(k_b)
    e = kb.T @ f @ ka
    u, s, vt = np.linalg.svd(e)
    sigma = 0.5 * (s[0] + s[1])
    return (u * np.array([sigma, sigma, 0.0])) @ vt


def essential_from_pose(r, t) -> np.ndarray:
    """Essential matrix [t]_x R for pose X_B = R X_A + t."""
    r = np.asarray(r, dtype=float)
    return skew(t) @ r


def fundamental_from_pose(k_a, k_b, r, t) -> np.ndarray:
    """Analytic F = K_B^{-T} [t]_x R K_A^{-1}, normalized per convention."""
    ka = _k_matrix(k_a)
    kb = _k_matrix(k_b)
    f = np.linalg.inv(kb).T @ essential_from_pose(r, t) @ np.linalg.inv(ka)
    return normalize_fundamental(f)


def calibrate_points(k, pts) -> np.ndarray:
    """Map pixel points to normalized camera coordinates via K^{-1}."""
    kinv = np.linalg.inv(_k_matrix(k))
    ph = _homogeneous(_as_points(pts)) @ kinv.T
    return ph[:, :2] / ph[:, 2:3]


def triangulate_points(r, t, pts_a, pts_b) -> np.ndarray:
    """Linear triangulation in camera-A coordinates.

    ``pts_a`` and ``pts_b`` are calibrated (normalized) image points; the
    cameras are P_A = [I | 0] and P_B = [R | t].  Returns (N, 3) points.
    """
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float).reshape(3)
    pa = _as_points(pts_a)
    pb = _as_points(pts_b)
    if pa.shape != pb.shape:
        raise DegenerateInput("point arrays must have equal shapes")
    n = pa.shape[0]
    proj_a = np.hstack([np.eye(3), np.zeros((3, 1))])
    proj_b = np.hstack([r, t.reshape(3, 1)])
    design = np.empty((n, 4, 4))
    design[:, 0] = pa[:, 0, None] * proj_a[2] - proj_a[0]
    design[:, 1] = pa[:, 1, None] * proj_a[2] - proj_a[1]
    design[:, 2] = pb[:, 0, None] * proj_b[2] - proj_b[0]
    design[:, 3] = pb[:, 1, None] * proj_b[2] - proj_b[1]
    _, _, vt = np.linalg.svd(design)
    xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return xh[:, :3] / xh[:, 3:4]


def decompose_essential(e, pts_a, pts_b):
    """Recover (R, t) from an essential matrix by cheirality voting.

    ``pts_a``/``pts_b`` are calibrated correspondences used to count, for
    each of the four candidate decompositions (R1, t), (R1, -t), (R2, t),
    (R2, -t) in that fixed order, how many triangulated points have positive
    depth in both cameras.  The unique maximizer wins.

    Returns
    -------
    (rotation, translation)
        3x3 rotation with det +1 and a unit translation direction.

    Raises
    ------
    DegenerateInput
        No correspondences supplied.
    AmbiguousCheirality
        Two candidates tie on the best count.
    """
    e = np.asarray(e, dtype=float)
    if e.shape != (3, 3):
        raise DegenerateInput("essential matrix must be 3x3")
    pa = _as_points(pts_a)
    pb = _as_points(pts_b)
    if pa.shape[0] < 1:
        raise DegenerateInput("cheirality disambiguation needs >= 1 point")
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)]
    counts = []
    for r, tc in candidates:
        points = triangulate_points(r, tc, pa, pb)
        z_a = points[:, 2]
        z_b = points @ r.T[:, 2] + tc[2]
        good = np.isfinite(z_a) & (z_a > 0) & (z_b > 0)
        counts.append(int(np.count_nonzero(good)))
    best = max(counts)
    if counts.count(best) > 1:
        raise AmbiguousCheirality(
            f"cheirality counts {counts} do not single out a candidate"
        )
    r, tc = candidates[counts.index(best)]
    return r, tc / np.linalg.norm(tc)


def pose_angular_error(r_est, t_est, r_gt, t_gt) -> float:
    """Max of rotation angle error and translation direction error, degrees.

    The translation comparison uses |dot|, so it is sign-invariant (the
    direction recovered from an essential matrix has an ambiguous sign).
    """
    r_est = np.asarray(r_est, dtype=float)
    r_gt = np.asarray(r_gt, dtype=float)
    te = np.asarray(t_est, dtype=float).reshape(3)
    tg = np.asarray(t_gt, dtype=float).reshape(3)
    cos_r = (np.trace(r_est.T @ r_gt) - 1.0) / 2.0
    rot_err = np.degrees(np.arccos(np.clip(cos_r, -1.0, 1.0)))
    denom = np.linalg.norm(te) * np.linalg.norm(tg)
    if denom == 0.0:
        raise DegenerateInput("translation vectors must be nonzero")
    cos_t = abs(float(np.dot(te, tg))) / denom
    trans_err = np.degrees(np.arccos(np.clip(cos_t, 0.0, 1.0)))
    return float(max(rot_err, trans_err))


def homography_dlt(pts_a, pts_b) -> np.ndarray:
    """Normalized-DLT homography with pB ~ H pA.

    The result is scaled so H[2,2] = 1 when that entry is nonzero, else to
    Frobenius norm 1 with the largest-|entry| positive.

    Raises
    ------
    DegenerateInput
        Fewer than 4 pairs, coincident points, or a configuration whose DLT
        system has no unique solution (collinear points).
    """
    pa = _as_points(pts_a)
    pb = _as_points(pts_b)
    if pa.shape != pb.shape:
        raise DegenerateInput("correspondence arrays must have equal shapes")
    n = pa.shape[0]
    if n < 4:
        raise DegenerateInput(f"homography needs >= 4 correspondences, got {n}")
    na, ta = hartley_normalize(pa)
    nb, tb = hartley_normalize(pb)
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    zero = np.zeros(n)
    one = np.ones(n)
    rows_a = np.column_stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v])
    rows_b = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    design = np.empty((2 * n, 9))
    design[0::2] = rows_a
    design[1::2] = rows_b
    _, s, vt = np.linalg.svd(design)
    if s[-2] <= _RANK_DEFICIENT_REL * s[0]:
        raise DegenerateInput("DLT system is rank deficient (collinear points)")
    h = np.linalg.inv(tb) @ vt[-1].reshape(3, 3) @ ta
    if abs(h[2, 2]) > 1e-12 * np.linalg.norm(h):
        return h / h[2, 2]
    h = h / np.linalg.norm(h)
    flat = h.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        h = -h
    return h


def apply_homography(h, pts) -> np.ndarray:
    """Project (N, 2) points through a homography; dehomogenizes."""
    h = np.asarray(h, dtype=float)
    ph = _homogeneous(_as_points(pts)) @ h.T
    w = ph[:, 2]
    if np.any(np.abs(w) < 1e-12 * np.linalg.norm(h)):
        raise ProjectionAtInfinity("point maps to the plane at infinity")
    return ph[:, :2] / w[:, None]


def corner_error(h_est, h_gt, width, height) -> float:
    """Mean projection distance of the 4 image corners between homographies.

    Corners are (0,0), (W-1,0), (W-1,H-1), (0,H-1).
    """
    if width <= 1 or height <= 1:
        raise DegenerateInput("image dimensions must exceed 1 pixel")
    corners = np.array(
        [
            [0.0, 0.0],
            [width - 1.0, 0.0],
            [width - 1.0, height - 1.0],
            [0.0, height - 1.0],
        ]
    )
    proj_est = apply_homography(h_est, corners)
    proj_gt = apply_homography(h_gt, corners)
    return float(np.mean(np.sqrt(np.sum((proj_est - proj_gt) ** 2, axis=1))))
