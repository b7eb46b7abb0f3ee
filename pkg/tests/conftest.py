"""Shared synthetic-scene builders and independent oracle helpers.

Everything here is deliberately self-contained numpy (no imports from the
package under test) so test expectations come from an independent
implementation of the underlying math.
"""

from __future__ import annotations

import numpy as np
import pytest


def rodrigues(axis, angle_rad: float) -> np.ndarray:
    """Rotation matrix about ``axis`` by ``angle_rad`` (Rodrigues formula)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_rotation(rng: np.random.Generator, max_angle_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.2 * max_angle_deg, max_angle_deg))
    return rodrigues(axis, angle)


def skew3(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def unit_frobenius(m) -> np.ndarray:
    """Frobenius-normalize and fix the sign by the largest-|entry| rule."""
    m = np.asarray(m, dtype=float)
    m = m / np.linalg.norm(m)
    flat = m.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        m = -m
    return m


def fmat_distance(f1, f2) -> float:
    """Sign-resolved Frobenius distance between normalized 3x3 matrices."""
    a = np.asarray(f1, dtype=float)
    b = np.asarray(f2, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def project_pinhole(k, points_cam) -> np.ndarray:
    """Project camera-frame 3D points with intrinsics ``k`` (3x3)."""
    k = np.asarray(k, dtype=float)
    pts = np.asarray(points_cam, dtype=float)
    proj = pts @ k.T
    return proj[:, :2] / proj[:, 2:3]


def make_two_view_scene(
    rng: np.random.Generator,
    n_points: int = 50,
    max_rotation_deg: float = 15.0,
    noise_px: float = 0.0,
) -> dict:
    """Random calibrated two-view scene with exact correspondences.

    Camera A sits at the origin looking along +z; camera B is displaced by a
    random pose (X_B = R X_A + t).  Returns pixel correspondences, the
    analytic fundamental and essential matrices, and all scene parameters.
    Every returned 3D point has positive depth in both cameras.
    """
    fx_a, fy_a = rng.uniform(400.0, 800.0, size=2)
    fx_b, fy_b = rng.uniform(400.0, 800.0, size=2)
    k_a = np.array([[fx_a, 0.0, 320.0], [0.0, fy_a, 240.0], [0.0, 0.0, 1.0]])
    k_b = np.array([[fx_b, 0.0, 320.0], [0.0, fy_b, 240.0], [0.0, 0.0, 1.0]])
    r = random_rotation(rng, max_rotation_deg)
    t = rng.normal(size=3)
    t = t / np.linalg.norm(t) * rng.uniform(0.4, 1.2)

    points = np.empty((0, 3))
    while points.shape[0] < n_points:
        cand = np.column_stack(
            [
                rng.uniform(-2.5, 2.5, size=2 * n_points),
                rng.uniform(-2.0, 2.0, size=2 * n_points),
                rng.uniform(4.0, 10.0, size=2 * n_points),
            ]
        )
        z_b = cand @ r[2] + t[2]
        points = np.vstack([points, cand[z_b > 0.5]])
    points = points[:n_points]

    pts_a = project_pinhole(k_a, points)
    pts_b = project_pinhole(k_b, points @ r.T + t)
    if noise_px > 0.0:
        pts_a = pts_a + rng.normal(scale=noise_px, size=pts_a.shape)
        pts_b = pts_b + rng.normal(scale=noise_px, size=pts_b.shape)

    e_gt = skew3(t) @ r
    f_gt = unit_frobenius(np.linalg.inv(k_b).T @ e_gt @ np.linalg.inv(k_a))
    return {
        "pts_a": pts_a,
        "pts_b": pts_b,
        "points_3d": points,
        "k_a": k_a,
        "k_b": k_b,
        "rotation": r,
        "translation": t,
        "e_gt": e_gt,
        "f_gt": f_gt,
    }


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
