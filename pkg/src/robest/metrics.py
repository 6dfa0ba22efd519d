"""Error metrics: rotation geodesic, translation distance, trajectory RMSE."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "rotation_error_deg",
    "translation_error",
    "align_trajectory_2d",
    "trajectory_rmse",
]


def rotation_error_deg(rotation_est: np.ndarray, rotation_true: np.ndarray) -> float:
    """Geodesic distance on SO(3) in degrees.

    arccos(clamp((trace(R_true^T R_est) - 1) / 2, -1, 1)) * 180 / pi,
    in [0, 180].
    """
    relative = np.asarray(rotation_true, dtype=float).T @ np.asarray(
        rotation_est, dtype=float
    )
    cos_angle = (np.trace(relative) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))


def translation_error(t_est: np.ndarray, t_true: np.ndarray) -> float:
    """Euclidean distance between the two translation vectors."""
    return float(np.linalg.norm(np.asarray(t_est, float) - np.asarray(t_true, float)))


def align_trajectory_2d(
    xy_est: np.ndarray, xy_true: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid alignment of 2D positions (rotation + translation).

    Closed-form Procrustes: the optimal angle is atan2 of the summed cross
    and dot products of the centered point pairs. Returns (R, t) such that
    R @ est + t best matches true.
    """
    est = np.asarray(xy_est, dtype=float)
    true = np.asarray(xy_true, dtype=float)
    if est.shape != true.shape or est.ndim != 2 or est.shape[1] != 2:
        raise ValueError("trajectories must be matching (n, 2) arrays")
    est_c = est - est.mean(axis=0)
    true_c = true - true.mean(axis=0)
    cross = float(np.sum(est_c[:, 0] * true_c[:, 1] - est_c[:, 1] * true_c[:, 0]))
    dot = float(np.sum(est_c * true_c))
    angle = math.atan2(cross, dot)
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s], [s, c]])
    translation = true.mean(axis=0) - rotation @ est.mean(axis=0)
    return rotation, translation


def trajectory_rmse(
    poses_est: np.ndarray, poses_true: np.ndarray, align: bool = True
) -> float:
    """RMSE over trajectory positions, after rigid 2D alignment by default.

    Orientation components are ignored; alignment removes the gauge
    freedom of pose-graph solutions.
    """
    est = np.asarray(poses_est, dtype=float)[:, :2]
    true = np.asarray(poses_true, dtype=float)[:, :2]
    if est.shape != true.shape:
        raise ValueError("trajectories must have matching shapes")
    if align:
        rotation, translation = align_trajectory_2d(est, true)
        est = est @ rotation.T + translation
    diff = est - true
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
