"""Weighted closed-form rigid registration (Horn / Kabsch with weights).

Solves  argmin_{R in SO(3), t}  sum_i w_i ||q_i - (R p_i + t)||^2  exactly via
the weighted cross-covariance SVD, with the determinant correction that rules
out reflections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernels import ProblemInstance, WeightedSolver

__all__ = [
    "RigidTransform3",
    "CorrespondenceSet",
    "DegenerateGeometryError",
    "WeightSumError",
    "horn_weighted",
    "residuals_registration",
    "registration_problem",
]

_ORTHONORMALITY_TOL = 1e-9


class DegenerateGeometryError(RuntimeError):
    """Correspondence geometry does not determine a rotation (rank < 2)."""


class WeightSumError(ValueError):
    """All correspondence weights are (numerically) zero."""


@dataclass(frozen=True)
class RigidTransform3:
    """A proper rigid motion of 3-space: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=float)
        trans = np.asarray(self.translation, dtype=float)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHONORMALITY_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHONORMALITY_TOL:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform3":
        return RigidTransform3(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CorrespondenceSet:
    """Putative point correspondences (p_i, q_i) with per-pair precision.

    `precision` is the isotropic measurement precision folded into the
    squared residuals; a scalar broadcasts to all pairs.
    """

    source_points: np.ndarray
    target_points: np.ndarray
    precision: np.ndarray = field(default=1.0)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        src = np.asarray(self.source_points, dtype=float)
        tgt = np.asarray(self.target_points, dtype=float)
        if src.ndim != 2 or src.shape[1] != 3 or src.shape != tgt.shape:
            raise ValueError("source and target must both be (m, 3) arrays")
        if src.shape[0] < 3:
            raise ValueError("at least 3 correspondences are required")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
            raise ValueError("correspondence coordinates must be finite")
        prec = np.broadcast_to(
            np.asarray(self.precision, dtype=float), (src.shape[0],)
        ).copy()
        if not np.all(np.isfinite(prec)) or np.any(prec <= 0):
            raise ValueError("precision entries must be positive and finite")
        object.__setattr__(self, "source_points", src)
        object.__setattr__(self, "target_points", tgt)
        object.__setattr__(self, "precision", prec)

    def __len__(self) -> int:
        return self.source_points.shape[0]


def horn_weighted(corr: CorrespondenceSet, weights) -> RigidTransform3:
    """Exact minimizer of the weighted correspondence cost.

    Weighted centroids are removed, the weighted cross-covariance
    H = sum_i w_i (p_i - p_bar)(q_i - q_bar)^T is decomposed as U S V^T, and
    R = V diag(1, 1, det(V U^T)) U^T,  t = q_bar - R p_bar.

    Raises WeightSumError when the weights sum to zero and
    DegenerateGeometryError when the weighted geometry is (near-)collinear,
    i.e. rank(H) < 2.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(corr),):
        raise ValueError(f"expected {len(corr)} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise WeightSumError("weights sum to zero; transform is undetermined")

    p = corr.source_points
    q = corr.target_points
    p_bar = w @ p / total
    q_bar = w @ q / total
    h = (w[:, None] * (p - p_bar)).T @ (q - q_bar)

    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError(
            "correspondences are collinear or coincident (rank(H) < 2)"
        )
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = q_bar - rotation @ p_bar
    return RigidTransform3(rotation, translation)


def residuals_registration(
    corr: CorrespondenceSet, transform: RigidTransform3
) -> np.ndarray:
    """Precision-scaled squared residuals  prec_i ||q_i - (R p_i + t)||^2."""
    diff = corr.target_points - transform.apply(corr.source_points)
    return corr.precision * np.einsum("ij,ij->i", diff, diff)


def registration_problem(
    corr: CorrespondenceSet,
) -> tuple[ProblemInstance, WeightedSolver]:
    """Package a correspondence set for `run_robust`.

    The solver folds the per-pair precision into the robust weights so the
    variable update minimizes exactly the weighted sum of the
    precision-scaled residuals. The warm start is ignored: the solve is
    closed-form.
    """
    problem = ProblemInstance(
        residual_sq_fn=lambda transform: residuals_registration(corr, transform),
        num_measurements=len(corr),
    )

    def solver(weights: np.ndarray, warm_start=None) -> RigidTransform3:
        return horn_weighted(corr, weights * corr.precision)

    return problem, solver
