"""Synthetic benchmark harness: instance generation and Monte-Carlo sweeps.

Registration protocol: a source cloud inside a [-w, w]^3 box undergoes a
random proper rotation and a translation of norm <= 3; inlier targets are
perturbed per-coordinate with N(0, sigma^2), and a fixed fraction of targets
is replaced by uniform samples inside a sphere of diameter sqrt(3) centered
at the transformed cloud's centroid.

Squared residuals are precision-scaled so an inlier's squared residual has
unit mean (precision = 1 / (3 sigma^2)); the inlier threshold defaults to
(5 sigma)^2 in the same units, i.e. 25/3. The exponential weight rules are
calibrated for residuals of this magnitude; on raw (unscaled) residuals they
cannot separate inliers from outliers.

Pose-graph protocol: a synthetic trajectory with noisy odometry plus loop
closures, a fraction of which is replaced by uniformly random relative poses.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .fileio import read_ply, downsample_and_box
from .kernels import (
    RobustConfig,
    RobustMethod,
    StoppingRule,
    run_robust,
)
from .metrics import (
    align_trajectory_2d,
    rotation_error_deg,
    translation_error,
    trajectory_rmse,
)
from .posegraph import (
    EdgeKind,
    PoseGraph2,
    PoseGraphEdge,
    pgo_problem,
    rotation2,
    wrap_angle,
)
from .registration import CorrespondenceSet, RigidTransform3, registration_problem

__all__ = [
    "Trajectory",
    "OdometryNoise",
    "RegistrationBenchConfig",
    "PgoBenchConfig",
    "BenchRecord",
    "registration_precision",
    "default_inlier_threshold_sq",
    "random_rotation",
    "generate_registration_instance",
    "generate_pgo_instance",
    "run_benchmark",
]

# Inlier threshold when sigma = 0 (residuals vanish; any positive value works).
_NOISE_FREE_THRESHOLD_SQ = 25.0


class Trajectory(Enum):
    CIRCLE = "circle"
    GRID = "grid"
    MANHATTAN = "manhattan"


@dataclass(frozen=True)
class OdometryNoise:
    """Per-step odometry noise: translation std (units) and rotation std (rad)."""

    trans_std: float = 0.01
    rot_std: float = math.radians(0.5)


@dataclass(frozen=True)
class RegistrationBenchConfig:
    m: int = 100
    box_half_width: float = 0.5
    max_translation_norm: float = 3.0
    inlier_noise_std: float = 0.001
    outlier_sphere_diameter: float = math.sqrt(3.0)
    outlier_ratios: tuple[float, ...] = tuple(round(0.1 * k, 1) for k in range(10))
    mc_runs: int = 20
    seed: int = 0
    source_ply: Optional[str] = None

    def __post_init__(self) -> None:
        if self.m < 3:
            raise ValueError("m must be >= 3")
        ratios = tuple(float(r) for r in self.outlier_ratios)
        if any(not 0.0 <= r < 1.0 for r in ratios):
            raise ValueError("outlier ratios must lie in [0, 1)")
        if list(ratios) != sorted(ratios):
            raise ValueError("outlier ratios must be sorted ascending")
        for r in ratios:
            if (1.0 - r) * self.m < 3:
                raise ValueError(f"ratio {r} leaves fewer than 3 inliers")
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        object.__setattr__(self, "outlier_ratios", ratios)


@dataclass(frozen=True)
class PgoBenchConfig:
    n_poses: int = 100
    trajectory: Trajectory = Trajectory.CIRCLE
    odometry_noise: OdometryNoise = field(default_factory=OdometryNoise)
    loop_closure_count: int = 30
    corrupted_loop_fraction: tuple[float, ...] = tuple(
        round(0.2 * k, 1) for k in range(5)
    )
    kappa: Optional[float] = None  # default: 1 / (2 rot_std^2)
    tau: Optional[float] = None  # default: 1 / trans_std^2
    mc_runs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_poses < 3:
            raise ValueError("n_poses must be >= 3")
        fractions = tuple(float(f) for f in self.corrupted_loop_fraction)
        if any(not 0.0 <= f < 1.0 for f in fractions):
            raise ValueError("corrupted fractions must lie in [0, 1)")
        if self.loop_closure_count < 0:
            raise ValueError("loop_closure_count must be >= 0")
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        object.__setattr__(self, "corrupted_loop_fraction", fractions)

    @property
    def resolved_kappa(self) -> float:
        # kappa ||R_j - R_i R~||_F^2 ~= 2 kappa dtheta^2, so 1/(2 rot_std^2)
        # gives the rotational term unit variance for nominal noise. With
        # zero noise the residuals vanish and the scale is arbitrary.
        if self.kappa is not None:
            return self.kappa
        rot_std = self.odometry_noise.rot_std
        return 1.0 / (2.0 * rot_std**2) if rot_std > 0 else 1.0

    @property
    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        trans_std = self.odometry_noise.trans_std
        return 1.0 / trans_std**2 if trans_std > 0 else 1.0


@dataclass(frozen=True)
class BenchRecord:
    method: str
    outlier_ratio: float
    mc_index: int
    rotation_error_deg: float
    translation_error: float
    trajectory_rmse: Optional[float]
    iterations: int
    wall_time_ms: float
    stop_reason: str


def registration_precision(sigma: float) -> float:
    """Per-correspondence precision normalizing inlier squared residuals.

    E ||noise||^2 = 3 sigma^2 for iid per-coordinate noise, so 1/(3 sigma^2)
    makes the expected inlier squared residual 1. Noise-free instances use
    precision 1 (the residuals vanish identically).
    """
    return 1.0 / (3.0 * sigma * sigma) if sigma > 0 else 1.0


def default_inlier_threshold_sq(sigma: float) -> float:
    """Default c^2: (5 sigma)^2 expressed in precision-scaled units."""
    if sigma > 0:
        return (5.0 * sigma) ** 2 * registration_precision(sigma)
    return _NOISE_FREE_THRESHOLD_SQ


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _uniform_in_ball(rng: np.random.Generator, radius: float, size: int) -> np.ndarray:
    directions = rng.normal(size=(size, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.random(size) ** (1.0 / 3.0)
    return directions * radii[:, None]


def generate_registration_instance(
    cfg: RegistrationBenchConfig,
    outlier_ratio: float,
    rng: np.random.Generator,
) -> tuple[CorrespondenceSet, RigidTransform3, np.ndarray]:
    """One registration instance with ground truth and inlier labels.

    Draw order is fixed (source points, rotation, translation, noise,
    outlier indices, outlier targets) so instances are reproducible from
    the generator state alone.
    """
    # floor with a fuzz guard: 0.29 * 100 is 28.999... in floats
    n_out = int(math.floor(outlier_ratio * cfg.m + 1e-9))
    if cfg.m - n_out < 3:
        raise ValueError(f"outlier ratio {outlier_ratio} leaves fewer than 3 inliers")

    w = cfg.box_half_width
    if cfg.source_ply is not None:
        cloud = read_ply(cfg.source_ply)
        source = downsample_and_box(cloud, cfg.m, w, rng)
    else:
        source = rng.uniform(-w, w, size=(cfg.m, 3))

    rotation = random_rotation(rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    translation = (
        direction * cfg.max_translation_norm * rng.random() ** (1.0 / 3.0)
    )
    transform = RigidTransform3(rotation, translation)

    clean_targets = transform.apply(source)
    centroid = clean_targets.mean(axis=0)
    targets = clean_targets.copy()
    if cfg.inlier_noise_std > 0:
        targets += rng.normal(scale=cfg.inlier_noise_std, size=(cfg.m, 3))

    inlier_mask = np.ones(cfg.m, dtype=bool)
    if n_out > 0:
        outlier_idx = np.sort(rng.choice(cfg.m, size=n_out, replace=False))
        targets[outlier_idx] = centroid + _uniform_in_ball(
            rng, cfg.outlier_sphere_diameter / 2.0, n_out
        )
        inlier_mask[outlier_idx] = False

    corr = CorrespondenceSet(
        source_points=source,
        target_points=targets,
        precision=registration_precision(cfg.inlier_noise_std),
    )
    return corr, transform, inlier_mask


def _ground_truth_trajectory(
    cfg: PgoBenchConfig, rng: np.random.Generator
) -> np.ndarray:
    n = cfg.n_poses
    poses = np.zeros((n, 3))
    if cfg.trajectory is Trajectory.CIRCLE:
        radius = 5.0
        angles = 2.0 * math.pi * np.arange(n) / n
        poses[:, 0] = radius * np.cos(angles)
        poses[:, 1] = radius * np.sin(angles)
        poses[:, 2] = [wrap_angle(a + math.pi / 2.0) for a in angles]
    elif cfg.trajectory is Trajectory.GRID:
        side = max(2, int(math.ceil(math.sqrt(n))))
        for k in range(n):
            row, col = divmod(k, side)
            x = col if row % 2 == 0 else side - 1 - col
            heading = 0.0 if row % 2 == 0 else math.pi
            at_row_end = col == side - 1 and k + 1 < n
            poses[k] = (float(x), float(row), math.pi / 2.0 if at_row_end else heading)
    else:  # MANHATTAN: lattice walk with right-angle turns
        heading = 0.0
        x = y = 0.0
        for k in range(n):
            poses[k] = (x, y, wrap_angle(heading))
            turn = rng.integers(-1, 2)  # left, straight, right
            heading = wrap_angle(heading + turn * math.pi / 2.0)
            x += math.cos(heading)
            y += math.sin(heading)
    return poses


def _relative_pose(poses: np.ndarray, i: int, j: int) -> tuple[np.ndarray, float]:
    xi, yi, thi = poses[i]
    xj, yj, thj = poses[j]
    rel_xy = rotation2(thi).T @ np.array([xj - xi, yj - yi])
    return rel_xy, wrap_angle(thj - thi)


def generate_pgo_instance(
    cfg: PgoBenchConfig,
    corrupted_fraction: float,
    rng: np.random.Generator,
) -> tuple[PoseGraph2, np.ndarray, np.ndarray]:
    """Synthetic pose graph with noisy odometry and corrupted loop closures.

    Returns (graph, ground_truth_poses, corrupted_edge_mask); the mask is
    indexed like graph.edges and marks the corrupted loop closures.
    """
    if not 0.0 <= corrupted_fraction < 1.0:
        raise ValueError("corrupted_fraction must lie in [0, 1)")
    gt = _ground_truth_trajectory(cfg, rng)
    n = cfg.n_poses
    noise = cfg.odometry_noise
    kappa, tau = cfg.resolved_kappa, cfg.resolved_tau

    def noisy(rel_xy: np.ndarray, rel_theta: float) -> tuple[np.ndarray, float]:
        return (
            rel_xy + rng.normal(scale=noise.trans_std, size=2),
            wrap_angle(rel_theta + rng.normal(scale=noise.rot_std)),
        )

    edges: list[PoseGraphEdge] = []
    odometry_pairs = [(k, k + 1) for k in range(n - 1)]
    if cfg.trajectory is Trajectory.CIRCLE:
        odometry_pairs.append((n - 1, 0))  # the closing step of the loop
    for i, j in odometry_pairs:
        rel_xy, rel_theta = noisy(*_relative_pose(gt, i, j))
        edges.append(
            PoseGraphEdge(
                i=i, j=j, rel_xy=rel_xy, rel_theta=rel_theta,
                kappa=kappa, tau=tau, kind=EdgeKind.ODOMETRY,
            )
        )

    taken = set(odometry_pairs)
    loop_pairs: list[tuple[int, int]] = []
    # spatially near pairs only: a corrupted measurement across a short
    # odometry path cannot be absorbed cheaply, so it stays detectable
    max_gap = max(3, n // 20)
    attempts = 0
    while len(loop_pairs) < cfg.loop_closure_count and attempts < 50 * max(
        1, cfg.loop_closure_count
    ):
        attempts += 1
        i = int(rng.integers(0, n))
        gap = int(rng.integers(2, max_gap + 1))
        j = (i + gap) % n
        pair = (i, j)
        if pair in taken or (j, i) in taken or i == j:
            continue
        taken.add(pair)
        loop_pairs.append(pair)

    extent = float(
        np.linalg.norm(gt[:, :2].max(axis=0) - gt[:, :2].min(axis=0))
    )
    n_corrupt = int(corrupted_fraction * len(loop_pairs))
    corrupt_set = (
        set(rng.choice(len(loop_pairs), size=n_corrupt, replace=False).tolist())
        if n_corrupt > 0
        else set()
    )

    corrupted_mask = np.zeros(len(edges) + len(loop_pairs), dtype=bool)
    for idx, (i, j) in enumerate(loop_pairs):
        if idx in corrupt_set:
            rel_xy = rng.uniform(-extent / 2.0, extent / 2.0, size=2)
            rel_theta = wrap_angle(rng.uniform(-math.pi, math.pi))
            corrupted_mask[len(edges)] = True
        else:
            rel_xy, rel_theta = noisy(*_relative_pose(gt, i, j))
        edges.append(
            PoseGraphEdge(
                i=i, j=j, rel_xy=rel_xy, rel_theta=rel_theta,
                kappa=kappa, tau=tau, kind=EdgeKind.LOOP_CLOSURE,
            )
        )

    vertices = gt.copy()  # initial estimates; solvers re-initialize from odometry
    graph = PoseGraph2(vertices=vertices, edges=tuple(edges))
    return graph, gt, corrupted_mask


def _cell_rng(seed: int, sweep_value: float, mc_index: int) -> np.random.Generator:
    # Keyed by the sweep value itself (not its s position) so runs are
    # independent of the order and subset of values requested.
    key = int(round(float(sweep_value) * 1e9))
    return np.random.default_rng(np.random.SeedSequence((seed, key, mc_index)))


def _robust_config(
    method: RobustMethod,
    inlier_threshold_sq: float,
    stopping_rule: StoppingRule,
    convergence_tol: float,
    max_iterations: int,
) -> RobustConfig:
    return RobustConfig(
        method=method,
        inlier_threshold_sq=inlier_threshold_sq,
        convergence_tol=convergence_tol,
        max_iterations=max_iterations,
        stopping_rule=stopping_rule,
    )


def _registration_cell(
    cfg: RegistrationBenchConfig,
    methods: Sequence[RobustMethod],
    ratio: float,
    mc_index: int,
    threshold_sq: float,
    stopping_rule: StoppingRule,
    convergence_tol: float,
    max_iterations: int,
) -> list[BenchRecord]:
    rng = _cell_rng(cfg.seed, ratio, mc_index)
    corr, gt, _ = generate_registration_instance(cfg, ratio, rng)
    problem, solver = registration_problem(corr)
    records = []
    for method in methods:
        config = _robust_config(
            method, threshold_sq, stopping_rule, convergence_tol, max_iterations
        )
        start = time.perf_counter()
        estimate, _, trace = run_robust(problem, solver, config)
        elapsed_ms = (time.perf_counter() - start) * 1e3
        records.append(
            BenchRecord(
                method=method.value,
                outlier_ratio=ratio,
                mc_index=mc_index,
                rotation_error_deg=rotation_error_deg(estimate.rotation, gt.rotation),
                translation_error=translation_error(
                    estimate.translation, gt.translation
                ),
                trajectory_rmse=None,
                iterations=len(trace.iterations),
                wall_time_ms=elapsed_ms,
                stop_reason=trace.stop_reason.value,
            )
        )
    return records


def _pgo_cell(
    cfg: PgoBenchConfig,
    methods: Sequence[RobustMethod],
    fraction: float,
    mc_index: int,
    threshold_sq: float,
    stopping_rule: StoppingRule,
    convergence_tol: float,
    max_iterations: int,
) -> list[BenchRecord]:
    rng = _cell_rng(cfg.seed, fraction, mc_index)
    graph, gt, _ = generate_pgo_instance(cfg, fraction, rng)
    problem, solver = pgo_problem(graph)
    records = []
    for method in methods:
        config = _robust_config(
            method, threshold_sq, stopping_rule, convergence_tol, max_iterations
        )
        start = time.perf_counter()
        estimate, _, trace = run_robust(problem, solver, config)
        elapsed_ms = (time.perf_counter() - start) * 1e3
        rot_err, trans_err = _aligned_pose_errors(estimate, gt)
        records.append(
            BenchRecord(
                method=method.value,
                outlier_ratio=fraction,
                mc_index=mc_index,
                rotation_error_deg=rot_err,
                translation_error=trans_err,
                trajectory_rmse=trajectory_rmse(estimate, gt),
                iterations=len(trace.iterations),
                wall_time_ms=elapsed_ms,
                stop_reason=trace.stop_reason.value,
            )
        )
    return records


def _aligned_pose_errors(
    poses_est: np.ndarray, poses_true: np.ndarray
) -> tuple[float, float]:
    """Mean heading error (deg) and mean position error after 2D alignment."""
    rotation, translation = align_trajectory_2d(poses_est[:, :2], poses_true[:, :2])
    aligned_xy = poses_est[:, :2] @ rotation.T + translation
    angle = math.atan2(rotation[1, 0], rotation[0, 0])
    heading_err = [
        abs(wrap_angle(est_th + angle - true_th))
        for est_th, true_th in zip(poses_est[:, 2], poses_true[:, 2])
    ]
    trans_err = float(np.mean(np.linalg.norm(aligned_xy - poses_true[:, :2], axis=1)))
    return math.degrees(float(np.mean(heading_err))), trans_err


# PGO inlier threshold: per-edge squared residuals of nominal edges behave
# like a 3-dof chi-square under the default kappa/tau scaling.
_PGO_THRESHOLD_SQ = 25.0


def run_benchmark(
    cfg,
    methods: Sequence[RobustMethod],
    *,
    inlier_threshold_sq: Optional[float] = None,
    stopping_rule: StoppingRule = StoppingRule.COST_CHANGE,
    convergence_tol: float = 1e-5,
    max_iterations: int = 1000,
    workers: int = 1,
    on_record: Optional[Callable[[BenchRecord], None]] = None,
) -> list[BenchRecord]:
    """Full Monte-Carlo sweep: one record per (method, sweep value, run).

    Accepts a RegistrationBenchConfig (sweeping outlier ratios) or a
    PgoBenchConfig (sweeping corrupted loop fractions). Every method sees
    the same instance for a given (value, mc_index); per-cell RNG streams
    are derived from the master seed so results are independent of worker
    count and sweep order. Failures surface through each record's
    stop_reason rather than aborting the sweep.
    """
    if isinstance(cfg, RegistrationBenchConfig):
        values = cfg.outlier_ratios
        threshold = (
            inlier_threshold_sq
            if inlier_threshold_sq is not None
            else default_inlier_threshold_sq(cfg.inlier_noise_std)
        )
        cell = lambda value, mc: _registration_cell(
            cfg, methods, value, mc, threshold, stopping_rule,
            convergence_tol, max_iterations,
        )
    elif isinstance(cfg, PgoBenchConfig):
        values = cfg.corrupted_loop_fraction
        threshold = (
            inlier_threshold_sq if inlier_threshold_sq is not None else _PGO_THRESHOLD_SQ
        )
        cell = lambda value, mc: _pgo_cell(
            cfg, methods, value, mc, threshold, stopping_rule,
            convergence_tol, max_iterations,
        )
    else:
        raise TypeError(f"unsupported benchmark config: {type(cfg).__name__}")

    cells = [(value, mc) for value in values for mc in range(cfg.mc_runs)]
    records: list[BenchRecord] = []
    if workers <= 1:
        batches = [cell(value, mc) for value, mc in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(lambda vm: cell(*vm), cells))
    for batch in batches:
        for record in batch:
            if on_record is not None:
                on_record(record)
            records.append(record)
    records.sort(key=lambda r: (r.method, r.outlier_ratio, r.mc_index))
    return records
