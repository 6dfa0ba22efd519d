"""Tests for SE(2) pose-graph residuals and weighted Gauss-Newton."""

import math
import warnings

import numpy as np
import pytest

from robest.bench import (
    OdometryNoise,
    PgoBenchConfig,
    Trajectory,
    generate_pgo_instance,
)
from robest.posegraph import (
    EdgeKind,
    GaussNewtonWarning,
    PoseGraph2,
    PoseGraphEdge,
    RankDeficiencyError,
    odometry_chain_init,
    pgo_gauss_newton_weighted,
    pgo_problem,
    residuals_pgo,
    rotation2,
    wrap_angle,
)


def make_edge(i, j, rel_xy, rel_theta, kappa=1.0, tau=1.0, kind=EdgeKind.ODOMETRY):
    return PoseGraphEdge(
        i=i, j=j, rel_xy=np.asarray(rel_xy, float), rel_theta=rel_theta,
        kappa=kappa, tau=tau, kind=kind,
    )


def chain_graph(rel_steps, kappa=1.0, tau=1.0):
    """Noise-free chain: pose k+1 reached from pose k by rel_steps[k]."""
    n = len(rel_steps) + 1
    poses = np.zeros((n, 3))
    for k, (dx, dy, dth) in enumerate(rel_steps):
        x, y, th = poses[k]
        step = rotation2(th) @ np.array([dx, dy])
        poses[k + 1] = (x + step[0], y + step[1], wrap_angle(th + dth))
    edges = tuple(
        make_edge(k, k + 1, (dx, dy), dth, kappa, tau)
        for k, (dx, dy, dth) in enumerate(rel_steps)
    )
    return PoseGraph2(vertices=poses, edges=edges), poses


class TestResiduals:
    def test_consistent_poses_give_zero(self):
        graph, poses = chain_graph([(1.0, 0.0, 0.3), (0.5, 0.2, -0.4), (1.0, -0.1, 0.1)])
        np.testing.assert_allclose(residuals_pgo(graph, poses), 0.0, atol=1e-24)

    def test_pi_rotation_mismatch_is_eight(self):
        # ||R(pi) - I||_F^2 = 8 for 2x2 rotations; zero translation gap
        graph = PoseGraph2(
            vertices=np.zeros((2, 3)),
            edges=(make_edge(0, 1, (0.0, 0.0), math.pi),),
        )
        poses = np.zeros((2, 3))
        assert residuals_pgo(graph, poses)[0] == pytest.approx(8.0, rel=1e-14)

    def test_four_one_minus_cos_identity(self):
        for phi in (0.25, 1.0, -2.0):
            graph = PoseGraph2(
                vertices=np.zeros((2, 3)),
                edges=(make_edge(0, 1, (0.0, 0.0), 0.0, kappa=3.0),),
            )
            poses = np.zeros((2, 3))
            poses[1, 2] = phi
            expected = 3.0 * 4.0 * (1.0 - math.cos(phi))
            assert residuals_pgo(graph, poses)[0] == pytest.approx(expected, rel=1e-13)

    def test_matches_bruteforce_matrix_arithmetic(self):
        rng = np.random.default_rng(21)
        n = 8
        poses = np.column_stack(
            [rng.uniform(-5, 5, n), rng.uniform(-5, 5, n), rng.uniform(-3, 3, n)]
        )
        edges = []
        for _ in range(15):
            i, j = rng.choice(n, size=2, replace=False)
            edges.append(
                make_edge(
                    int(i), int(j), rng.uniform(-1, 1, 2), float(rng.uniform(-3, 3)),
                    kappa=float(rng.uniform(0.5, 4)), tau=float(rng.uniform(0.5, 4)),
                )
            )
        graph = PoseGraph2(vertices=poses, edges=tuple(edges))
        r = residuals_pgo(graph, poses)
        for k, e in enumerate(edges):
            def rot(t):
                return np.array(
                    [[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]
                )

            ri, rj = rot(poses[e.i, 2]), rot(poses[e.j, 2])
            rot_term = rj - ri @ rot(e.rel_theta)
            fro = sum(rot_term[a, b] ** 2 for a in range(2) for b in range(2))
            t_term = poses[e.j, :2] - poses[e.i, :2] - ri @ e.rel_xy
            expected = e.kappa * fro + e.tau * float(t_term @ t_term)
            assert r[k] == pytest.approx(expected, rel=1e-12)

    def test_gauge_invariance(self):
        # rigidly moving ALL poses leaves every residual unchanged
        graph, poses = chain_graph([(1.0, 0.1, 0.2), (0.8, -0.3, 0.5), (1.2, 0.0, -0.7)])
        noisy = poses + np.array([0.02, -0.01, 0.03])  # break exact consistency
        base = residuals_pgo(graph, noisy)
        shift_angle = 1.234
        rot = rotation2(shift_angle)
        moved = noisy.copy()
        moved[:, :2] = noisy[:, :2] @ rot.T + np.array([5.0, -7.0])
        moved[:, 2] = noisy[:, 2] + shift_angle
        np.testing.assert_allclose(residuals_pgo(graph, moved), base, rtol=1e-9)


class TestOdometryInit:
    def test_chain_reproduces_measurements_exactly(self):
        graph, poses = chain_graph([(1.0, 0.0, 0.5), (2.0, 0.1, -0.2), (0.5, 0.5, 1.0)])
        init = odometry_chain_init(graph)
        np.testing.assert_allclose(init, poses, atol=1e-12)
        np.testing.assert_allclose(residuals_pgo(graph, init), 0.0, atol=1e-20)

    def test_reverse_edges_are_traversable(self):
        # odometry measured j -> i still initializes i from j
        fwd, poses = chain_graph([(1.0, 0.2, 0.3)])
        back = PoseGraph2(
            vertices=poses,
            edges=(
                make_edge(
                    1, 0,
                    rotation2(poses[1, 2]).T @ (poses[0, :2] - poses[1, :2]),
                    wrap_angle(poses[0, 2] - poses[1, 2]),
                ),
            ),
        )
        init = odometry_chain_init(back)
        np.testing.assert_allclose(init, poses, atol=1e-12)

    def test_disconnected_odometry_names_missing_vertices(self):
        graph = PoseGraph2(
            vertices=np.zeros((4, 3)),
            edges=(
                make_edge(0, 1, (1.0, 0.0), 0.0),
                make_edge(2, 3, (1.0, 0.0), 0.0),
            ),
        )
        with pytest.raises(RankDeficiencyError, match=r"\[2, 3\]"):
            odometry_chain_init(graph)


class TestGaussNewton:
    def test_noise_free_graph_recovers_ground_truth(self):
        cfg = PgoBenchConfig(
            n_poses=20,
            loop_closure_count=8,
            odometry_noise=OdometryNoise(trans_std=0.0, rot_std=0.0),
            corrupted_loop_fraction=(0.0,),
            mc_runs=1,
            seed=5,
        )
        # zero noise stds make every measurement exact
        rng = np.random.default_rng(100)
        graph, gt, _ = generate_pgo_instance(cfg, 0.0, rng)
        poses = pgo_gauss_newton_weighted(graph, np.ones(len(graph.edges)))
        np.testing.assert_allclose(poses[:, :2], gt[:, :2], atol=1e-8)

    def test_zero_weight_loops_equal_odometry_chain(self):
        cfg = PgoBenchConfig(n_poses=15, loop_closure_count=6, mc_runs=1, seed=9,
                             trajectory=Trajectory.GRID)
        rng = np.random.default_rng(7)
        graph, gt, _ = generate_pgo_instance(cfg, 0.0, rng)
        weights = np.array(
            [1.0 if e.kind is EdgeKind.ODOMETRY else 0.0 for e in graph.edges]
        )
        poses = pgo_gauss_newton_weighted(graph, weights)
        chain = odometry_chain_init(graph)
        np.testing.assert_allclose(poses, chain, atol=1e-10)

    def test_descent_from_initialization(self):
        # descent holds whether or not the inner cap is reached
        rng = np.random.default_rng(31)
        for seed in range(5):
            cfg = PgoBenchConfig(n_poses=5, loop_closure_count=3, mc_runs=1, seed=seed)
            graph, _, _ = generate_pgo_instance(cfg, 0.4, rng)
            w = rng.uniform(0.05, 1.0, size=len(graph.edges))
            init_cost = float(w @ residuals_pgo(graph, odometry_chain_init(graph)))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", GaussNewtonWarning)
                poses = pgo_gauss_newton_weighted(graph, w)
            final_cost = float(w @ residuals_pgo(graph, poses))
            assert final_cost <= init_cost + 1e-12

    def test_warm_start_is_respected(self):
        cfg = PgoBenchConfig(n_poses=10, loop_closure_count=4, mc_runs=1, seed=3)
        rng = np.random.default_rng(3)
        graph, gt, _ = generate_pgo_instance(cfg, 0.0, rng)
        w = np.ones(len(graph.edges))
        first = pgo_gauss_newton_weighted(graph, w)
        again = pgo_gauss_newton_weighted(graph, w, warm_start=first)
        np.testing.assert_allclose(again, first, atol=1e-9)

    def test_inner_cap_warns_and_returns_best_iterate(self):
        cfg = PgoBenchConfig(
            n_poses=30, loop_closure_count=15,
            odometry_noise=OdometryNoise(trans_std=0.2, rot_std=0.3),
            mc_runs=1, seed=11,
        )
        rng = np.random.default_rng(11)
        graph, _, _ = generate_pgo_instance(cfg, 0.5, rng)
        w = np.ones(len(graph.edges))
        with pytest.warns(GaussNewtonWarning):
            poses = pgo_gauss_newton_weighted(graph, w, max_inner_iterations=1)
        assert np.all(np.isfinite(poses))

    def test_edge_validation(self):
        with pytest.raises(ValueError):
            make_edge(2, 2, (0.0, 0.0), 0.0)
        with pytest.raises(ValueError):
            make_edge(0, 1, (0.0, 0.0), 0.0, kappa=0.0)
        with pytest.raises(ValueError):
            PoseGraph2(vertices=np.zeros((2, 3)), edges=(make_edge(0, 5, (0, 0), 0.0),))

    def test_problem_wrapper_matches_direct_calls(self):
        cfg = PgoBenchConfig(n_poses=8, loop_closure_count=3, mc_runs=1, seed=2)
        rng = np.random.default_rng(2)
        graph, _, _ = generate_pgo_instance(cfg, 0.0, rng)
        problem, solver = pgo_problem(graph)
        assert problem.num_measurements == len(graph.edges)
        w = np.ones(len(graph.edges))
        poses = solver(w, None)
        np.testing.assert_array_equal(
            problem.residual_sq_fn(poses), residuals_pgo(graph, poses)
        )


class TestWrapAngle:
    def test_range_and_fixed_points(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)  # open at -pi
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        for theta in np.linspace(-10, 10, 101):
            w = wrap_angle(theta)
            assert -math.pi < w <= math.pi
            assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-12)
            assert math.sin(w) == pytest.approx(math.sin(theta), abs=1e-12)
