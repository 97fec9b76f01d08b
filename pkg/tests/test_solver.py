import numpy as np
import pytest
from scipy import ndimage

from scanfuse.filters import CorrespondenceSet
from scanfuse.frames import RgbdFrame, build_cache
from scanfuse.geometry import Intrinsics, RigidTransform, TwistParams, exp_twist, exp_twist_vector
from scanfuse.solver import (
    AlignmentProblem,
    EnergyWeights,
    SolverConfig,
    associate_geo,
    associate_photo,
    build_dense_edges,
    dense_ramp_weight,
    eval_geo,
    eval_photo,
    eval_sparse,
    geo_linearize,
    geo_residuals,
    max_residual_set,
    pcg_solve,
    photo_linearize,
    photo_residuals,
    solve_with_pruning,
)

K = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
SPARSE_ONLY = EnergyWeights(sparse=1.0, photo=0.0, geo=0.0)
CONFIG = SolverConfig()


def make_set(frame_i, frame_j, points_i, points_j):
    n = len(points_i)
    return CorrespondenceSet(
        frame_i=frame_i,
        frame_j=frame_j,
        points_i=np.asarray(points_i, float),
        points_j=np.asarray(points_j, float),
        indices=np.zeros((n, 2), dtype=int),
        transform=None,
        valid=True,
    )


def chunk_ground_truth(rng, n_frames=11, n_world=120, motion=0.03):
    """A chunk-like problem: small consecutive motions, shared world points."""
    poses = [RigidTransform.identity()]
    for _ in range(n_frames - 1):
        step = exp_twist(TwistParams(rng.normal(scale=motion, size=3) * 0.3,
                                     rng.normal(scale=motion, size=3)))
        poses.append(poses[-1] @ step)
    world = rng.uniform([-1.5, -1.2, 1.0], [1.5, 1.2, 3.5], size=(n_world, 3))
    return poses, world


def chunk_corr_sets(rng, poses, world, per_pair=25, noise=0.0):
    sets = []
    n = len(poses)
    for i in range(n):
        inv_i = poses[i].inverse()
        for j in range(i + 1, n):
            inv_j = poses[j].inverse()
            pick = rng.choice(world.shape[0], size=per_pair, replace=False)
            pts_i = inv_i.apply(world[pick])
            pts_j = inv_j.apply(world[pick])
            if noise > 0.0:
                pts_i = pts_i + rng.normal(scale=noise, size=pts_i.shape)
                pts_j = pts_j + rng.normal(scale=noise, size=pts_j.shape)
            sets.append(make_set(i, j, pts_i, pts_j))
    return sets


def textured_cache(index=0, seed=0, tilt=0.05):
    """Cache of a gently tilted, smoothly textured plane (no renderer needed)."""
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.normal(size=(480, 640)), 8.0)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    color = np.repeat((40 + 170 * noise)[..., None].astype(np.uint8), 3, axis=2)
    xs = np.linspace(-1, 1, 640)[None, :]
    ys = np.linspace(-1, 1, 480)[:, None]
    depth = (2.0 + tilt * xs + 0.5 * tilt * ys).astype(np.float32)
    frame = RgbdFrame(index=index, color=color, depth=np.broadcast_to(depth, (480, 640)).copy())
    return build_cache(frame, K)


class TestEvalSparse:
    def test_exact_energy_zero(self):
        rng = np.random.default_rng(0)
        poses, world = chunk_ground_truth(rng, n_frames=4)
        sets = chunk_corr_sets(rng, poses, world, per_pair=10)
        _, energy = eval_sparse({i: p for i, p in enumerate(poses)}, sets)
        assert energy < 1e-20

    def test_hand_evaluated_offset(self):
        # One correspondence, the second pose off by 0.1 m: energy 0.01.
        p = np.array([[0.2, -0.1, 1.5]])
        sets = [make_set(0, 1, p, p)]
        poses = {0: RigidTransform.identity(),
                 1: RigidTransform(np.eye(3), np.array([0.1, 0.0, 0.0]))}
        _, energy = eval_sparse(poses, sets)
        assert energy == pytest.approx(0.01, rel=1e-12)

    def test_energy_invariant_under_global_transform(self):
        rng = np.random.default_rng(1)
        poses, world = chunk_ground_truth(rng, n_frames=5)
        sets = chunk_corr_sets(rng, poses, world, per_pair=15, noise=0.01)
        pose_map = {i: p for i, p in enumerate(poses)}
        _, base = eval_sparse(pose_map, sets)
        G = exp_twist(TwistParams(np.array([0.4, -0.2, 0.7]), np.array([1.0, -2.0, 0.5])))
        moved = {i: G @ p for i, p in pose_map.items()}
        _, energy = eval_sparse(moved, sets)
        assert energy == pytest.approx(base, abs=1e-10 * max(base, 1.0))


class TestDenseTerms:
    def setup_method(self):
        self.caches = {0: textured_cache(0, seed=3), 1: textured_cache(1, seed=3)}
        self.identity_poses = {0: RigidTransform.identity(), 1: RigidTransform.identity()}

    def test_photo_zero_on_identical_views(self):
        _, energy = eval_photo(self.identity_poses, [(0, 1)], self.caches)
        assert energy < 1e-6

    def test_geo_zero_on_identical_views(self):
        _, energy = eval_geo(self.identity_poses, [(0, 1)], self.caches, CONFIG)
        assert energy < 1e-8

    def test_geo_normal_offset(self):
        # Fronto-parallel plane: 1 mm along the normal shows up per pixel.
        flat = {0: textured_cache(0, seed=4, tilt=0.0), 1: textured_cache(1, seed=4, tilt=0.0)}
        poses = {0: RigidTransform.identity(),
                 1: RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.001]))}
        res, _ = eval_geo(poses, [(0, 1)], flat, CONFIG)
        assert res.size > 1000
        assert np.allclose(np.abs(res), 0.001, atol=2e-4)

    def test_geo_in_plane_slide_is_null(self):
        flat = {0: textured_cache(0, seed=5, tilt=0.0), 1: textured_cache(1, seed=5, tilt=0.0)}
        poses = {0: RigidTransform.identity(),
                 1: RigidTransform(np.eye(3), np.array([0.001, 0.0, 0.0]))}
        res, energy = eval_geo(poses, [(0, 1)], flat, CONFIG)
        assert res.size > 1000
        assert energy < 1e-8 * res.size

    def test_self_pair_never_in_edge_set(self):
        poses = self.identity_poses
        edges = build_dense_edges([0, 1], poses, self.caches, CONFIG)
        assert (0, 0) not in edges and (1, 1) not in edges
        assert (0, 1) in edges

    def test_edge_gates(self):
        # Opposite viewing directions violate the angle gate.
        poses = {0: RigidTransform.identity(),
                 1: exp_twist(TwistParams(np.array([0.0, np.pi, 0.0]), np.zeros(3)))}
        assert build_dense_edges([0, 1], poses, self.caches, CONFIG) == []


def fd_columns(res_fn, poses, frame, h=1e-6):
    """Central finite differences of a residual function w.r.t. one frame's twist."""
    cols = []
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = h
        plus = dict(poses)
        plus[frame] = exp_twist_vector(delta) @ poses[frame]
        minus = dict(poses)
        minus[frame] = exp_twist_vector(-delta) @ poses[frame]
        cols.append((res_fn(plus) - res_fn(minus)) / (2 * h))
    return np.stack(cols, axis=-1)


class TestJacobians:
    def random_pose_pair(self, rng):
        rel = exp_twist(TwistParams(rng.normal(scale=0.01, size=3),
                                    rng.normal(scale=0.01, size=3)))
        base = exp_twist(TwistParams(rng.normal(scale=0.2, size=3),
                                     rng.normal(scale=0.2, size=3)))
        return {0: base, 1: base @ rel}

    def test_sparse_jacobian_matches_fd(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            poses, world = chunk_ground_truth(rng, n_frames=3)
            sets = chunk_corr_sets(rng, poses, world, per_pair=8, noise=0.005)
            pose_map = {i: p for i, p in enumerate(poses)}
            problem = AlignmentProblem([0, 1, 2], pose_map, sets)
            eqs, _, _, _ = problem.normal_equations(SPARSE_ONLY, 0.0, CONFIG)
            J = eqs.materialize_sparse_jacobian()
            for frame in (1, 2):
                fd = fd_columns(
                    lambda p: eval_sparse(p, sets)[0].ravel(), pose_map, frame
                )
                var = problem.frame_to_var[frame]
                block = J[:, 6 * var : 6 * var + 6]
                assert np.linalg.norm(fd - block) <= 1e-4 * max(np.linalg.norm(block), 1.0)

    def test_photo_jacobian_matches_fd(self):
        rng = np.random.default_rng(8)
        caches = {0: textured_cache(0, seed=6), 1: textured_cache(1, seed=6)}
        for _ in range(5):
            poses = self.random_pose_pair(rng)
            assoc = associate_photo(poses, 0, 1, caches[0], caches[1])
            res, J_i, J_j = photo_linearize(poses, assoc, caches[1])
            # Drop pixels sitting on bilinear cell boundaries where the
            # interpolant is not differentiable.
            pixels, _ = caches[1].intrinsics_low.project_many(
                (poses[1].inverse() @ poses[0]).apply(assoc.points)
            )
            frac = pixels - np.floor(pixels)
            safe = np.all((frac > 0.01) & (frac < 0.99), axis=1)
            for frame, J in ((0, J_i), (1, J_j)):
                fd = fd_columns(
                    lambda p: photo_residuals(p, assoc, caches[1]), poses, frame
                )
                err = np.linalg.norm(fd[safe] - J[safe])
                assert err <= 1e-4 * max(np.linalg.norm(J[safe]), 1e-6)

    def test_geo_jacobian_matches_fd(self):
        rng = np.random.default_rng(9)
        caches = {0: textured_cache(0, seed=7), 1: textured_cache(1, seed=7)}
        for _ in range(5):
            poses = self.random_pose_pair(rng)
            assoc = associate_geo(poses, 0, 1, caches[0], caches[1], CONFIG)
            assert assoc.points.shape[0] > 100
            res, J_i, J_j = geo_linearize(poses, assoc)
            for frame, J in ((0, J_i), (1, J_j)):
                fd = fd_columns(lambda p: geo_residuals(p, assoc), poses, frame)
                err = np.linalg.norm(fd - J)
                assert err <= 1e-4 * max(np.linalg.norm(J), 1e-6)


class TestNormalEquations:
    def test_single_correspondence_block_pattern(self):
        # One correspondence between frames 1 and 2 touches exactly their
        # 12x12 variable block.
        p = np.array([[0.1, 0.2, 2.0]])
        sets = [make_set(1, 2, p, p)]
        poses = {i: RigidTransform.identity() for i in range(3)}
        problem = AlignmentProblem([0, 1, 2], poses, sets)
        eqs, _, _, _ = problem.normal_equations(SPARSE_ONLY, 0.0, CONFIG)
        A = eqs.materialize()
        assert A.shape == (12, 12)
        assert np.count_nonzero(A) > 0

    def test_matrix_free_matches_materialized(self):
        rng = np.random.default_rng(10)
        poses, world = chunk_ground_truth(rng, n_frames=3)
        sets = chunk_corr_sets(rng, poses, world, per_pair=12, noise=0.01)
        pose_map = {i: p for i, p in enumerate(poses)}
        problem = AlignmentProblem([0, 1, 2], pose_map, sets)
        eqs, _, _, _ = problem.normal_equations(SPARSE_ONLY, 0.0, CONFIG)
        A = eqs.materialize()
        applied = np.stack([eqs.apply(col) for col in np.eye(eqs.n_vars)], axis=1)
        assert np.allclose(applied, A, atol=1e-10)

    def test_jacobi_diagonal_matches_materialized(self):
        rng = np.random.default_rng(11)
        poses, world = chunk_ground_truth(rng, n_frames=3)
        sets = chunk_corr_sets(rng, poses, world, per_pair=12, noise=0.01)
        pose_map = {i: p for i, p in enumerate(poses)}
        problem = AlignmentProblem([0, 1, 2], pose_map, sets)
        eqs, _, _, _ = problem.normal_equations(SPARSE_ONLY, 0.0, CONFIG)
        assert np.allclose(eqs.diagonal, np.diag(eqs.materialize()), atol=1e-10)

    def test_applicator_symmetric_and_psd(self):
        rng = np.random.default_rng(12)
        poses, world = chunk_ground_truth(rng, n_frames=4)
        sets = chunk_corr_sets(rng, poses, world, per_pair=10, noise=0.02)
        pose_map = {i: p for i, p in enumerate(poses)}
        problem = AlignmentProblem([0, 1, 2, 3], pose_map, sets)
        eqs, _, _, _ = problem.normal_equations(SPARSE_ONLY, 0.0, CONFIG)
        for _ in range(20):
            u = rng.normal(size=eqs.n_vars)
            v = rng.normal(size=eqs.n_vars)
            uav = float(u @ eqs.apply(v))
            vau = float(v @ eqs.apply(u))
            assert uav == pytest.approx(vau, rel=1e-8, abs=1e-10)
            assert float(v @ eqs.apply(v)) >= -1e-10


class DenseSystem:
    """Duck-typed dense SPD system for exercising the PCG loop alone."""

    def __init__(self, A, b):
        self.A = A
        self.rhs = b
        self.diagonal = np.diag(A).copy()
        self.gradient = -b

    def apply(self, x):
        return self.A @ x


class TestPcg:
    def test_identity_system_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0, 0.5])
        x, info = pcg_solve(DenseSystem(np.eye(4), b))
        assert np.allclose(x, b, atol=1e-12)
        assert info.iterations == 1

    def test_matches_direct_solve(self):
        rng = np.random.default_rng(13)
        for n in (10, 30):
            M = rng.normal(size=(n, n))
            A = M @ M.T + n * np.eye(n)
            b = rng.normal(size=n)
            x, _ = pcg_solve(DenseSystem(A, b), max_iterations=500, tolerance=1e-14)
            assert np.linalg.norm(x - np.linalg.solve(A, b)) < 1e-8

    def test_singular_gauge_stalls(self):
        # Rank-deficient system with a right-hand side outside the range:
        # the residual cannot reach the tolerance.
        rng = np.random.default_rng(14)
        M = rng.normal(size=(6, 4))
        A = M @ M.T  # rank 4 of 6
        b = rng.normal(size=6)
        x, info = pcg_solve(DenseSystem(A, b), max_iterations=100, tolerance=1e-10)
        assert info.relative_residual > 1e-10

    def test_production_layout_fixes_first_frame(self):
        poses = {i: RigidTransform.identity() for i in range(3)}
        problem = AlignmentProblem([0, 1, 2], poses, [])
        assert problem.frame_to_var[0] == -1
        assert problem.n_vars == 12


class TestGaussNewton:
    def test_already_optimal_stops_immediately(self):
        rng = np.random.default_rng(15)
        poses, world = chunk_ground_truth(rng, n_frames=4)
        sets = chunk_corr_sets(rng, poses, world, per_pair=10)
        pose_map = {i: p for i, p in enumerate(poses)}
        problem = AlignmentProblem(list(range(4)), pose_map, sets)
        stats = problem.solve(SPARSE_ONLY, CONFIG)
        assert stats.converged
        assert len(stats.iterations) == 1

    def ate(self, estimated, truth):
        errs = [np.linalg.norm(estimated[i].translation - truth[i].translation)
                for i in range(len(truth))]
        return float(np.sqrt(np.mean(np.square(errs))))

    def test_chunk_solve_exact(self):
        rng = np.random.default_rng(16)
        truth, world = chunk_ground_truth(rng)
        sets = chunk_corr_sets(rng, truth, world)
        init = {i: RigidTransform.identity() for i in range(11)}
        problem = AlignmentProblem(list(range(11)), init, sets)
        stats = problem.solve(SPARSE_ONLY, CONFIG, max_iterations=30)
        assert stats.energies_non_increasing()
        assert self.ate(problem.poses, truth) < 1e-6

    def test_chunk_solve_noisy(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            truth, world = chunk_ground_truth(rng)
            sets = chunk_corr_sets(rng, truth, world, noise=0.005)
            init = {i: RigidTransform.identity() for i in range(11)}
            problem = AlignmentProblem(list(range(11)), init, sets)
            problem.solve(SPARSE_ONLY, CONFIG, max_iterations=20)
            assert self.ate(problem.poses, truth) < 0.005

    def test_gauge_invariance_of_relative_poses(self):
        rng = np.random.default_rng(17)
        truth, world = chunk_ground_truth(rng, n_frames=6)
        sets = chunk_corr_sets(rng, truth, world, per_pair=20)

        def solve_from(initial):
            problem = AlignmentProblem(list(range(6)), initial, sets)
            problem.solve(SPARSE_ONLY, CONFIG, max_iterations=30)
            return problem.poses

        a = solve_from({i: RigidTransform.identity() for i in range(6)})
        b = solve_from({i: truth[i] for i in range(6)})
        for i in range(1, 6):
            rel_a = a[0].inverse() @ a[i]
            rel_b = b[0].inverse() @ b[i]
            assert np.allclose(rel_a.rotation, rel_b.rotation, atol=1e-8)
            assert np.allclose(rel_a.translation, rel_b.translation, atol=1e-8)

    def test_dense_ramp(self):
        w = EnergyWeights(dense_ramp=(0, 4))
        assert dense_ramp_weight(w, 0) == 0.0
        assert dense_ramp_weight(w, 2) == pytest.approx(0.5)
        assert dense_ramp_weight(w, 4) == 1.0
        assert dense_ramp_weight(w, 9) == 1.0


class TestPruning:
    def build_problem(self, rng, n_frames=6):
        truth, world = chunk_ground_truth(rng, n_frames=n_frames)
        sets = chunk_corr_sets(rng, truth, world, per_pair=15, noise=0.001)
        return truth, sets

    def test_clean_problem_unchanged(self):
        rng = np.random.default_rng(18)
        truth, sets = self.build_problem(rng)
        init = {i: RigidTransform.identity() for i in range(6)}
        poses, kept, report, _ = solve_with_pruning(
            list(range(6)), init, sets, SPARSE_ONLY, CONFIG
        )
        assert report.removed_pairs == []
        assert report.invalid_frames == []
        assert len(kept) == len(sets)
        assert report.final_max_residual <= CONFIG.prune_residual_max

    def test_false_loop_closure_removed(self):
        rng = np.random.default_rng(19)
        truth, sets = self.build_problem(rng)
        # A fabricated, badly inconsistent set between frames 1 and 4.
        bogus_pts = rng.uniform(-0.5, 0.5, size=(8, 3)) + np.array([0, 0, 2.0])
        bogus = make_set(1, 4, bogus_pts, bogus_pts + np.array([0.5, 0.0, 0.0]))
        init = {i: RigidTransform.identity() for i in range(6)}
        poses, kept, report, _ = solve_with_pruning(
            list(range(6)), init, sets + [bogus], SPARSE_ONLY, CONFIG
        )
        assert (1, 4) in report.removed_pairs
        assert len(kept) == len(sets)
        assert report.final_max_residual <= CONFIG.prune_residual_max

    def test_orphaned_frame_marked_invalid(self):
        rng = np.random.default_rng(20)
        p = rng.uniform(-0.5, 0.5, size=(10, 3)) + np.array([0, 0, 2.0])
        sets = [make_set(0, 1, p, p)]
        init = {i: RigidTransform.identity() for i in range(3)}
        poses, kept, report, _ = solve_with_pruning(
            [0, 1, 2], init, sets, SPARSE_ONLY, CONFIG
        )
        assert report.invalid_frames == [2]

    def test_max_residual_set(self):
        p = np.array([[0.0, 0.0, 2.0], [0.5, 0.0, 2.0], [0.0, 0.5, 2.0]])
        good = make_set(0, 1, p, p)
        bad = make_set(1, 2, p, p + np.array([0.2, 0.0, 0.0]))
        poses = {i: RigidTransform.identity() for i in range(3)}
        idx, r_max = max_residual_set(poses, [good, bad])
        assert idx == 1
        assert r_max == pytest.approx(0.2, rel=1e-12)
