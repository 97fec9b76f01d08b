"""Pose-alignment energy and its Gauss-Newton / PCG solver.

The energy couples a sparse term (squared world-space distances of filtered
keypoint correspondences) with dense photometric and geometric terms evaluated
on the cached low-resolution frames. The same machinery serves both hierarchy
levels: frames inside a chunk, or keyframes globally.

Variable layout: the first active frame anchors the gauge and is never a
variable; every other active frame contributes one 6-vector
``(omega, v)`` packed consecutively, so ``n_vars = 6 * (active - 1)``.
Increments are composed on the left: ``T <- exp(dx) o T``.

Inside one nonlinear iteration, the sparse normal-equation product is applied
matrix-free in two passes (J, then J^T) while the dense-term contributions are
precomputed once; the PCG loop then only touches the fixed dense matrix and
the sparse two-pass product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import frustum_overlap, view_angle_deg
from .geometry import RigidTransform, exp_twist_vector, skew
from .interp import bilinear_sample_with_grad


class PcgDivergenceError(RuntimeError):
    """Non-finite values appeared inside the linear solve."""


@dataclass
class EnergyWeights:
    """Relative weights of the energy terms.

    ``dense_ramp`` gives the outer iterations over which the dense weight
    rises linearly from 0 to 1, letting the sparse term settle the global
    structure before the dense refinement takes over.
    """

    sparse: float = 1.0
    photo: float = 0.1
    geo: float = 1.0
    dense_ramp: tuple = (0, 5)


def dense_ramp_weight(weights: EnergyWeights, iteration: int) -> float:
    start, end = weights.dense_ramp
    if end <= start:
        return 1.0 if iteration >= end else 0.0
    return float(np.clip((iteration - start) / (end - start), 0.0, 1.0))


@dataclass
class SolverConfig:
    batch_iterations: int = 10
    online_iterations: int = 3  # per newly arrived keyframe
    pcg_max_iterations: int = 50
    pcg_tolerance: float = 1e-6
    pcg_restart_interval: int = 20
    min_relative_decrease: float = 1e-9
    view_angle_max_deg: float = 60.0
    geo_distance_max: float = 0.15  # ICP-style association gates
    geo_normal_min: float = 0.9
    dense_pixel_stride: int = 1
    dense_bidirectional: bool = False
    prune_residual_max: float = 0.05


# ---------------------------------------------------------------------------
# Sparse term


@dataclass
class SparseTerm:
    """Stacked correspondences with variable-block indices (-1 = fixed frame)."""

    var_i: np.ndarray
    var_j: np.ndarray
    points_i: np.ndarray
    points_j: np.ndarray
    set_index: np.ndarray
    frames_i: np.ndarray
    frames_j: np.ndarray


def build_sparse_term(corr_sets, frame_to_var) -> SparseTerm:
    var_i, var_j, pts_i, pts_j, set_idx, fr_i, fr_j = [], [], [], [], [], [], []
    for s_id, cs in enumerate(corr_sets):
        n = len(cs)
        var_i.append(np.full(n, frame_to_var[cs.frame_i]))
        var_j.append(np.full(n, frame_to_var[cs.frame_j]))
        pts_i.append(np.asarray(cs.points_i, dtype=np.float64))
        pts_j.append(np.asarray(cs.points_j, dtype=np.float64))
        set_idx.append(np.full(n, s_id))
        fr_i.append(np.full(n, cs.frame_i))
        fr_j.append(np.full(n, cs.frame_j))
    if not corr_sets:
        empty = np.zeros(0, dtype=int)
        return SparseTerm(empty, empty, np.zeros((0, 3)), np.zeros((0, 3)), empty, empty, empty)
    return SparseTerm(
        np.concatenate(var_i).astype(int),
        np.concatenate(var_j).astype(int),
        np.vstack(pts_i),
        np.vstack(pts_j),
        np.concatenate(set_idx).astype(int),
        np.concatenate(fr_i).astype(int),
        np.concatenate(fr_j).astype(int),
    )


def eval_sparse(poses: dict, corr_sets):
    """Residuals ``T_i p_i - T_j p_j`` (n, 3) and their summed squared norm."""
    residuals = []
    for cs in corr_sets:
        ti, tj = poses[cs.frame_i], poses[cs.frame_j]
        residuals.append(ti.apply(cs.points_i) - tj.apply(cs.points_j))
    if not residuals:
        return np.zeros((0, 3)), 0.0
    res = np.vstack(residuals)
    return res, float(np.sum(res**2))


# ---------------------------------------------------------------------------
# Dense terms


def build_dense_edges(frame_ids, poses, caches, config: SolverConfig):
    """Unordered frame pairs admitted to the dense terms.

    A pair joins when the viewing directions agree within the angle gate and
    the frusta overlap in both directions.
    """
    edges = []
    ids = list(frame_ids)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            if view_angle_deg(poses[i], poses[j]) >= config.view_angle_max_deg:
                continue
            if frustum_overlap(caches[i], poses[i], caches[j], poses[j]) <= 0.0:
                continue
            if frustum_overlap(caches[j], poses[j], caches[i], poses[i]) <= 0.0:
                continue
            edges.append((i, j))
    return edges


def _directed_edges(edges, bidirectional):
    directed = list(edges)
    if bidirectional:
        directed += [(j, i) for (i, j) in edges]
    return directed


def _source_pixel_data(cache, stride, need_normals):
    mask = cache.valid_depth.copy()
    if need_normals:
        mask &= cache.valid_normal
    if stride > 1:
        keep = np.zeros_like(mask)
        keep[::stride, ::stride] = True
        mask &= keep
    ys, xs = np.nonzero(mask)
    return ys, xs


def _pinhole_jacobian(k, q):
    """d(pixel)/d(point) for camera-space points q (m, 3) -> (m, 2, 3)."""
    z = q[:, 2]
    out = np.zeros((q.shape[0], 2, 3))
    out[:, 0, 0] = k.fx / z
    out[:, 0, 2] = -k.fx * q[:, 0] / z**2
    out[:, 1, 1] = k.fy / z
    out[:, 1, 2] = -k.fy * q[:, 1] / z**2
    return out


def _increment_jacobian(rotation_t, world_points):
    """d(R^T (exp(xi) y - t)) / d(xi) = R^T [-skew(y) | I] for each y (m, 3)."""
    m = world_points.shape[0]
    out = np.empty((m, 3, 6))
    sk = np.zeros((m, 3, 3))
    x, y, z = world_points[:, 0], world_points[:, 1], world_points[:, 2]
    sk[:, 0, 1], sk[:, 0, 2] = -z, y
    sk[:, 1, 0], sk[:, 1, 2] = z, -x
    sk[:, 2, 0], sk[:, 2, 1] = -y, x
    out[:, :, :3] = -np.einsum("ab,mbc->mac", rotation_t, sk)
    out[:, :, 3:] = rotation_t[None, :, :]
    return out


@dataclass
class PhotoAssociation:
    """Frozen pixel subset of a directed photo edge; the warp stays continuous."""

    frame_i: int
    frame_j: int
    points: np.ndarray  # (m, 3) source camera-space points
    reference: np.ndarray  # (m, 2) gradient-image values at the source pixels


@dataclass
class GeoAssociation:
    """Frozen point-to-plane associations of a directed geo edge."""

    frame_i: int
    frame_j: int
    points: np.ndarray  # (m, 3) source camera-space points d
    normals: np.ndarray  # (m, 3) source normals n
    targets: np.ndarray  # (m, 3) associated target points in j's camera space


def associate_photo(poses, frame_i, frame_j, cache_i, cache_j, stride=1):
    """Select source pixels whose warp lands inside frame j right now."""
    ys, xs = _source_pixel_data(cache_i, stride, need_normals=False)
    points = cache_i.points_low[ys, xs].astype(np.float64)
    reference = cache_i.grad_low[ys, xs].astype(np.float64)
    relative = poses[frame_j].inverse() @ poses[frame_i]
    warped = relative.apply(points)
    k = cache_j.intrinsics_low
    pixels, in_front = k.project_many(warped)
    inside = (
        in_front
        & (pixels[:, 0] >= 0.0)
        & (pixels[:, 0] <= k.width - 1)
        & (pixels[:, 1] >= 0.0)
        & (pixels[:, 1] <= k.height - 1)
    )
    return PhotoAssociation(frame_i, frame_j, points[inside], reference[inside])


def associate_geo(poses, frame_i, frame_j, cache_i, cache_j, config: SolverConfig, stride=1):
    """Project-and-fetch association with ICP-style distance/normal pruning."""
    ys, xs = _source_pixel_data(cache_i, stride, need_normals=True)
    points = cache_i.points_low[ys, xs].astype(np.float64)
    normals = cache_i.normals_low[ys, xs].astype(np.float64)
    relative = poses[frame_j].inverse() @ poses[frame_i]
    warped = relative.apply(points)
    k = cache_j.intrinsics_low
    pixels, in_front = k.project_many(warped)
    xi = np.round(pixels[:, 0]).astype(int)
    yi = np.round(pixels[:, 1]).astype(int)
    inside = in_front & (xi >= 0) & (xi < k.width) & (yi >= 0) & (yi < k.height)
    xi = np.clip(xi, 0, k.width - 1)
    yi = np.clip(yi, 0, k.height - 1)
    target_ok = cache_j.valid_depth[yi, xi] & cache_j.valid_normal[yi, xi]
    targets = cache_j.points_low[yi, xi].astype(np.float64)
    target_normals = cache_j.normals_low[yi, xi].astype(np.float64)
    distance = np.linalg.norm(warped - targets, axis=1)
    normal_dot = np.sum(relative.rotate(normals) * target_normals, axis=1)
    good = (
        inside
        & target_ok
        & (distance < config.geo_distance_max)
        & (normal_dot > config.geo_normal_min)
    )
    return GeoAssociation(frame_i, frame_j, points[good], normals[good], targets[good])


def photo_residuals(poses, assoc: PhotoAssociation, cache_j):
    """2-vector gradient-image residuals of a photo association (m, 2)."""
    if assoc.points.shape[0] == 0:
        return np.zeros((0, 2))
    relative = poses[assoc.frame_j].inverse() @ poses[assoc.frame_i]
    warped = relative.apply(assoc.points)
    k = cache_j.intrinsics_low
    pixels, _ = k.project_many(warped)
    value, _, _ = bilinear_sample_with_grad(
        cache_j.grad_low.astype(np.float64), pixels[:, 0], pixels[:, 1]
    )
    return assoc.reference - value


def geo_residuals(poses, assoc: GeoAssociation):
    """Point-to-plane residuals of a geo association (m,)."""
    if assoc.points.shape[0] == 0:
        return np.zeros(0)
    back = poses[assoc.frame_i].inverse() @ poses[assoc.frame_j]
    mapped = back.apply(assoc.targets)
    return np.sum(assoc.normals * (assoc.points - mapped), axis=1)


def photo_linearize(poses, assoc: PhotoAssociation, cache_j):
    """Residuals and analytic Jacobian blocks of one directed photo edge.

    Returns (res (m, 2), J_i (m, 2, 6), J_j (m, 2, 6)) for left-composed
    increments of the two frames; the image-sampling derivative is the exact
    derivative of the bilinear interpolant.
    """
    m = assoc.points.shape[0]
    if m == 0:
        return np.zeros((0, 2)), np.zeros((0, 2, 6)), np.zeros((0, 2, 6))
    pose_i, pose_j = poses[assoc.frame_i], poses[assoc.frame_j]
    world = pose_i.apply(assoc.points)
    q = pose_j.inverse().apply(world)
    k = cache_j.intrinsics_low
    pixels, _ = k.project_many(q)
    value, ddx, ddy = bilinear_sample_with_grad(
        cache_j.grad_low.astype(np.float64), pixels[:, 0], pixels[:, 1]
    )
    res = assoc.reference - value
    dval_du = np.stack([ddx, ddy], axis=2)  # (m, 2, 2)
    du_dq = _pinhole_jacobian(k, q)
    dval_dq = np.einsum("mrc,mck->mrk", dval_du, du_dq)
    dq_dxi = _increment_jacobian(pose_j.rotation.T, world)
    J_i = -np.einsum("mrc,mck->mrk", dval_dq, dq_dxi)
    return res, J_i, -J_i


def geo_linearize(poses, assoc: GeoAssociation):
    """Residuals and analytic Jacobian blocks of one directed geo edge.

    Returns (res (m,), J_i (m, 6), J_j (m, 6)); the frozen target point makes
    the residual locally smooth in the poses.
    """
    m = assoc.points.shape[0]
    if m == 0:
        return np.zeros(0), np.zeros((0, 6)), np.zeros((0, 6))
    pose_i, pose_j = poses[assoc.frame_i], poses[assoc.frame_j]
    world_t = pose_j.apply(assoc.targets)
    mapped = pose_i.inverse().apply(world_t)
    res = np.sum(assoc.normals * (assoc.points - mapped), axis=1)
    dz_dxi_j = _increment_jacobian(pose_i.rotation.T, world_t)
    J_j = -np.einsum("mc,mck->mk", assoc.normals, dz_dxi_j)
    return res, -J_j, J_j


def eval_photo(poses, edges, caches, stride=1):
    """Photometric residuals and energy over directed edges, fresh association."""
    residuals = []
    for (i, j) in edges:
        assoc = associate_photo(poses, i, j, caches[i], caches[j], stride)
        residuals.append(photo_residuals(poses, assoc, caches[j]))
    res = np.vstack(residuals) if residuals else np.zeros((0, 2))
    return res, float(np.sum(res**2))


def eval_geo(poses, edges, caches, config: SolverConfig = None, stride=1):
    """Point-to-plane residuals and energy over directed edges, fresh association."""
    config = config or SolverConfig()
    residuals = []
    for (i, j) in edges:
        assoc = associate_geo(poses, i, j, caches[i], caches[j], config, stride)
        residuals.append(geo_residuals(poses, assoc))
    res = np.concatenate(residuals) if residuals else np.zeros(0)
    return res, float(np.sum(res**2))


# ---------------------------------------------------------------------------
# Normal equations


class NormalEquations:
    """Gauss-Newton system: matrix-free sparse block plus precomputed dense block."""

    def __init__(self, n_vars, w_sparse, world_i, world_j, var_i, var_j,
                 gradient, dense_jtj=None):
        self.n_vars = n_vars
        self.w_sparse = w_sparse
        self.world_i = world_i
        self.world_j = world_j
        self.var_i = var_i
        self.var_j = var_j
        self.gradient = gradient
        self.dense_jtj = dense_jtj
        self.diagonal = self._jacobi_diagonal()

    @property
    def rhs(self):
        return -self.gradient

    def _apply_sparse_jacobian(self, x):
        """J x: one 3-vector per correspondence."""
        blocks = x.reshape(-1, 6)

        def gather(var, world):
            u = np.zeros((var.shape[0], 3))
            active = var >= 0
            if np.any(active):
                g = blocks[var[active]]
                u[active] = g[:, 3:] + np.cross(g[:, :3], world[active])
            return u

        return gather(self.var_i, self.world_i) - gather(self.var_j, self.world_j)

    def _apply_sparse_jacobian_t(self, w):
        """J^T w for per-correspondence 3-vectors w."""
        out = np.zeros((self.n_vars // 6, 6))
        for var, world, sign in (
            (self.var_i, self.world_i, 1.0),
            (self.var_j, self.world_j, -1.0),
        ):
            active = var >= 0
            if not np.any(active):
                continue
            np.add.at(out[:, :3], var[active], sign * np.cross(world[active], w[active]))
            np.add.at(out[:, 3:], var[active], sign * w[active])
        return out.ravel()

    def apply(self, x):
        """(J^T J) x with the sparse part evaluated in two passes."""
        out = np.zeros(self.n_vars)
        if self.world_i.shape[0] and self.w_sparse > 0.0:
            out += self.w_sparse * self._apply_sparse_jacobian_t(self._apply_sparse_jacobian(x))
        if self.dense_jtj is not None:
            out += self.dense_jtj @ x
        return out

    def _jacobi_diagonal(self):
        diag = np.zeros((self.n_vars // 6, 6))
        if self.world_i.shape[0] and self.w_sparse > 0.0:
            for var, world in ((self.var_i, self.world_i), (self.var_j, self.world_j)):
                active = var >= 0
                if not np.any(active):
                    continue
                y = world[active]
                contrib = np.concatenate(
                    [np.sum(y**2, axis=1)[:, None] - y**2, np.ones((y.shape[0], 3))],
                    axis=1,
                )
                np.add.at(diag, var[active], self.w_sparse * contrib)
        diag = diag.ravel()
        if self.dense_jtj is not None:
            diag = diag + np.diag(self.dense_jtj)
        return diag

    def materialize_sparse_jacobian(self):
        """Explicit (3n, N) sparse-term Jacobian, for verification on small problems."""
        n = self.world_i.shape[0]
        J = np.zeros((3 * n, self.n_vars))
        for k in range(n):
            rows = slice(3 * k, 3 * k + 3)
            if self.var_i[k] >= 0:
                c = 6 * self.var_i[k]
                J[rows, c : c + 3] = -skew(self.world_i[k])
                J[rows, c + 3 : c + 6] = np.eye(3)
            if self.var_j[k] >= 0:
                c = 6 * self.var_j[k]
                J[rows, c : c + 3] = skew(self.world_j[k])
                J[rows, c + 3 : c + 6] = -np.eye(3)
        return J

    def materialize(self):
        """Full dense system matrix (tests and small problems only)."""
        A = np.zeros((self.n_vars, self.n_vars))
        if self.world_i.shape[0] and self.w_sparse > 0.0:
            J = self.materialize_sparse_jacobian()
            A += self.w_sparse * (J.T @ J)
        if self.dense_jtj is not None:
            A += self.dense_jtj
        return A


@dataclass
class PcgResult:
    iterations: int
    relative_residual: float


def pcg_solve(equations, max_iterations: int = 50, tolerance: float = 1e-6,
              restart_interval: int = 20):
    """Preconditioned conjugate gradients with a Jacobi preconditioner.

    Iterates until the relative residual drops below ``tolerance`` or the
    iteration budget runs out; the residual is recomputed from scratch every
    ``restart_interval`` iterations to bound floating-point drift. Non-finite
    values raise PcgDivergenceError so the caller can abort the step.
    """
    b = equations.rhs
    norm_b = np.linalg.norm(b)
    x = np.zeros_like(b)
    if norm_b == 0.0:
        return x, PcgResult(0, 0.0)
    inv_diag = 1.0 / np.maximum(equations.diagonal, 1e-12)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    relative = 1.0
    iterations = 0
    for k in range(1, max_iterations + 1):
        iterations = k
        Ap = equations.apply(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise PcgDivergenceError("non-finite curvature in PCG")
        if pAp <= 0.0:
            break  # numerically singular direction (e.g. gauge freedom)
        alpha = rz / pAp
        x += alpha * p
        if k % restart_interval == 0:
            r = b - equations.apply(x)
        else:
            r -= alpha * Ap
        if not np.all(np.isfinite(x)):
            raise PcgDivergenceError("non-finite iterate in PCG")
        relative = float(np.linalg.norm(r) / norm_b)
        if relative < tolerance:
            break
        z = inv_diag * r
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return x, PcgResult(iterations, relative)


# ---------------------------------------------------------------------------
# Gauss-Newton driver


@dataclass
class IterationRecord:
    iteration: int
    energy_before: float
    energy_after: float
    dense_weight: float
    pcg_iterations: int
    pcg_residual: float
    step_norm: float
    accepted: bool


@dataclass
class GaussNewtonStats:
    iterations: list = field(default_factory=list)
    converged: bool = False
    aborted: bool = False

    @property
    def final_energy(self):
        return self.iterations[-1].energy_after if self.iterations else 0.0

    def energies_non_increasing(self) -> bool:
        return all(
            rec.energy_after <= rec.energy_before * (1 + 1e-12) + 1e-15
            for rec in self.iterations
            if rec.accepted
        )


class AlignmentProblem:
    """One joint pose-alignment problem over a set of frames.

    The first frame in ``frame_ids`` anchors the gauge (its pose is not a
    variable). Dense terms join only when ``caches`` are supplied and the
    weights ramp them in. One instance owns its problem exclusively; distinct
    problems may be solved concurrently.
    """

    def __init__(self, frame_ids, poses, corr_sets, caches=None):
        self.frame_ids = list(frame_ids)
        if not self.frame_ids:
            raise ValueError("need at least one frame")
        self.poses = {f: poses[f] for f in self.frame_ids}
        self.corr_sets = list(corr_sets)
        self.caches = caches
        self.frame_to_var = {f: k - 1 for k, f in enumerate(self.frame_ids)}
        self.n_vars = 6 * (len(self.frame_ids) - 1)
        self.sparse = build_sparse_term(self.corr_sets, self.frame_to_var)
        self.dense_edges = []

    # -- linearization ------------------------------------------------------

    def _sparse_state(self):
        rot_i = np.stack([self.poses[f].rotation for f in self.sparse.frames_i]) \
            if self.sparse.frames_i.size else np.zeros((0, 3, 3))
        rot_j = np.stack([self.poses[f].rotation for f in self.sparse.frames_j]) \
            if self.sparse.frames_j.size else np.zeros((0, 3, 3))
        t_i = np.stack([self.poses[f].translation for f in self.sparse.frames_i]) \
            if self.sparse.frames_i.size else np.zeros((0, 3))
        t_j = np.stack([self.poses[f].translation for f in self.sparse.frames_j]) \
            if self.sparse.frames_j.size else np.zeros((0, 3))
        world_i = np.einsum("nab,nb->na", rot_i, self.sparse.points_i) + t_i
        world_j = np.einsum("nab,nb->na", rot_j, self.sparse.points_j) + t_j
        residual = world_i - world_j
        return world_i, world_j, residual

    def _dense_blocks(self, weights, w_dense, config):
        """Assemble the dense-term J^T J and gradient; freeze associations."""
        jtj = np.zeros((self.n_vars, self.n_vars))
        grad = np.zeros(self.n_vars)
        photo_assocs, geo_assocs = [], []
        energy_photo = 0.0
        energy_geo = 0.0
        stride = config.dense_pixel_stride
        for (i, j) in _directed_edges(self.dense_edges, config.dense_bidirectional):
            cache_i, cache_j = self.caches[i], self.caches[j]
            vi, vj = self.frame_to_var[i], self.frame_to_var[j]

            if weights.photo > 0.0:
                assoc = associate_photo(self.poses, i, j, cache_i, cache_j, stride)
                photo_assocs.append(assoc)
                if assoc.points.shape[0]:
                    res, J_i, J_j = photo_linearize(self.poses, assoc, cache_j)
                    energy_photo += float(np.sum(res**2))
                    self._accumulate(jtj, grad, J_i, J_j, res, vi, vj, w_dense * weights.photo)

            if weights.geo > 0.0:
                assoc = associate_geo(self.poses, i, j, cache_i, cache_j, config, stride)
                geo_assocs.append(assoc)
                if assoc.points.shape[0]:
                    res, J_i, J_j = geo_linearize(self.poses, assoc)
                    self._accumulate(
                        jtj, grad, J_i[:, None, :], J_j[:, None, :], res[:, None],
                        vi, vj, w_dense * weights.geo,
                    )
                    energy_geo += float(np.sum(res**2))

        return jtj, grad, energy_photo, energy_geo, photo_assocs, geo_assocs

    @staticmethod
    def _accumulate(jtj, grad, J_i, J_j, res, vi, vj, scale):
        """Scatter one edge's J^T J blocks and gradient into the system."""
        if res.ndim == 1:
            res = res[:, None]
        for va, Ja in ((vi, J_i), (vj, J_j)):
            if va < 0:
                continue
            grad[6 * va : 6 * va + 6] += scale * np.einsum("mrk,mr->k", Ja, res)
            for vb, Jb in ((vi, J_i), (vj, J_j)):
                if vb < 0:
                    continue
                block = scale * np.einsum("mra,mrb->ab", Ja, Jb)
                jtj[6 * va : 6 * va + 6, 6 * vb : 6 * vb + 6] += block

    def normal_equations(self, weights: EnergyWeights, w_dense: float,
                         config: SolverConfig):
        """Build the normal equations at the current poses.

        Returns (equations, energy, photo_assocs, geo_assocs); the
        associations let the caller re-evaluate the same linearization's
        energy after a step.
        """
        world_i, world_j, residual = self._sparse_state()
        gradient = np.zeros(self.n_vars)
        eqs_proto = NormalEquations(
            self.n_vars, weights.sparse, world_i, world_j,
            self.sparse.var_i, self.sparse.var_j, gradient,
        )
        if residual.shape[0]:
            gradient += weights.sparse * eqs_proto._apply_sparse_jacobian_t(residual)
        energy = weights.sparse * float(np.sum(residual**2))

        dense_jtj = None
        photo_assocs, geo_assocs = [], []
        if self.caches is not None and w_dense > 0.0 and self.dense_edges:
            dense_jtj, dense_grad, e_photo, e_geo, photo_assocs, geo_assocs = (
                self._dense_blocks(weights, w_dense, config)
            )
            gradient += dense_grad
            energy += w_dense * (weights.photo * e_photo + weights.geo * e_geo)
        equations = NormalEquations(
            self.n_vars, weights.sparse, world_i, world_j,
            self.sparse.var_i, self.sparse.var_j, gradient, dense_jtj,
        )
        return equations, energy, photo_assocs, geo_assocs

    def _energy_with_frozen_associations(self, weights, w_dense, photo_assocs, geo_assocs):
        _, energy = eval_sparse(self.poses, self.corr_sets)
        energy *= weights.sparse
        if w_dense > 0.0:
            e_photo = sum(
                float(np.sum(photo_residuals(self.poses, a, self.caches[a.frame_j]) ** 2))
                for a in photo_assocs
            )
            e_geo = sum(float(np.sum(geo_residuals(self.poses, a) ** 2)) for a in geo_assocs)
            energy += w_dense * (weights.photo * e_photo + weights.geo * e_geo)
        return energy

    def _apply_step(self, dx):
        for f in self.frame_ids[1:]:
            block = dx[6 * self.frame_to_var[f] : 6 * self.frame_to_var[f] + 6]
            self.poses[f] = exp_twist_vector(block) @ self.poses[f]

    # -- outer loop ----------------------------------------------------------

    def solve(self, weights: EnergyWeights, config: SolverConfig,
              max_iterations: int = None) -> GaussNewtonStats:
        """Gauss-Newton: linearize, PCG-solve, left-compose the increment.

        Stops on a relative energy decrease below the configured threshold or
        after ``max_iterations``; two consecutive energy increases abort the
        solve and restore the best poses seen.
        """
        if max_iterations is None:
            max_iterations = config.batch_iterations
        stats = GaussNewtonStats()
        if self.n_vars == 0:
            stats.converged = True
            return stats
        if self.caches is not None:
            self.dense_edges = build_dense_edges(self.frame_ids, self.poses, self.caches, config)
        best_energy = np.inf
        best_poses = dict(self.poses)
        consecutive_increases = 0
        for it in range(max_iterations):
            w_dense = dense_ramp_weight(weights, it)
            equations, energy_before, photo_assocs, geo_assocs = self.normal_equations(
                weights, w_dense, config
            )
            if energy_before <= 1e-18:
                stats.converged = True
                stats.iterations.append(IterationRecord(
                    it, energy_before, energy_before, w_dense, 0, 0.0, 0.0, True))
                break
            try:
                dx, pcg = pcg_solve(
                    equations,
                    max_iterations=config.pcg_max_iterations,
                    tolerance=config.pcg_tolerance,
                    restart_interval=config.pcg_restart_interval,
                )
            except PcgDivergenceError:
                stats.aborted = True
                break
            previous = dict(self.poses)
            self._apply_step(dx)
            energy_after = self._energy_with_frozen_associations(
                weights, w_dense, photo_assocs, geo_assocs
            )
            accepted = energy_after <= energy_before
            stats.iterations.append(IterationRecord(
                it, energy_before, energy_after, w_dense,
                pcg.iterations, pcg.relative_residual,
                float(np.linalg.norm(dx)), accepted,
            ))
            if accepted:
                consecutive_increases = 0
            else:
                consecutive_increases += 1
                if consecutive_increases >= 2:
                    self.poses = best_poses
                    stats.aborted = True
                    break
            if energy_after < best_energy:
                best_energy = energy_after
                best_poses = dict(self.poses)
            if accepted and (energy_before - energy_after) < config.min_relative_decrease * max(
                energy_before, 1e-30
            ):
                stats.converged = True
                break
            del previous
        else:
            stats.converged = True
        return stats


# ---------------------------------------------------------------------------
# Residual-based pruning


@dataclass
class PruneReport:
    removed_pairs: list
    invalid_frames: list
    rounds: int
    final_max_residual: float


def max_residual_set(poses, corr_sets):
    """Index of the correspondence set containing the worst residual, and its value."""
    worst_set, worst = -1, -1.0
    for idx, cs in enumerate(corr_sets):
        res = np.linalg.norm(
            poses[cs.frame_i].apply(cs.points_i) - poses[cs.frame_j].apply(cs.points_j),
            axis=1,
        )
        peak = float(res.max()) if res.size else 0.0
        if peak > worst:
            worst, worst_set = peak, idx
    return worst_set, worst


def solve_with_pruning(frame_ids, poses, corr_sets, weights, config: SolverConfig,
                       caches=None, max_iterations=None):
    """Alternate solving and pruning until the worst residual is in bounds.

    After each solve, if the maximum per-correspondence residual exceeds the
    prune threshold, the whole set between the offending frame pair is
    removed and the problem re-solved. Frames left without any correspondence
    drop out of the optimization and are reported invalid. Each round removes
    at least one set, so the loop terminates.

    Returns (poses, surviving_sets, PruneReport, stats_list).
    """
    sets = list(corr_sets)
    poses = dict(poses)
    removed_pairs = []
    invalid_frames = []
    stats_list = []
    rounds = 0
    r_max = 0.0
    while True:
        rounds += 1
        connected = {f for cs in sets for f in (cs.frame_i, cs.frame_j)}
        active = [f for f in frame_ids if f in connected]
        newly_invalid = [f for f in frame_ids if f not in connected and f not in invalid_frames]
        invalid_frames.extend(newly_invalid)
        if len(active) < 2 or not sets:
            r_max = 0.0
            break
        problem = AlignmentProblem(active, poses, sets, caches)
        stats_list.append(problem.solve(weights, config, max_iterations))
        poses.update(problem.poses)
        worst_idx, r_max = max_residual_set(poses, sets)
        if r_max <= config.prune_residual_max:
            break
        offender = sets.pop(worst_idx)
        removed_pairs.append((offender.frame_i, offender.frame_j))
    report = PruneReport(removed_pairs, invalid_frames, rounds, r_max)
    return poses, sets, report, stats_list
