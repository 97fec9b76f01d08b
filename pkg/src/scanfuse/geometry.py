"""Rigid-body math: SE(3) transforms, twist parameterization, pinhole projection,
and closed-form point-set alignment with stability analysis.

Conventions:
    - A transform maps points from its own (camera) frame into the parent frame:
      ``T(p) = R p + t``.
    - Twists are ``(omega, v)`` with ``omega`` the rotation-generator coefficients
      (radians) and ``v`` the translation part (meters).
    - Pose increments in the solvers are composed on the left:
      ``T_new = exp(xi) @ T_old``.

All functions here are pure and operate on float64; they are safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle, series expansions replace the closed forms.
SMALL_ANGLE = 1e-8


class UnderdeterminedError(ValueError):
    """Raised when a point-set alignment has too few correspondences."""


class InvalidProjectionError(ValueError):
    """Raised when projecting a point at or behind the camera plane."""


def skew(v):
    """Skew-symmetric cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    """Rodrigues rotation from a rotation vector, with a series branch near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / angle
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def so3_log(rotation):
    """Rotation vector of a rotation matrix.

    Accurate for angles up to pi - 1e-6; the exact-pi case falls back to an
    axis extraction that keeps the result finite but carries no accuracy
    guarantee (solver steps never get there).
    """
    R = np.asarray(rotation, dtype=np.float64)
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    antisym = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < SMALL_ANGLE:
        return 0.5 * antisym
    if np.pi - angle < 1e-9:
        # Axis from the dominant column of R + I; sign fixed by the antisymmetric part.
        M = R + np.eye(3)
        col = int(np.argmax(np.diag(M)))
        axis = M[:, col] / np.linalg.norm(M[:, col])
        return angle * axis
    return (0.5 * angle / np.sin(angle)) * antisym


# 1 - cos(angle) cancels catastrophically below this; the extended series is
# accurate to ~1e-19 there.
_SERIES_ANGLE = 1e-4


def _left_jacobian(omega):
    """V matrix coupling rotation and translation in the SE(3) exponential."""
    angle = np.linalg.norm(omega)
    K = skew(omega)
    KK = K @ K
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        return np.eye(3) + (0.5 - a2 / 24.0) * K + (1.0 / 6.0 - a2 / 120.0) * KK
    return (
        np.eye(3)
        + ((1.0 - np.cos(angle)) / a2) * K
        + ((angle - np.sin(angle)) / (a2 * angle)) * KK
    )


def _left_jacobian_inv(omega):
    angle = np.linalg.norm(omega)
    K = skew(omega)
    KK = K @ K
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        return np.eye(3) - 0.5 * K + (1.0 / 12.0 + a2 / 720.0) * KK
    coeff = (1.0 - 0.5 * angle * np.sin(angle) / (1.0 - np.cos(angle))) / a2
    return np.eye(3) - 0.5 * K + coeff * KK


@dataclass
class RigidTransform:
    """SE(3) transform as an orthonormal rotation plus a translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t.copy(), -rot_t @ self.translation)

    def apply(self, points):
        """Transform one point (3,) or a stack of points (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors):
        """Rotate direction vectors (no translation), e.g. normals."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )


@dataclass
class TwistParams:
    """6-DOF tangent-space pose: rotation generator coefficients and translation."""

    omega: np.ndarray
    v: np.ndarray

    @classmethod
    def zero(cls) -> "TwistParams":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @classmethod
    def from_vector(cls, xi) -> "TwistParams":
        xi = np.asarray(xi, dtype=np.float64)
        return cls(xi[:3].copy(), xi[3:6].copy())


def exp_twist(xi: TwistParams) -> RigidTransform:
    """Closed-form SE(3) exponential (Rodrigues form)."""
    omega = np.asarray(xi.omega, dtype=np.float64)
    v = np.asarray(xi.v, dtype=np.float64)
    return RigidTransform(so3_exp(omega), _left_jacobian(omega) @ v)


def exp_twist_vector(xi6) -> RigidTransform:
    """exp_twist on a packed (omega, v) 6-vector."""
    xi6 = np.asarray(xi6, dtype=np.float64)
    return RigidTransform(so3_exp(xi6[:3]), _left_jacobian(xi6[:3]) @ xi6[3:6])


def log_transform(transform: RigidTransform) -> TwistParams:
    """Inverse of exp_twist; accurate for rotation angles below pi - 1e-6."""
    omega = so3_log(transform.rotation)
    v = _left_jacobian_inv(omega) @ transform.translation
    return TwistParams(omega, v)


@dataclass
class Intrinsics:
    """Pinhole camera model; pixel (x, y) samples image coordinate (x, y) exactly."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def project(self, point):
        """Project one camera-space point with z > 0 to pixel coordinates."""
        point = np.asarray(point, dtype=np.float64)
        if point[2] <= 0.0:
            raise InvalidProjectionError("point is at or behind the camera")
        return np.array(
            [
                self.fx * point[0] / point[2] + self.cx,
                self.fy * point[1] / point[2] + self.cy,
            ]
        )

    def project_many(self, points):
        """Vectorized projection; returns (pixels (N,2), in_front mask (N,))."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        in_front = z > 0.0
        safe_z = np.where(in_front, z, 1.0)
        u = self.fx * points[..., 0] / safe_z + self.cx
        v = self.fy * points[..., 1] / safe_z + self.cy
        return np.stack([u, v], axis=-1), in_front

    def unproject(self, pixel, depth):
        """Camera-space point of a pixel at the given depth along the z axis."""
        pixel = np.asarray(pixel, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (pixel[..., 0] - self.cx) / self.fx * depth
        y = (pixel[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)

    def scaled(self, new_width: int, new_height: int) -> "Intrinsics":
        """Intrinsics of a resampled image, preserving pixel-center alignment."""
        sx = new_width / self.width
        sy = new_height / self.height
        return Intrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=new_width,
            height=new_height,
        )


def kabsch(source_points, target_points):
    """Best rigid transform mapping source points onto target points.

    Minimizes the sum of squared distances ``|T(p_k) - q_k|^2`` over rigid
    transforms; a reflection in the SVD solution is corrected by the sign of
    the determinant.

    Returns:
        (RigidTransform, rmsd): the minimizer and the attained
        root-mean-square residual in meters.

    Raises:
        UnderdeterminedError: fewer than 3 point pairs.
    """
    P = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] != Q.shape[0]:
        raise ValueError("point sets must have equal length")
    if P.shape[0] < 3:
        raise UnderdeterminedError("need at least 3 point pairs")
    centroid_p = P.mean(axis=0)
    centroid_q = Q.mean(axis=0)
    H = (P - centroid_p).T @ (Q - centroid_q)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, sign if sign != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = centroid_q - R @ centroid_p
    residuals = P @ R.T + t - Q
    rmsd = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
    return RigidTransform(R, t), rmsd


def alignment_residuals(transform: RigidTransform, source_points, target_points):
    """Per-pair distances ``|T(p_k) - q_k|`` for an estimated alignment."""
    P = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(transform.apply(P) - Q, axis=1)


@dataclass
class StabilityReport:
    """Condition numbers of the two point covariances and their cross-covariance."""

    cond_cov_p: float
    cond_cov_q: float
    cond_cross_cov: float
    stable: bool


def _condition_number(matrix) -> float:
    # Ratio of the two largest singular values: a rank-2 degeneracy detector.
    # Using the smallest singular value instead would flag every planar point
    # set (and every 3-point set, which is always coplanar) as ambiguous, even
    # though such sets determine a unique rigid alignment. Singular values are
    # used so the test is well-defined for the non-symmetric cross-covariance.
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular[1] <= singular[0] * 1e-12 or not np.isfinite(singular[1]):
        return float("inf")
    return float(singular[0] / singular[1])


def condition_analysis(source_points, target_points, limit: float = 100.0) -> StabilityReport:
    """Detect ambiguously determined alignments (collinear or symmetric point sets).

    Computes the 3x3 covariance of each point set and the cross-covariance
    between them; an alignment is stable iff all three condition numbers
    (ratio of the two largest singular values) stay at or below ``limit``.
    Planar point sets are fine; lines and rotationally ambiguous
    configurations are not.
    """
    P = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] < 3 or Q.shape[0] != P.shape[0]:
        raise UnderdeterminedError("need at least 3 point pairs")
    dp = P - P.mean(axis=0)
    dq = Q - Q.mean(axis=0)
    n = P.shape[0]
    cov_p = dp.T @ dp / n
    cov_q = dq.T @ dq / n
    cross = dp.T @ dq / n
    conds = (
        _condition_number(cov_p),
        _condition_number(cov_q),
        _condition_number(cross),
    )
    stable = all(c <= limit for c in conds)
    return StabilityReport(conds[0], conds[1], conds[2], stable)
