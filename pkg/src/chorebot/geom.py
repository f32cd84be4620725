"""Rigid-body poses, body-frame relative actions, and small geometric fits.

Conventions:
  * quaternions are scalar-first (w, x, y, z) and kept canonical with w >= 0,
  * relative-action translations are expressed in the source pose's body frame,
  * SE(2) poses wrap theta into (-pi, pi].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidPoseError

QUAT_TOL = 1e-9
# |dot| above this, slerp falls back to normalized lerp
SLERP_LERP_THRESHOLD = 1.0 - 1e-6
AFFINE_COND_LIMIT = 1e10


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidPoseError(f"quaternion must have shape (4,), got {q.shape}")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > QUAT_TOL:
        raise InvalidPoseError(f"quaternion norm {n} deviates from 1 beyond {QUAT_TOL}")
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    if q[0] < 0.0:
        q = -q
    return q


def rot_z(angle: float) -> np.ndarray:
    """Quaternion for a rotation about +z."""
    return quat_from_axis_angle([0.0, 0.0, 1.0], angle)


def quat_angle(q0: np.ndarray, q1: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions (shortest arc)."""
    dot = abs(float(np.dot(q0, q1)))
    return 2.0 * float(np.arccos(np.clip(dot, -1.0, 1.0)))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector for a unit quaternion."""
    if q[0] < 0.0:
        q = -q
    v = q[1:4]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v  # small-angle limit: q ~ (1, v/2)
    angle = 2.0 * float(np.arctan2(s, q[0]))
    return (angle / s) * v


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions.

    Falls back to normalized linear interpolation when the endpoints are
    nearly aligned (|dot| > 1 - 1e-6).
    """
    q0 = _canonical_quat(q0)
    q1 = _canonical_quat(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > SLERP_LERP_THRESHOLD:
        out = q0 + t * (q1 - q0)
        out = out / np.linalg.norm(out)
    else:
        theta = np.arccos(np.clip(dot, -1.0, 1.0))
        sin_theta = np.sin(theta)
        out = (np.sin((1.0 - t) * theta) * q0 + np.sin(t * theta) * q1) / sin_theta
    if out[0] < 0.0:
        out = -out
    return out


@dataclass(frozen=True)
class Pose3:
    """SE(3) pose: position in meters plus a canonical unit quaternion."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (3,):
            raise InvalidPoseError(f"position must have shape (3,), got {p.shape}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", _canonical_quat(self.q))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.p
        return T

    def allclose(self, other: "Pose3", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.p, other.p, atol=tol)
            and np.allclose(self.q, other.q, atol=tol)
        )


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose with theta wrapped into (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    @property
    def p(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def allclose(self, other: "Pose2", tol: float = 1e-9) -> bool:
        dtheta = wrap_angle(self.theta - other.theta)
        return (
            abs(self.x - other.x) <= tol
            and abs(self.y - other.y) <= tol
            and abs(dtheta) <= tol
        )


Pose = Pose2 | Pose3


@dataclass(frozen=True)
class RelAction:
    """Body-frame pose delta plus an absolute gripper target in [0, 1].

    For SE(3), ``drot`` is a unit quaternion; for SE(2) it is a scalar
    rotation delta in radians. ``dp`` is expressed in the source pose's
    body frame.
    """

    dp: np.ndarray
    drot: np.ndarray | float
    g: float

    def __post_init__(self):
        dp = np.asarray(self.dp, dtype=float)
        if dp.shape not in ((2,), (3,)):
            raise InvalidPoseError(f"dp must have shape (2,) or (3,), got {dp.shape}")
        object.__setattr__(self, "dp", dp)
        if dp.shape == (3,):
            object.__setattr__(self, "drot", _canonical_quat(self.drot))
        else:
            object.__setattr__(self, "drot", wrap_angle(float(self.drot)))
        g = float(self.g)
        if not 0.0 <= g <= 1.0:
            raise InvalidPoseError(f"gripper target {g} outside [0, 1]")
        object.__setattr__(self, "g", g)

    @staticmethod
    def zero2(g: float = 1.0) -> "RelAction":
        return RelAction(np.zeros(2), 0.0, g)

    @staticmethod
    def zero3(g: float = 1.0) -> "RelAction":
        return RelAction(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), g)

    def to_vector(self) -> np.ndarray:
        """Flatten for learning: SE(2) -> [dx, dy, dtheta, g] (4),
        SE(3) -> [dx, dy, dz, rx, ry, rz, g] (7, rotation-vector)."""
        if self.dp.shape == (2,):
            return np.array([self.dp[0], self.dp[1], self.drot, self.g])
        return np.concatenate([self.dp, quat_to_rotvec(self.drot), [self.g]])

    @staticmethod
    def from_vector(v: np.ndarray) -> "RelAction":
        v = np.asarray(v, dtype=float)
        if v.shape == (4,):
            return RelAction(v[:2], float(v[2]), float(np.clip(v[3], 0.0, 1.0)))
        if v.shape == (7,):
            rotvec = v[3:6]
            angle = float(np.linalg.norm(rotvec))
            axis = rotvec / angle if angle > 1e-12 else np.array([0.0, 0.0, 1.0])
            return RelAction(v[:3], quat_from_axis_angle(axis, angle),
                             float(np.clip(v[6], 0.0, 1.0)))
        raise InvalidPoseError(f"action vector must have length 4 or 7, got {v.shape}")


def relative(a: Pose, b: Pose, g: float = 1.0) -> RelAction:
    """Delta taking pose ``a`` to pose ``b``, translation in a's body frame.

    apply(a, relative(a, b)) == b up to float tolerance.
    """
    if isinstance(a, Pose2) and isinstance(b, Pose2):
        c, s = np.cos(a.theta), np.sin(a.theta)
        dx_w = b.x - a.x
        dy_w = b.y - a.y
        # R(a)^T (p_b - p_a)
        dp = np.array([c * dx_w + s * dy_w, -s * dx_w + c * dy_w])
        return RelAction(dp, wrap_angle(b.theta - a.theta), g)
    if isinstance(a, Pose3) and isinstance(b, Pose3):
        R = quat_to_matrix(a.q)
        dp = R.T @ (b.p - a.p)
        dq = quat_mul(quat_conj(a.q), b.q)
        if dq[0] < 0.0:
            dq = -dq
        return RelAction(dp, dq, g)
    raise InvalidPoseError(f"pose dimensions differ: {type(a).__name__} vs {type(b).__name__}")


def apply(a: Pose, d: RelAction) -> Pose:
    """Compose pose ``a`` with body-frame delta ``d`` (inverse of relative)."""
    if isinstance(a, Pose2):
        if d.dp.shape != (2,):
            raise InvalidPoseError("SE(2) pose requires a 2-vector action")
        c, s = np.cos(a.theta), np.sin(a.theta)
        return Pose2(
            a.x + c * d.dp[0] - s * d.dp[1],
            a.y + s * d.dp[0] + c * d.dp[1],
            a.theta + d.drot,
        )
    if d.dp.shape != (3,):
        raise InvalidPoseError("SE(3) pose requires a 3-vector action")
    R = quat_to_matrix(a.q)
    return Pose3(a.p + R @ d.dp, quat_mul(a.q, d.drot))


@dataclass(frozen=True)
class Affine2:
    """Planar affine map x -> A x + b."""

    A: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(2, 2)
        b = np.asarray(self.b, dtype=float).reshape(2)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise DegenerateInputError("affine parameters must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @staticmethod
    def identity() -> "Affine2":
        return Affine2(np.eye(2), np.zeros(2))

    def map(self, pts: np.ndarray) -> np.ndarray:
        """Apply to one point (2,) or a stack (N, 2)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.A.T + self.b

    def to_list(self) -> list[float]:
        return [*self.A.ravel().tolist(), *self.b.tolist()]

    @staticmethod
    def from_list(vals) -> "Affine2":
        vals = list(vals)
        return Affine2(np.array(vals[:4]).reshape(2, 2), np.array(vals[4:6]))


def fit_affine2(src: np.ndarray, dst: np.ndarray) -> Affine2:
    """Least-squares affine map from >= 3 non-collinear correspondences.

    Solves the normal equations of min sum ||A src_i + b - dst_i||^2; a
    6-parameter problem, so no iterative solver is needed. Rank deficiency
    (collinear sources) is detected by the condition number of M^T M.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape[0] < 3 or src.shape != dst.shape:
        raise DegenerateInputError(
            f"need >= 3 matched point pairs, got {src.shape[0]} and {dst.shape[0]}"
        )
    M = np.hstack([src, np.ones((src.shape[0], 1))])
    MtM = M.T @ M
    if np.linalg.cond(MtM) > AFFINE_COND_LIMIT:
        raise DegenerateInputError("source points are collinear (rank-deficient fit)")
    # one 3x3 solve per output coordinate
    coef = np.linalg.solve(MtM, M.T @ dst)
    return Affine2(coef[:2, :].T, coef[2, :])
