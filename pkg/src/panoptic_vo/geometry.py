"""Rigid-body transforms, the pinhole camera and dense reprojection.

Poses map world coordinates into a camera frame (``X_cam = G * X_world``),
so the relative transform of an edge ``(i, j)`` is ``G_j * G_i^-1`` and
moves points from camera ``i`` into camera ``j``.  Pose increments are
applied on the left: ``G <- Exp(xi) * G``, i.e. the perturbation lives in
the camera frame of the pose being updated.

Twists are ordered ``(omega, v)`` whenever they are flattened to 6-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveDepth, NonPositiveInverseDepth

EPS_Z = 1e-6
"""Camera-frame depth (m) at or below which a point counts as behind the camera."""

_SMALL_ANGLE = 1e-2


def skew(w):
    """3x3 cross-product matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns a quaternion with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=np.float64).reshape(3)
        v = np.array(self.v, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(v))):
            raise ValueError("twist components must be finite")
        omega.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    def __neg__(self) -> "Twist":
        return Twist(-self.omega, -self.v)


def _twist_vector(xi) -> np.ndarray:
    if isinstance(xi, Twist):
        return xi.as_vector()
    return np.asarray(xi, dtype=np.float64).reshape(6)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform stored as a unit quaternion ``(w, x, y, z)`` and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and nonzero")
        q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "SE3Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return SE3Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "SE3Pose":
        w, x, y, z = self.rotation
        q = np.array([w, -x, -y, -z])
        return SE3Pose(q, -(quat_to_matrix(q) @ self.translation))

    def act(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        """Position of the frame origin expressed in the source frame (camera center)."""
        return -(self.R.T @ self.translation)


def so3_left_jacobian_coeffs(theta):
    """Return ``(A, B, C)`` with ``A = sin(t)/t``, ``B = (1-cos t)/t^2``, ``C = (t - sin t)/t^3``."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        A = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 ** 3 / 362880.0
    else:
        A = np.sin(theta) / theta
        B = 2.0 * np.sin(0.5 * theta) ** 2 / (theta * theta)
        C = (theta - np.sin(theta)) / theta ** 3
    return A, B, C


def se3_exp(xi) -> SE3Pose:
    """Exponential map of a twist ``(omega, v)``; the rotation angle equals ``|omega|``."""
    vec = _twist_vector(xi)
    omega, v = vec[:3], vec[3:]
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        s = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0
    else:
        s = np.sin(half) / theta
    q = np.concatenate([[np.cos(half)], s * omega])
    _, B, C = so3_left_jacobian_coeffs(theta)
    W = skew(omega)
    V = np.eye(3) + B * W + C * (W @ W)
    return SE3Pose(q, V @ v)


def se3_log(pose: SE3Pose) -> Twist:
    """Inverse of :func:`se3_exp`; only valid for rotation angles below pi."""
    q = pose.rotation
    if q[0] < 0:
        q = -q
    qv = q[1:]
    n = float(np.linalg.norm(qv))
    if n < 1e-12:
        omega = 2.0 * qv / q[0]
    else:
        omega = (2.0 * np.arctan2(n, q[0]) / n) * qv
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        D = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        D = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * W + D * (W @ W)
    return Twist(omega, V_inv @ pose.translation)


def se3_retract(pose: SE3Pose, xi) -> SE3Pose:
    """Left update ``Exp(xi) * pose``."""
    return se3_exp(xi).compose(pose)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def subsampled(self, step: int) -> "CameraIntrinsics":
        """Intrinsics of the image formed by keeping full-resolution pixel
        ``step * u + step // 2`` as working pixel ``u``."""
        if step == 1:
            return self
        off = step // 2
        return CameraIntrinsics(
            self.fx / step, self.fy / step,
            (self.cx - off) / step, (self.cy - off) / step,
            self.width // step, self.height // step,
        )


def project(K: CameraIntrinsics, point) -> np.ndarray:
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= EPS_Z:
        raise NonPositiveDepth(f"point depth {z} is not in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def unproject(K: CameraIntrinsics, pixel, inv_depth: float) -> np.ndarray:
    if not inv_depth > 0:
        raise NonPositiveInverseDepth(f"inverse depth {inv_depth} must be positive")
    u, v = np.asarray(pixel, dtype=np.float64)
    z = 1.0 / inv_depth
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` array whose entry ``[v, u]`` is ``(u, v)``."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([u, v], axis=-1)


def unproject_grid(K: CameraIntrinsics, inv_depth) -> np.ndarray:
    """Back-project every pixel of an inverse-depth map to camera-frame points."""
    d = np.asarray(inv_depth, dtype=np.float64)
    grid = pixel_grid(*d.shape)
    z = 1.0 / d
    x = (grid[..., 0] - K.cx) / K.fx * z
    y = (grid[..., 1] - K.cy) / K.fy * z
    return np.stack([x, y, z], axis=-1)


def project_points(K: CameraIntrinsics, points):
    """Vectorized projection; returns ``(uv, z)`` with no validity filtering.

    Points at or behind ``EPS_Z`` get ``uv = nan``.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    front = z > EPS_Z
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, K.fx * points[..., 0] / safe_z + K.cx, np.nan)
    v = np.where(front, K.fy * points[..., 1] / safe_z + K.cy, np.nan)
    return np.stack([u, v], axis=-1), z


def in_bounds(uv, height: int, width: int) -> np.ndarray:
    """True where a pixel coordinate rounds to a cell of the image."""
    u, v = uv[..., 0], uv[..., 1]
    with np.errstate(invalid="ignore"):
        return (u >= -0.5) & (u < width - 0.5) & (v >= -0.5) & (v < height - 0.5)


def check_depth_shape(K: CameraIntrinsics, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != K.shape:
        raise DimensionMismatch(f"depth map {depth.shape} does not match intrinsics {K.shape}")
    return depth


def reproject(K: CameraIntrinsics, pose_i: SE3Pose, pose_j: SE3Pose, depth_i):
    """Map every pixel of frame ``i`` into frame ``j``.

    Returns ``(uv_j, z_j, valid)``.  ``uv_j`` is nan where the transformed
    point is not in front of camera ``j``.
    """
    depth_i = check_depth_shape(K, depth_i)
    rel = pose_j.compose(pose_i.inverse())
    X_j = rel.act(unproject_grid(K, depth_i))
    uv, z = project_points(K, X_j)
    valid = (z > EPS_Z) & in_bounds(uv, K.height, K.width)
    return uv, z, valid


def correspondence_field(K: CameraIntrinsics, pose_i: SE3Pose, pose_j: SE3Pose, depth_i):
    """Dense correspondence ``p_ij`` and its validity mask.

    Pixels whose point lands behind camera ``j`` keep their own coordinates
    in ``p_ij`` so the field stays finite; they are marked invalid.
    """
    uv, _, valid = reproject(K, pose_i, pose_j, depth_i)
    grid = pixel_grid(K.height, K.width)
    behind = ~np.isfinite(uv[..., 0])
    uv = np.where(behind[..., None], grid, uv)
    return uv, valid


def induced_flow(correspondence) -> np.ndarray:
    correspondence = np.asarray(correspondence, dtype=np.float64)
    return correspondence - pixel_grid(*correspondence.shape[:2])
