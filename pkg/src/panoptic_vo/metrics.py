"""Trajectory error after closed-form alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTrajectory, InputInconsistency, LengthMismatch

COLLINEAR_RTOL = 1e-9


@dataclass
class Trajectory:
    """Timestamped world-to-camera poses."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise LengthMismatch(f"{len(self.timestamps)} timestamps for {len(self.poses)} poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise InputInconsistency("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Camera centers in world coordinates, ``(N, 3)``."""
        return np.array([p.center() for p in self.poses]).reshape(-1, 3)


def _check_spread(points, what):
    if len(points) < 3:
        raise DegenerateTrajectory(f"{what}: alignment needs at least 3 positions, got {len(points)}")
    sv = np.linalg.svd(points - points.mean(0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= COLLINEAR_RTOL * sv[0]:
        raise DegenerateTrajectory(f"{what}: positions are collinear")


def umeyama(src, dst, with_scale=True):
    """Least-squares ``(s, R, t)`` with ``dst ~ s * R @ src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(est, gt, alignment="similarity") -> float:
    """RMSE of camera positions after aligning ``est`` onto ``gt``.

    Accepts :class:`Trajectory` objects or ``(N, 3)`` position arrays.
    ``alignment`` is ``"similarity"`` (default) or ``"rigid"``.
    """
    if alignment not in ("similarity", "rigid"):
        raise ValueError(f"unknown alignment '{alignment}'")
    if isinstance(est, Trajectory) and isinstance(gt, Trajectory):
        if len(est) != len(gt):
            raise LengthMismatch(f"estimate has {len(est)} poses, ground truth {len(gt)}")
        if not np.allclose(est.timestamps, gt.timestamps, rtol=0, atol=1e-9):
            raise InputInconsistency("trajectory timestamps differ")
    P = est.positions() if isinstance(est, Trajectory) else np.asarray(est, dtype=np.float64)
    Q = gt.positions() if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if P.shape != Q.shape:
        raise LengthMismatch(f"estimate {P.shape} vs ground truth {Q.shape}")
    _check_spread(Q, "ground truth")
    _check_spread(P, "estimate")
    s, R, t = umeyama(P, Q, with_scale=alignment == "similarity")
    err = s * P @ R.T + t - Q
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def max_pose_change(a: list, b: list) -> float:
    """Largest entry of ``G_a G_b^-1 - I`` over paired poses."""
    return max((float(np.max(np.abs((x @ y.inverse()).matrix() - np.eye(4)))) for x, y in zip(a, b)),
               default=0.0)

