"""Dense bundle adjustment over camera poses and per-pixel inverse depths.

The objective is the confidence-weighted reprojection error of every pixel
of every frame-graph edge::

    E(G, d) = sum_(i,j) sum_p  w_ij[p] * (p*_ij[p] - proj(G_j G_i^-1 unproj(p, d_i[p])))^2

It is minimized by Levenberg-damped Gauss-Newton.  Inverse depths are
eliminated with a Schur complement (their block is diagonal), the small
pose system is factorized densely, and depths are back-substituted.

Monocular gauge: the poses in ``fixed_frames`` never move and, when
``fix_scale`` is set, the mean inverse depth of the lowest fixed frame is
held at its value from the start of the solve through one linear equality
constraint solved jointly with the pose block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import DimensionMismatch, SingularSystem
from .geometry import EPS_Z, CameraIntrinsics, SE3Pose, in_bounds, pixel_grid, se3_retract

DEPTH_MIN = 1e-4
DEPTH_MAX = 1e3


@dataclass
class FrameGraph:
    num_frames: int
    edges: list
    targets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges in frame graph")
        for i, j in self.edges:
            if i == j or not (0 <= i < self.num_frames and 0 <= j < self.num_frames):
                raise ValueError(f"bad edge {(i, j)} for {self.num_frames} frames")
        n = len(self.edges)
        if self.targets.shape[0] != n or self.targets.shape[-1] != 2 or self.targets.ndim != 4:
            raise DimensionMismatch(f"targets {self.targets.shape} do not match {n} edges")
        if self.weights.shape != self.targets.shape:
            raise DimensionMismatch(f"weights {self.weights.shape} vs targets {self.targets.shape}")


@dataclass
class BundleState:
    poses: list
    depths: np.ndarray
    fixed_frames: frozenset = frozenset({0})
    fix_scale: bool = True

    def __post_init__(self):
        self.poses = list(self.poses)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.fixed_frames = frozenset(int(f) for f in self.fixed_frames)
        if len(self.poses) != self.depths.shape[0]:
            raise DimensionMismatch(f"{len(self.poses)} poses but {self.depths.shape[0]} depth maps")
        if not self.fixed_frames:
            raise ValueError("at least one frame must be fixed")
        if not all(0 <= f < len(self.poses) for f in self.fixed_frames):
            raise ValueError("fixed frame index out of range")

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def free_frames(self) -> list:
        return [k for k in range(self.num_frames) if k not in self.fixed_frames]

    @property
    def scale_frame(self) -> int:
        return min(self.fixed_frames)

    def copy(self) -> "BundleState":
        return BundleState(list(self.poses), self.depths.copy(), self.fixed_frames, self.fix_scale)


@dataclass
class SolverReport:
    iterations: int = 0
    cost_trace: list = field(default_factory=list)
    converged: bool = False
    final_damping: float = 0.0
    stop_reason: str = ""
    rejected_steps: int = 0

    @property
    def monotone(self) -> bool:
        """True when no accepted step raised the objective."""
        return all(b <= a for a, b in zip(self.cost_trace, self.cost_trace[1:]))


@dataclass
class DBAConfig:
    max_iters: int = 50
    damping_init: float = 1e-4
    damping_scale: float = 10.0
    tol: float = 1e-10
    max_retries: int = 10


@dataclass
class Linearization:
    """Residuals and Jacobian blocks for every edge, zeroed on invalid pixels.

    Shapes: ``residuals (E, P, 2)``, ``J_i``/``J_j`` ``(E, P, 2, 6)``,
    ``J_d (E, P, 2)``, ``weights (E, P, 2)`` with ``P = H * W``.
    """

    edges: list
    num_frames: int
    shape: tuple
    free_frames: list
    residuals: np.ndarray
    J_i: np.ndarray
    J_j: np.ndarray
    J_d: np.ndarray
    weights: np.ndarray
    valid: np.ndarray
    scale_frame: int | None = None
    scale_offset: float = 0.0
    depth_bound: np.ndarray | None = None  # (N * P,) -1 at DEPTH_MIN, +1 at DEPTH_MAX, else 0


def build_frame_graph(num_frames: int, radius: int) -> list:
    if num_frames < 2 or radius < 1:
        raise ValueError("need at least two frames and a positive radius")
    return [(i, j) for i in range(num_frames) for j in range(num_frames)
            if i != j and abs(i - j) <= radius]


def corrected_correspondence(p_ij, r_ij) -> np.ndarray:
    p_ij = np.asarray(p_ij, dtype=np.float64)
    r_ij = np.asarray(r_ij, dtype=np.float64)
    if p_ij.shape != r_ij.shape:
        raise DimensionMismatch(f"correspondence {p_ij.shape} vs residual flow {r_ij.shape}")
    return p_ij + r_ij


def estimate_motion_prob(observed_flow, static_induced_flow, alpha=2.0, beta=1.5) -> np.ndarray:
    """``sigmoid(alpha * (|observed - induced| - beta))`` per pixel."""
    observed_flow = np.asarray(observed_flow, dtype=np.float64)
    static_induced_flow = np.asarray(static_induced_flow, dtype=np.float64)
    if observed_flow.shape != static_induced_flow.shape:
        raise DimensionMismatch(f"flows {observed_flow.shape} and {static_induced_flow.shape} differ")
    r = np.linalg.norm(observed_flow - static_induced_flow, axis=-1)
    return expit(alpha * (r - beta))


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _edge_terms(K: CameraIntrinsics, pose_i: SE3Pose, pose_j: SE3Pose, depth_i, target, with_jacobians):
    """Projection of frame-i pixels into frame j and, optionally, its derivatives.

    Works on the depth-scaled point ``Y = R * xbar + d * t`` (``xbar`` the
    normalized ray), which projects like ``X_j = Y / d``.

    A pixel is valid when its point lies in front of camera j and its target
    lies inside image j.  Judging bounds by the target rather than by the
    current projection keeps the valid set independent of the estimate, so
    the objective has no jumps and the solver cannot shed residuals by
    pushing points out of the frame.
    """
    H, W = depth_i.shape
    grid = pixel_grid(H, W).reshape(-1, 2)
    d = depth_i.reshape(-1)
    xbar = np.stack([(grid[:, 0] - K.cx) / K.fx, (grid[:, 1] - K.cy) / K.fy, np.ones(len(d))], -1)
    rel = pose_j.compose(pose_i.inverse())
    R, t = rel.R, rel.translation
    Y = xbar @ R.T + d[:, None] * t
    z_j = Y[:, 2] / d
    front = z_j > EPS_Z
    Yz = np.where(front, Y[:, 2], 1.0)
    uv = np.stack([K.fx * Y[:, 0] / Yz + K.cx, K.fy * Y[:, 1] / Yz + K.cy], -1)
    valid = front & in_bounds(target.reshape(-1, 2), H, W)
    if not with_jacobians:
        return uv, valid, None

    inv_z = 1.0 / Yz
    Jp = np.zeros((len(d), 2, 3))
    Jp[:, 0, 0] = K.fx * inv_z
    Jp[:, 0, 2] = -K.fx * Y[:, 0] * inv_z ** 2
    Jp[:, 1, 1] = K.fy * inv_z
    Jp[:, 1, 2] = -K.fy * Y[:, 1] * inv_z ** 2

    eye = np.broadcast_to(np.eye(3), (len(d), 3, 3))
    dY_dxj = np.concatenate([-_skew_batch(Y), d[:, None, None] * eye], axis=2)
    dY_dxi = np.concatenate([R @ _skew_batch(xbar), -d[:, None, None] * R], axis=2)
    # residual = target - projection, hence the sign flip
    J_j = -(Jp @ dY_dxj)
    J_i = -(Jp @ dY_dxi)
    J_d = -(Jp @ t)
    return uv, valid, (J_i, J_j, J_d)


def _check_inputs(state: BundleState, graph: FrameGraph, K: CameraIntrinsics):
    if graph.num_frames != state.num_frames:
        raise DimensionMismatch(f"graph has {graph.num_frames} frames, state {state.num_frames}")
    if state.depths.shape[1:] != K.shape or graph.targets.shape[1:3] != K.shape:
        raise DimensionMismatch("depth/target grids do not match the intrinsics")


def edge_residuals(state: BundleState, graph: FrameGraph, K: CameraIntrinsics):
    """Residuals ``(E, H, W, 2)`` and validity ``(E, H, W)``; invalid entries are zero."""
    _check_inputs(state, graph, K)
    H, W = K.shape
    res = np.zeros(graph.targets.shape)
    valid = np.zeros(graph.targets.shape[:3], dtype=bool)
    for e, (i, j) in enumerate(graph.edges):
        uv, ok, _ = _edge_terms(K, state.poses[i], state.poses[j], state.depths[i], graph.targets[e], False)
        r = graph.targets[e].reshape(-1, 2) - uv
        res[e] = np.where(ok[:, None], r, 0.0).reshape(H, W, 2)
        valid[e] = ok.reshape(H, W)
    return res, valid


def objective(state: BundleState, graph: FrameGraph, K: CameraIntrinsics) -> float:
    res, valid = edge_residuals(state, graph, K)
    w = np.where(valid[..., None], graph.weights, 0.0)
    return float(np.sum(w * res * res))


def linearize(state: BundleState, graph: FrameGraph, K: CameraIntrinsics,
              scale_target: float | None = None) -> Linearization:
    _check_inputs(state, graph, K)
    H, W = K.shape
    P, n_e = H * W, len(graph.edges)
    residuals = np.zeros((n_e, P, 2))
    J_i = np.zeros((n_e, P, 2, 6))
    J_j = np.zeros((n_e, P, 2, 6))
    J_d = np.zeros((n_e, P, 2))
    valid = np.zeros((n_e, P), dtype=bool)
    for e, (i, j) in enumerate(graph.edges):
        uv, ok, (ji, jj, jd) = _edge_terms(K, state.poses[i], state.poses[j], state.depths[i], graph.targets[e], True)
        m = ok[:, None]
        residuals[e] = np.where(m, graph.targets[e].reshape(P, 2) - uv, 0.0)
        J_i[e] = np.where(m[..., None], ji, 0.0)
        J_j[e] = np.where(m[..., None], jj, 0.0)
        J_d[e] = np.where(m, jd, 0.0)
        valid[e] = ok
    weights = np.where(valid[..., None], graph.weights.reshape(n_e, P, 2), 0.0)

    scale_frame, scale_offset = None, 0.0
    if state.fix_scale:
        scale_frame = state.scale_frame
        current = float(np.mean(state.depths[scale_frame]))
        scale_offset = 0.0 if scale_target is None else scale_target - current
    return Linearization(
        edges=list(graph.edges), num_frames=state.num_frames, shape=(H, W),
        free_frames=state.free_frames, residuals=residuals, J_i=J_i, J_j=J_j, J_d=J_d,
        weights=weights, valid=valid, scale_frame=scale_frame, scale_offset=scale_offset,
        depth_bound=_bound_flags(state.depths),
    )


def _bound_flags(depths):
    d = depths.reshape(-1)
    return np.where(d <= DEPTH_MIN, -1, np.where(d >= DEPTH_MAX, 1, 0)).astype(np.int8)


def frozen_depths(lin: Linearization, bd) -> np.ndarray:
    """Depths sitting on a clamp bound whose Newton direction points outward.

    They are held fixed for this step (projected Newton), so the pose update
    does not count on depth motion the clamp would cancel.
    """
    if lin.depth_bound is None:
        return np.zeros(len(bd), dtype=bool)
    return ((lin.depth_bound < 0) & (bd < 0)) | ((lin.depth_bound > 0) & (bd > 0))


def normal_equations(lin: Linearization):
    """Assemble ``H_pp, E, D, b_p, b_d`` of the undamped normal equations.

    ``E`` couples the ``6 * F`` pose unknowns to the ``N * P`` depth unknowns
    and ``D`` is the diagonal of the depth block.  Accumulation runs in edge
    order so the result does not depend on any chunking.
    """
    F = len(lin.free_frames)
    slot = {f: k for k, f in enumerate(lin.free_frames)}
    P = lin.shape[0] * lin.shape[1]
    Hpp = np.zeros((6 * F, 6 * F))
    E = np.zeros((6 * F, lin.num_frames * P))
    D = np.zeros(lin.num_frames * P)
    bp = np.zeros(6 * F)
    bd = np.zeros(lin.num_frames * P)
    for e, (i, j) in enumerate(lin.edges):
        w, r, jd = lin.weights[e], lin.residuals[e], lin.J_d[e]
        cols = slice(i * P, (i + 1) * P)
        D[cols] += np.sum(w * jd * jd, axis=1)
        bd[cols] -= np.sum(w * jd * r, axis=1)
        blocks = [(slot[f], J) for f, J in ((i, lin.J_i[e]), (j, lin.J_j[e])) if f in slot]
        for a, Ja in blocks:
            WJa = Ja * w[..., None]
            ra = slice(6 * a, 6 * a + 6)
            bp[ra] -= np.einsum("pkc,pk->c", WJa, r)
            E[ra, cols] += np.einsum("pkc,pk->cp", WJa, jd)
            for b, Jb in blocks:
                Hpp[ra, 6 * b:6 * b + 6] += np.einsum("pkc,pkd->cd", WJa, Jb)
    return Hpp, E, D, bp, bd


def _scale_constraint(lin: Linearization, informed):
    """Row ``a`` with ``a . delta_d = scale_offset`` over informed pixels of the anchor frame."""
    if lin.scale_frame is None:
        return None
    P = lin.shape[0] * lin.shape[1]
    a = np.zeros(lin.num_frames * P)
    cols = slice(lin.scale_frame * P, (lin.scale_frame + 1) * P)
    a[cols] = informed[cols] / P
    if not a.any():
        return None
    return a


def damp(Hpp, D, damping):
    """Levenberg-Marquardt damping ``H + damping * diag(H)``.

    Depth unknowns with no information get a unit placeholder pivot so the
    elimination stays finite; their gradient is zero so they do not move.
    """
    Hd = Hpp + damping * np.diag(np.diag(Hpp))
    Dd = D * (1.0 + damping)
    informed = Dd > 0
    return Hd, np.where(informed, Dd, 1.0), informed


def schur_solve(lin: Linearization, damping: float):
    """Solve the damped normal equations by eliminating inverse depths.

    Returns ``(delta_xi, delta_d)``: ``(F, 6)`` twists for the free frames in
    order and ``(N, H, W)`` inverse-depth increments.
    """
    if damping < 0:
        raise ValueError("damping must be non-negative")
    Hpp, E, D, bp, bd = normal_equations(lin)
    frozen = frozen_depths(lin, bd)
    if frozen.any():
        E[:, frozen] = 0.0
        D = np.where(frozen, 0.0, D)
        bd = np.where(frozen, 0.0, bd)
    Hd, Dd, informed = damp(Hpp, D, damping)
    a = _scale_constraint(lin, informed)
    Dinv = 1.0 / Dd
    EDinv = E * Dinv
    S = Hd - EDinv @ E.T
    rhs = bp - EDinv @ bd
    n = S.shape[0]
    if a is not None:
        # the multiplier is rescaled by gamma so its row matches the pose block
        aDa = a @ (Dinv * a)
        gamma = np.sqrt(np.mean(np.abs(np.diag(S))) / aDa) if n else 1.0
        Ea = gamma * (EDinv @ a)
        S = np.block([[S, -Ea[:, None]], [-Ea[None, :], -np.array([[gamma * gamma * aDa]])]])
        rhs = np.concatenate([rhs, [gamma * (lin.scale_offset - a @ (Dinv * bd))]])
    if S.size:
        sol = _solve_symmetric(S, rhs)
    else:
        sol = np.zeros(0)
    dxi = sol[:n]
    mu = gamma * sol[n] if a is not None else 0.0
    dd = Dinv * (bd - E.T @ dxi - (a * mu if a is not None else 0.0))
    dd = np.where(informed, dd, 0.0)
    return dxi.reshape(-1, 6), dd.reshape(lin.num_frames, *lin.shape)


def _solve_symmetric(A, b):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            x = scipy.linalg.solve(A, b, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite solution of the reduced system")
    return x


def apply_update(state: BundleState, delta_xi, delta_d,
                 depth_min=DEPTH_MIN, depth_max=DEPTH_MAX) -> BundleState:
    delta_xi = np.asarray(delta_xi, dtype=np.float64).reshape(-1, 6)
    free = state.free_frames
    if len(free) != len(delta_xi):
        raise DimensionMismatch(f"{len(delta_xi)} pose updates for {len(free)} free frames")
    poses = list(state.poses)
    for k, f in enumerate(free):
        poses[f] = se3_retract(poses[f], delta_xi[k])
    depths = np.clip(state.depths + np.asarray(delta_d).reshape(state.depths.shape), depth_min, depth_max)
    return BundleState(poses, depths, state.fixed_frames, state.fix_scale)


def solve_dba(state: BundleState, graph: FrameGraph, K: CameraIntrinsics, config: DBAConfig | None = None):
    """Levenberg-Marquardt on the dense reprojection objective.

    A step is kept only if it does not raise the objective; otherwise the
    damping grows by ``damping_scale`` and the step is recomputed, at most
    ``max_retries`` times.  Returns ``(state, SolverReport)``.
    """
    config = config or DBAConfig()
    state = state.copy()
    scale_target = float(np.mean(state.depths[state.scale_frame])) if state.fix_scale else None
    damping = config.damping_init
    cost = objective(state, graph, K)
    report = SolverReport(cost_trace=[cost])

    for it in range(1, config.max_iters + 1):
        report.iterations = it
        lin = linearize(state, graph, K, scale_target)
        accepted, last_error = False, None
        for _ in range(config.max_retries + 1):
            try:
                dxi, dd = schur_solve(lin, damping)
            except SingularSystem as exc:
                last_error = exc
                damping *= config.damping_scale
                continue
            candidate = apply_update(state, dxi, dd)
            new_cost = objective(candidate, graph, K)
            if new_cost <= cost:
                accepted = True
                break
            report.rejected_steps += 1
            damping *= config.damping_scale
        if not accepted:
            if last_error is not None and report.rejected_steps == 0:
                raise SingularSystem(f"damping exhausted: {last_error}")
            report.converged = True
            report.stop_reason = "no_descent"
            break
        state, cost = candidate, new_cost
        report.cost_trace.append(cost)
        damping = max(damping / config.damping_scale, 1e-12)
        step = float(np.max(np.abs(dxi))) if dxi.size else 0.0
        if step < config.tol:
            report.converged = True
            report.stop_reason = "small_step"
            break
    else:
        report.stop_reason = "max_iters"
    report.final_damping = damping
    return state, report
