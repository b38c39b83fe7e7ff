"""Alternating panoptic-weighted bundle adjustment and label propagation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dba_solver import (
    BundleState,
    DBAConfig,
    FrameGraph,
    build_frame_graph,
    estimate_motion_prob,
    solve_dba,
)
from .errors import InputInconsistency
from .geometry import CameraIntrinsics, SE3Pose, correspondence_field, induced_flow, pixel_grid, se3_exp, se3_log
from .metrics import Trajectory, ate_rmse, max_pose_change
from .panoptic import (
    DEFAULT_DYNAMIC_THRESHOLD,
    DEFAULT_ETA,
    DEFAULT_MIN_IOU,
    PanopticMap,
    build_dynamic_mask,
    panoptic_confidence,
)
from .vps_fusion import (
    default_queries,
    feature_alignment_loss,
    fuse_features,
    propagate_video,
    segmentation_consistency_loss,
)

WORKING_SCALES = (1, 2, 4, 8)
CONVERGENCE_TOL = 1e-6
BOOTSTRAP_BASELINE = 0.05


@dataclass
class PipelineConfig:
    outer_iterations: int = 2
    dba: DBAConfig = field(default_factory=DBAConfig)
    eta: float = DEFAULT_ETA
    dynamic_threshold: float = DEFAULT_DYNAMIC_THRESHOLD
    radius: int = 2
    working_scale: int = 8
    seed: int = 0
    init_depth: float = 0.2
    min_iou: float = DEFAULT_MIN_IOU
    use_filter: bool = True

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be at least 1")
        if self.working_scale not in WORKING_SCALES:
            raise ValueError(f"working_scale must be one of {WORKING_SCALES}")
        if self.radius < 1:
            raise ValueError("radius must be positive")


@dataclass
class Observations:
    """Working-resolution inputs: observed flow per edge and per-frame segmentation."""

    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    flows: dict
    panoptic: list
    raw_confidence: dict | None = None
    pixel_scale: float = 1.0  # sensor pixels per working pixel

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        n = len(self.panoptic)
        if n < 2:
            raise InputInconsistency("at least two frames are required")
        if len(self.timestamps) != n:
            raise InputInconsistency(f"{len(self.timestamps)} timestamps for {n} frames")
        shape = self.intrinsics.shape
        for pan in self.panoptic:
            if pan.shape != shape:
                raise InputInconsistency(f"segmentation {pan.shape} vs image {shape}")
        for (i, j), f in self.flows.items():
            if np.shape(f) != shape + (2,):
                raise InputInconsistency(f"flow {(i, j)} has shape {np.shape(f)}")

    @property
    def num_frames(self) -> int:
        return len(self.panoptic)


@dataclass
class IterationDiagnostics:
    objective: float
    solver: object
    dynamic_fraction: float
    feature_loss: float
    consistency_loss: float
    pose_change: float
    ate: float | None = None
    seconds: float = 0.0


@dataclass
class PipelineResult:
    trajectory: Trajectory
    depths: np.ndarray
    panoptic_video: list
    diagnostics: list
    iteration_trajectories: list


def subsample_panoptic(pan: PanopticMap, step: int) -> PanopticMap:
    off = step // 2
    return PanopticMap(pan.class_id[off::step, off::step], pan.instance_id[off::step, off::step],
                       pan.thing_classes)


def observations_from_frames(frames, intrinsics: CameraIntrinsics, working_scale=8, radius=2,
                             noisy=True) -> Observations:
    """Subsample rendered frames to working resolution.

    Working pixel ``u`` is full-resolution pixel ``s * u + s // 2``; flow is
    divided by ``s`` so correspondences stay exact.
    """
    s, off = working_scale, working_scale // 2
    K = intrinsics.subsampled(s)
    flows = {}
    for f in frames:
        source = f.noisy_flow_to if noisy else f.gt_flow_to
        for j in range(max(0, f.index - radius), min(len(frames), f.index + radius + 1)):
            if j == f.index:
                continue
            if j not in source:
                raise InputInconsistency(f"frame {f.index} has no flow to {j}")
            flows[(f.index, j)] = source[j][off::s, off::s] / s
    return Observations(K, [f.timestamp for f in frames], flows,
                        [subsample_panoptic(f.obs_panoptic, s) for f in frames], pixel_scale=float(s))


def _one_hot(pan: PanopticMap, classes: np.ndarray) -> np.ndarray:
    return (pan.class_id[..., None] == classes).astype(np.float64)


def _weights(obs: Observations, edges, state: BundleState, segmentation, config: PipelineConfig):
    """Per-edge weights and per-frame dynamic masks from the current geometry.

    A pixel's motion probability is the largest over the edges leaving its
    frame: an object is dynamic if any neighbor contradicts the camera motion.
    Flow residuals are measured in sensor pixels so the motion thresholds do
    not depend on the working resolution.
    """
    K = obs.intrinsics
    masks = {}
    if config.use_filter:
        prob = np.zeros((obs.num_frames,) + K.shape)
        for i, j in edges:
            corr, _ = correspondence_field(K, state.poses[i], state.poses[j], state.depths[i])
            p = estimate_motion_prob(obs.pixel_scale * obs.flows[(i, j)], obs.pixel_scale * induced_flow(corr))
            np.maximum(prob[i], p, out=prob[i])
    weights = []
    for i, j in edges:
        raw = np.zeros(K.shape + (2,)) if obs.raw_confidence is None else obs.raw_confidence[(i, j)]
        if not config.use_filter:
            weights.append(panoptic_confidence(raw, np.zeros(K.shape), 0.0))
            continue
        if i not in masks:
            masks[i] = build_dynamic_mask(segmentation[i], prob[i], config.dynamic_threshold)
        weights.append(panoptic_confidence(raw, masks[i], config.eta))
    return np.stack(weights), masks


def _vps_phase(obs: Observations, state: BundleState, masks, config: PipelineConfig, classes):
    K, N = obs.intrinsics, obs.num_frames
    none = np.zeros(K.shape, dtype=bool)
    feats = [_one_hot(p, classes) for p in obs.panoptic]
    tracked, warps = propagate_video(
        obs.panoptic, state.depths, state.poses, K, feats,
        flows=[obs.flows[(t, t + 1)] for t in range(N - 1)],
        flow_masks=[masks[t] > 0.5 if t in masks else none for t in range(N - 1)],
        min_iou=config.min_iou)
    feat_loss, cons_loss = [], 0.0
    for t, warp in enumerate(warps, start=1):
        fused = fuse_features(warp.warped_features, feats[t], warp.occlusion_mask)
        feat_loss.append(feature_alignment_loss(warp.warped_features, feats[t]))
        cons_loss += segmentation_consistency_loss(fused, feats[t], default_queries(warp.occlusion_mask))
    return tracked, float(np.mean(feat_loss)), cons_loss


def bootstrap_state(obs: Observations, edges, weights, config: PipelineConfig) -> BundleState:
    """Identity poses and uniform depth, with the zero-baseline degeneracy broken.

    At zero translation the depth Jacobian vanishes and the first Gauss-Newton
    step fits translation against flat depth, which can lock the solver into
    a wrong basin.  The pair (0, 1) is therefore solved from small starting
    translations along each axis; the lowest-cost result is extrapolated at
    constant velocity to all frames.
    """
    N, K = obs.num_frames, obs.intrinsics
    depth0 = np.full((2,) + K.shape, config.init_depth)
    pair = [e for e in ((0, 1), (1, 0)) if e in edges]
    idx = [edges.index(e) for e in pair]
    grid = pixel_grid(*K.shape)
    graph = FrameGraph(2, pair, np.stack([grid + obs.flows[e] for e in pair]), weights[idx])
    best = None
    for sign in (1.0, -1.0):
        for axis in range(3):
            t = np.zeros(3)
            t[axis] = sign * BOOTSTRAP_BASELINE
            start = BundleState([SE3Pose.identity(), SE3Pose(np.array([1.0, 0, 0, 0]), t)], depth0)
            state, report = solve_dba(start, graph, K, config.dba)
            if best is None or report.cost_trace[-1] < best[0]:
                best = (report.cost_trace[-1], state)
    step = se3_log(best[1].poses[1]).as_vector()
    poses = [se3_exp(k * step) for k in range(N)]
    depths = np.full((N,) + K.shape, config.init_depth)
    depths[:2] = best[1].depths
    return BundleState(poses, depths, fixed_frames={0}, fix_scale=True)


def run_pvo(obs: Observations, config: PipelineConfig | None = None, gt: Trajectory | None = None,
            log=None) -> PipelineResult:
    """Recurrent VO/VPS loop.

    Starts from identity poses and uniform inverse depth, and stops after
    ``config.outer_iterations`` rounds or once no pose moves by more than
    ``1e-6`` between rounds.
    """
    config = config or PipelineConfig()
    N, K = obs.num_frames, obs.intrinsics
    edges = build_frame_graph(N, config.radius)
    missing = [e for e in edges if e not in obs.flows]
    if missing:
        raise InputInconsistency(f"no flow for edges {missing[:4]}")
    grid = pixel_grid(*K.shape)
    targets = np.stack([grid + obs.flows[e] for e in edges])
    classes = np.array(sorted({int(c) for p in obs.panoptic for c in np.unique(p.class_id)}))

    state = BundleState([SE3Pose.identity()] * N, np.full((N,) + K.shape, config.init_depth),
                        fixed_frames={0}, fix_scale=True)
    segmentation = list(obs.panoptic)
    diagnostics, trajectories = [], []
    for it in range(config.outer_iterations):
        t0 = time.perf_counter()
        weights, masks = _weights(obs, edges, state, segmentation, config)
        graph = FrameGraph(N, edges, targets, weights)
        start = bootstrap_state(obs, edges, weights, config) if it == 0 else state
        new_state, report = solve_dba(start, graph, K, config.dba)
        change = max_pose_change(new_state.poses, state.poses)
        state = new_state
        segmentation, feat_loss, cons_loss = _vps_phase(obs, state, masks, config, classes)
        traj = Trajectory(obs.timestamps, state.poses)
        trajectories.append(traj)
        dyn = float(np.mean([m.mean() for m in masks.values()])) if masks else 0.0
        diag = IterationDiagnostics(report.cost_trace[-1], report, dyn, feat_loss, cons_loss, change,
                                    ate_rmse(traj, gt) if gt is not None else None,
                                    time.perf_counter() - t0)
        diagnostics.append(diag)
        if log:
            log(f"outer iteration {it + 1}: cost {diag.objective:.6g}, {report.iterations} LM steps, "
                f"dynamic {dyn:.3f}" + (f", ATE {diag.ate:.6g}" if diag.ate is not None else ""))
        if it > 0 and change < CONVERGENCE_TOL:
            break
    return PipelineResult(trajectories[-1], state.depths, segmentation, diagnostics, trajectories)
