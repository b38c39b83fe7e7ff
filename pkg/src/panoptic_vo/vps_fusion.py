"""Label and feature propagation from frame t-1 to frame t using VO geometry.

Feature grids are plain ``(H, W, C)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, QueryOutOfBounds
from .geometry import CameraIntrinsics, SE3Pose, check_depth_shape, in_bounds, pixel_grid, reproject
from .panoptic import DEFAULT_MIN_IOU, VOID_CLASS, PanopticMap, iou_match

DEFAULT_DEPTH_EPS = 0.05


@dataclass(frozen=True)
class WarpResult:
    warped_labels: PanopticMap
    warped_features: np.ndarray
    occlusion_mask: np.ndarray
    source_index: np.ndarray  # flat index of the winning source pixel, -1 where unhit


def _features(grid, shape, what="features"):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[:2] != tuple(shape):
        raise DimensionMismatch(f"{what} {grid.shape} do not match image {tuple(shape)}")
    return grid


def splat(target_uv, z, valid, shape):
    """Nearest-neighbor z-buffer splat.

    Returns, per target cell, the flat index of the winning source pixel
    (smallest ``z``, ties to the lower source index) or -1.
    """
    H, W = shape
    cells = np.floor(target_uv + 0.5).astype(np.int64)
    src = np.flatnonzero(valid.reshape(-1))
    cell = cells.reshape(-1, 2)[src]
    flat_cell = cell[:, 1] * W + cell[:, 0]
    order = np.lexsort((src, z.reshape(-1)[src], flat_cell))
    flat_sorted = flat_cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winner = np.full(H * W, -1, dtype=np.int64)
    winner[flat_sorted[first]] = src[order[first]]
    return winner.reshape(H, W)


def warp_to_current(prev_labels: PanopticMap, prev_features, depth_prev, pose_prev: SE3Pose,
                    pose_curr: SE3Pose, K: CameraIntrinsics, depth_curr,
                    depth_eps=DEFAULT_DEPTH_EPS, flow=None, flow_mask=None) -> WarpResult:
    """Forward-warp labels and features of the previous frame into the current one.

    ``flow``/``flow_mask`` optionally replace the rigid correspondence of
    selected source pixels (independently moving objects) with observed
    flow; their depth for the z-test still comes from the rigid transform.
    """
    shape = K.shape
    if prev_labels.shape != shape:
        raise DimensionMismatch(f"labels {prev_labels.shape} vs image {shape}")
    feats = _features(prev_features, shape)
    depth_prev = check_depth_shape(K, depth_prev)
    depth_curr = check_depth_shape(K, depth_curr)

    uv, z, _ = reproject(K, pose_prev, pose_curr, depth_prev)
    if flow is not None:
        flow = np.asarray(flow, dtype=np.float64)
        if flow.shape != shape + (2,):
            raise DimensionMismatch(f"flow {flow.shape} vs image {shape}")
        sel = np.ones(shape, dtype=bool) if flow_mask is None else np.asarray(flow_mask, dtype=bool)
        uv = np.where(sel[..., None], pixel_grid(*shape) + flow, uv)
        z = np.where(sel & ~np.isfinite(z), 1.0 / depth_prev, z)
    front = np.isfinite(uv[..., 0]) & (z > 0)
    valid = front & in_bounds(np.where(front[..., None], uv, -1.0), *shape)
    winner = splat(np.where(valid[..., None], uv, 0.0), z, valid, shape)

    hit = winner >= 0
    src = np.where(hit, winner, 0)
    z_src = z.reshape(-1)[src]
    occluded = ~hit | (z_src > (1.0 + depth_eps) / depth_curr)

    cls = np.where(occluded, VOID_CLASS, prev_labels.class_id.reshape(-1)[src])
    inst = np.where(occluded, 0, prev_labels.instance_id.reshape(-1)[src])
    warped_feats = np.where(occluded[..., None], 0.0, feats.reshape(shape[0] * shape[1], feats.shape[-1])[src])
    return WarpResult(
        PanopticMap(cls, inst, prev_labels.thing_classes), warped_feats, occluded,
        np.where(occluded, -1, winner),
    )


def mean_warped_features(warps) -> np.ndarray:
    """Average of the non-occluded warped features from several source frames.

    Cells that no source reaches stay zero.
    """
    warps = list(warps)
    if not warps:
        raise ValueError("no warp sources")
    total = np.zeros_like(warps[0].warped_features)
    count = np.zeros(total.shape[:2])
    for w in warps:
        if w.warped_features.shape != total.shape:
            raise DimensionMismatch("warp sources differ in shape")
        seen = ~w.occlusion_mask
        total += np.where(seen[..., None], w.warped_features, 0.0)
        count += seen
    return total / np.maximum(count, 1)[..., None]


def fuse_features(warped, current, occlusion) -> np.ndarray:
    """Mean of warped and current features; current alone where occluded."""
    current = np.asarray(current, dtype=np.float64)
    warped = _features(warped, current.shape[:2], "warped features")
    occlusion = np.asarray(occlusion, dtype=bool)
    if warped.shape != current.shape or occlusion.shape != current.shape[:2]:
        raise DimensionMismatch(f"fusion inputs {warped.shape}, {current.shape}, {occlusion.shape}")
    return np.where(occlusion[..., None], current, 0.5 * (warped + current))


def feature_alignment_loss(z_star, z_hat) -> float:
    """Mean absolute difference over all entries."""
    a = np.asarray(z_star, dtype=np.float64)
    b = np.asarray(z_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature grids {a.shape} and {b.shape} differ")
    return float(np.mean(np.abs(a - b))) if a.size else 0.0


def default_queries(occlusion) -> np.ndarray:
    """All non-occluded pixels as ``(u, v)`` rows."""
    v, u = np.nonzero(~np.asarray(occlusion, dtype=bool))
    return np.stack([u, v], axis=1)


def segmentation_consistency_loss(logits_a, logits_b, query_pixels) -> float:
    """Sum over query pixels ``(u, v)`` of the L1 distance between logit vectors."""
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise DimensionMismatch(f"logit grids {a.shape} and {b.shape} differ")
    q = np.asarray(query_pixels).reshape(-1, 2)
    if q.size == 0:
        return 0.0
    if not np.issubdtype(q.dtype, np.integer):
        if not np.array_equal(q, np.round(q)):
            raise QueryOutOfBounds("query pixels must be integer coordinates")
        q = q.astype(np.int64)
    H, W = a.shape[:2]
    bad = (q[:, 0] < 0) | (q[:, 0] >= W) | (q[:, 1] < 0) | (q[:, 1] >= H)
    if bad.any():
        raise QueryOutOfBounds(f"query {tuple(q[np.argmax(bad)])} outside {W}x{H} image")
    diff = a[q[:, 1], q[:, 0]] - b[q[:, 1], q[:, 0]]
    return float(np.sum(np.abs(diff)))


def propagate_tracks(prev: PanopticMap, warp: WarpResult, curr: PanopticMap,
                     min_iou=DEFAULT_MIN_IOU, next_id=None):
    """Give ``curr`` instances the track ids of the warped previous frame.

    ``next_id`` is the fresh-id counter; when omitted it starts after the
    largest id of ``prev``.  Returns ``(relabeled_curr, next_id)``.
    """
    if prev.shape != curr.shape or warp.warped_labels.shape != curr.shape:
        raise DimensionMismatch("panoptic maps differ in shape")
    if next_id is None:
        next_id = max(prev.instances(), default=0) + 1
    mapping, next_id = iou_match(warp.warped_labels, curr, min_iou, next_id)
    return curr.relabeled(mapping), next_id



def propagate_video(panoptic: list, depths, poses: list, K: CameraIntrinsics, features=None,
                    flows=None, flow_masks=None, min_iou=DEFAULT_MIN_IOU, depth_eps=DEFAULT_DEPTH_EPS):
    """Track-consistent relabeling of a segmentation video.

    Frame ``t - 1`` (already relabeled) is warped into frame ``t`` and its
    ids are handed on by IoU matching.  ``flows[t - 1]`` and
    ``flow_masks[t - 1]`` optionally override the rigid motion of selected
    pixels.  Returns ``(tracked_maps, warps)`` with one warp per frame after
    the first.
    """
    n = len(panoptic)
    if len(depths) != n or len(poses) != n:
        raise DimensionMismatch(f"{n} segmentations, {len(depths)} depth maps, {len(poses)} poses")
    if features is None:
        features = [np.zeros(K.shape + (0,))] * n
    tracked, warps = [panoptic[0]], []
    next_id = max(panoptic[0].instances(), default=0) + 1
    for t in range(1, n):
        warp = warp_to_current(
            tracked[-1], features[t - 1], depths[t - 1], poses[t - 1], poses[t], K, depths[t],
            depth_eps=depth_eps,
            flow=None if flows is None else flows[t - 1],
            flow_mask=None if flow_masks is None else flow_masks[t - 1])
        curr, next_id = propagate_tracks(tracked[-1], warp, panoptic[t], min_iou, next_id)
        tracked.append(curr)
        warps.append(warp)
    return tracked, warps
