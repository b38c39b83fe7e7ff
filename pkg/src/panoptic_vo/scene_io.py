"""Scene and result directories.

Scene directory::

    manifest.txt            intrinsics, frame count, flow radius, thing classes
    scene.ini               the generating configuration
    groundtruth.txt         TUM trajectory
    frames/NNNNNN/          gt_depth, gt_class, gt_instance, obs_class,
                            obs_instance, moving, flow_to_MMMMMM (observed)

Result directory::

    manifest.txt, trajectory.txt, report.txt
    depth/NNNNNN.pvo        working-resolution inverse depth
    panoptic/NNNNNN_class.pvo, NNNNNN_instance.pvo   full resolution
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthMismatch
from .formats import (
    ensure_dir,
    read_array,
    read_manifest,
    read_tum,
    write_array,
    write_manifest,
    write_tum,
)
from .geometry import CameraIntrinsics
from .metrics import Trajectory
from .panoptic import PanopticMap
from .simworld import RenderedFrame, SceneConfig, scene_config_to_text

SCENE_FORMAT = "panoptic-vo-scene 1"
RESULT_FORMAT = "panoptic-vo-result 1"
EXT = ".pvo"


def _frame_dir(root: Path, t: int) -> Path:
    return root / "frames" / f"{t:06d}"


def _classes_text(classes) -> str:
    return ",".join(str(c) for c in sorted(classes))


def _parse_classes(text: str) -> frozenset:
    return frozenset(int(c) for c in text.split(",") if c.strip())


def write_scene(root, config: SceneConfig, frames: list) -> Path:
    root = ensure_dir(root)
    K = config.intrinsics
    write_manifest(root / "manifest.txt", {
        "format": SCENE_FORMAT,
        "num_frames": len(frames),
        "width": K.width, "height": K.height,
        "fx": repr(K.fx), "fy": repr(K.fy), "cx": repr(K.cx), "cy": repr(K.cy),
        "flow_radius": config.flow_radius,
        "thing_classes": _classes_text(config.thing_classes),
    })
    (root / "scene.ini").write_text(scene_config_to_text(config))
    write_tum(root / "groundtruth.txt", Trajectory([f.timestamp for f in frames], [f.gt_pose for f in frames]))
    for f in frames:
        d = ensure_dir(_frame_dir(root, f.index))
        write_array(d / f"gt_depth{EXT}", f.gt_depth)
        write_array(d / f"gt_class{EXT}", f.gt_panoptic.class_id.astype(np.int64))
        write_array(d / f"gt_instance{EXT}", f.gt_panoptic.instance_id.astype(np.int64))
        write_array(d / f"obs_class{EXT}", f.obs_panoptic.class_id.astype(np.int64))
        write_array(d / f"obs_instance{EXT}", f.obs_panoptic.instance_id.astype(np.int64))
        write_array(d / f"moving{EXT}", f.moving.astype(bool))
        for j in sorted(f.noisy_flow_to):
            write_array(d / f"flow_to_{j:06d}{EXT}", f.noisy_flow_to[j])
    return root


@dataclass
class Scene:
    intrinsics: CameraIntrinsics
    thing_classes: frozenset
    flow_radius: int
    frames: list


def _int(manifest, key, where):
    try:
        return int(manifest[key])
    except KeyError as exc:
        raise FormatError(f"{where}: manifest lacks '{key}'") from exc
    except ValueError as exc:
        raise FormatError(f"{where}: '{key}' is not an integer") from exc


def _float(manifest, key, where):
    try:
        return float(manifest[key])
    except KeyError as exc:
        raise FormatError(f"{where}: manifest lacks '{key}'") from exc
    except ValueError as exc:
        raise FormatError(f"{where}: '{key}' is not a number") from exc


def read_scene(root) -> Scene:
    """Load a scene directory; frames carry observed flow only."""
    root = Path(root)
    m = read_manifest(root / "manifest.txt")
    if m.get("format") != SCENE_FORMAT:
        raise FormatError(f"{root}: not a scene directory (format '{m.get('format')}')")
    n = _int(m, "num_frames", root)
    K = CameraIntrinsics(_float(m, "fx", root), _float(m, "fy", root), _float(m, "cx", root),
                         _float(m, "cy", root), _int(m, "width", root), _int(m, "height", root))
    things = _parse_classes(m.get("thing_classes", ""))
    radius = _int(m, "flow_radius", root)
    gt = read_tum(root / "groundtruth.txt")
    if len(gt) != n:
        raise LengthMismatch(f"{root}: {len(gt)} ground-truth poses for {n} frames")
    frames = []
    for t in range(n):
        d = _frame_dir(root, t)
        gt_pan = PanopticMap(read_array(d / f"gt_class{EXT}"), read_array(d / f"gt_instance{EXT}"), things)
        obs_pan = PanopticMap(read_array(d / f"obs_class{EXT}"), read_array(d / f"obs_instance{EXT}"), things)
        frame = RenderedFrame(t, float(gt.timestamps[t]), gt.poses[t], read_array(d / f"gt_depth{EXT}"),
                              gt_pan, obs_pan, read_array(d / f"moving{EXT}"))
        for j in range(max(0, t - radius), min(n, t + radius + 1)):
            if j != t:
                frame.noisy_flow_to[j] = read_array(d / f"flow_to_{j:06d}{EXT}")
        frames.append(frame)
    return Scene(K, things, radius, frames)


def upsample_labels(pan: PanopticMap, step: int, shape) -> PanopticMap:
    """Nearest-neighbor upsampling of working-resolution labels."""
    H, W = shape
    rows = np.minimum(np.arange(H) // step, pan.shape[0] - 1)
    cols = np.minimum(np.arange(W) // step, pan.shape[1] - 1)
    return PanopticMap(pan.class_id[np.ix_(rows, cols)], pan.instance_id[np.ix_(rows, cols)], pan.thing_classes)


def write_result(root, manifest: dict, trajectory: Trajectory, depths, panoptic_video: list,
                 report: dict) -> Path:
    root = ensure_dir(root)
    write_manifest(root / "manifest.txt", {"format": RESULT_FORMAT, "num_frames": len(trajectory),
                                           **manifest})
    write_tum(root / "trajectory.txt", trajectory)
    write_manifest(root / "report.txt", report)
    ddir, pdir = ensure_dir(root / "depth"), ensure_dir(root / "panoptic")
    for t, (depth, pan) in enumerate(zip(depths, panoptic_video)):
        write_array(ddir / f"{t:06d}{EXT}", depth)
        write_array(pdir / f"{t:06d}_class{EXT}", pan.class_id.astype(np.int64))
        write_array(pdir / f"{t:06d}_instance{EXT}", pan.instance_id.astype(np.int64))
    return root


@dataclass
class Result:
    manifest: dict
    trajectory: Trajectory
    depths: list
    panoptic_video: list
    report: dict


def read_result(root, thing_classes=frozenset()) -> Result:
    root = Path(root)
    m = read_manifest(root / "manifest.txt")
    if m.get("format") != RESULT_FORMAT:
        raise FormatError(f"{root}: not a result directory (format '{m.get('format')}')")
    n = _int(m, "num_frames", root)
    traj = read_tum(root / "trajectory.txt")
    if len(traj) != n:
        raise LengthMismatch(f"{root}: {len(traj)} poses for {n} frames")
    depths = [read_array(root / "depth" / f"{t:06d}{EXT}") for t in range(n)]
    video = [PanopticMap(read_array(root / "panoptic" / f"{t:06d}_class{EXT}"),
                         read_array(root / "panoptic" / f"{t:06d}_instance{EXT}"), thing_classes)
             for t in range(n)]
    return Result(m, traj, depths, video, read_manifest(root / "report.txt"))
