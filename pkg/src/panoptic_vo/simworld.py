"""Synthetic dynamic scenes with exact ground truth.

Scenes are built from analytic primitives (infinite planes, boxes and
spheres).  Every pixel ray is cast against all primitives and the nearest
hit defines depth and labels.  Flow is computed by carrying the hit point
through the owning primitive's motion and projecting it into the other
camera, so static-pixel flow agrees with the reprojection in
:mod:`panoptic_vo.geometry` to rounding error.

Image flow convention: ``flow = p_j - p_i``, so a camera translating along
+x makes static points drift towards -u.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateGeometry
from .geometry import EPS_Z, CameraIntrinsics, SE3Pose, in_bounds, pixel_grid, se3_exp
from .panoptic import PanopticMap

_HIT_EPS = 1e-9
_VIS_RTOL = 1e-6


@dataclass(frozen=True)
class Plane:
    """Points ``X`` with ``normal . X = offset``."""

    name: str
    normal: tuple
    offset: float
    class_id: int

    instance_id = 0
    twist = (0.0,) * 6


@dataclass(frozen=True)
class Box:
    """Axis-aligned (at frame 0) box; moves with spin ``twist[:3]`` about its
    center and linear velocity ``twist[3:]``, both per frame in world axes."""

    name: str
    center: tuple
    half_extents: tuple
    class_id: int
    instance_id: int = 0
    twist: tuple = (0.0,) * 6


@dataclass(frozen=True)
class Sphere:
    name: str
    center: tuple
    radius: float
    class_id: int
    instance_id: int = 0
    twist: tuple = (0.0,) * 6


@dataclass(frozen=True)
class NoiseSpec:
    flow_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seg_jitter: int = 0
    shuffle_ids: bool = True


@dataclass(frozen=True)
class SceneConfig:
    intrinsics: CameraIntrinsics
    num_frames: int
    primitives: tuple
    thing_classes: frozenset
    camera_start: tuple = (0.0,) * 6
    camera_steps: tuple = ((0.0,) * 6,)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    flow_radius: int = 2
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")
        if not any(_is_static(p) and p.instance_id == 0 for p in self.primitives):
            raise ValueError("scene needs at least one static surface")

    def camera_poses(self) -> list:
        """World-to-camera poses of every frame."""
        c2w = se3_exp(self.camera_start)
        out = []
        for t in range(self.num_frames):
            out.append(c2w.inverse())
            step = self.camera_steps[min(t, len(self.camera_steps) - 1)]
            c2w = c2w.compose(se3_exp(step))
        return out

    def with_noise(self, **kwargs) -> "SceneConfig":
        return replace(self, noise=replace(self.noise, **kwargs))


@dataclass
class RenderedFrame:
    index: int
    timestamp: float
    gt_pose: SE3Pose
    gt_depth: np.ndarray
    gt_panoptic: PanopticMap
    obs_panoptic: PanopticMap
    moving: np.ndarray
    gt_flow_to: dict = field(default_factory=dict)
    noisy_flow_to: dict = field(default_factory=dict)
    visibility_to: dict = field(default_factory=dict)


def _is_static(prim) -> bool:
    return not np.any(np.asarray(prim.twist, dtype=float))


def object_pose(prim, t: int) -> SE3Pose:
    """Object-to-world transform of a primitive at frame ``t``."""
    if isinstance(prim, Plane):
        return SE3Pose.identity()
    tw = np.asarray(prim.twist, dtype=float)
    spin = se3_exp(np.concatenate([tw[:3] * t, np.zeros(3)]))
    return SE3Pose(spin.rotation, np.asarray(prim.center, dtype=float) + tw[3:] * t)


def _rays(K: CameraIntrinsics, cam_to_world: SE3Pose, uv):
    """World-frame origin and directions whose parameter equals camera depth."""
    xbar = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy,
                     np.ones(uv.shape[:-1])], -1)
    return cam_to_world.translation, xbar @ cam_to_world.R.T


def _intersect(prim, t: int, origin, dirs):
    """Ray parameter of the first hit (``inf`` for a miss)."""
    if isinstance(prim, Plane):
        n = np.asarray(prim.normal, dtype=float)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (prim.offset - n @ origin) / denom
        return np.where((np.abs(denom) > 1e-15) & (s > _HIT_EPS), s, np.inf)

    M = object_pose(prim, t)
    Minv = M.inverse()
    o = Minv.act(origin)
    d = dirs @ Minv.R.T
    if isinstance(prim, Box):
        h = np.asarray(prim.half_extents, dtype=float)
        if np.all(np.abs(o) < h):
            raise DegenerateGeometry(f"camera inside box '{prim.name}' at frame {t}")
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        # rays parallel to a slab: inside -> unbounded, outside -> empty
        par = d == 0
        inside_slab = np.abs(o) <= h
        lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=-1)
        t_far = hi.min(axis=-1)
        hit = (t_near <= t_far) & (t_near > _HIT_EPS)
        return np.where(hit, t_near, np.inf)

    r = float(prim.radius)
    if o @ o < r * r:
        raise DegenerateGeometry(f"camera inside sphere '{prim.name}' at frame {t}")
    a = np.sum(d * d, axis=-1)
    b = d @ o
    c = o @ o - r * r
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        s = (-b - np.sqrt(disc)) / a
    return np.where((disc >= 0) & (s > _HIT_EPS), s, np.inf)


def cast(config: SceneConfig, pose: SE3Pose, t: int, uv):
    """Nearest hit along the rays through pixel coordinates ``uv`` of a camera.

    Returns ``(depth, primitive_index)``; depth is ``inf`` where nothing is hit.
    """
    origin, dirs = _rays(config.intrinsics, pose.inverse(), uv)
    hits = np.stack([_intersect(p, t, origin, dirs) for p in config.primitives])
    idx = np.argmin(hits, axis=0)
    depth = np.take_along_axis(hits, idx[None], 0)[0]
    return depth, idx


def _flow_between(config, poses, t_i, t_j, depth, prim_idx):
    """Exact flow and visibility of frame ``t_i`` pixels in frame ``t_j``."""
    K = config.intrinsics
    grid = pixel_grid(K.height, K.width)
    c2w = poses[t_i].inverse()
    origin, dirs = _rays(K, c2w, grid)
    X = origin + dirs * depth[..., None]
    X_j = np.empty_like(X)
    for k, prim in enumerate(config.primitives):
        sel = prim_idx == k
        if not sel.any():
            continue
        if _is_static(prim):
            X_j[sel] = X[sel]
        else:
            motion = object_pose(prim, t_j).compose(object_pose(prim, t_i).inverse())
            X_j[sel] = motion.act(X[sel])
    Xc = poses[t_j].act(X_j)
    z = Xc[..., 2]
    front = z > EPS_Z
    safe = np.where(front, z, 1.0)
    uv = np.stack([K.fx * Xc[..., 0] / safe + K.cx, K.fy * Xc[..., 1] / safe + K.cy], -1)
    uv = np.where(front[..., None], uv, grid)
    flow = uv - grid
    visible = front & in_bounds(uv, K.height, K.width)
    seen_depth, _ = cast(config, poses[t_j], t_j, uv)
    visible &= np.abs(seen_depth - z) <= _VIS_RTOL * np.maximum(z, 1.0)
    return flow, visible


def _jitter_labels(pan: PanopticMap, radius: int, rng) -> PanopticMap:
    if radius <= 0:
        return pan
    H, W = pan.shape
    rows, cols = np.indices((H, W))
    dy = rng.integers(-radius, radius + 1, size=(H, W))
    dx = rng.integers(-radius, radius + 1, size=(H, W))
    ry = np.clip(rows + dy, 0, H - 1)
    rx = np.clip(cols + dx, 0, W - 1)
    return PanopticMap(pan.class_id[ry, rx], pan.instance_id[ry, rx], pan.thing_classes)


def _shuffle_ids(pan: PanopticMap, rng) -> PanopticMap:
    ids = sorted(pan.instances())
    if not ids:
        return pan
    new = rng.permutation(len(ids)) + 1
    return pan.relabeled({old: int(n) for old, n in zip(ids, new)})


def _stream(seed: int, *key: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def render_sequence(config: SceneConfig) -> list:
    """Render ground truth and noisy observations for every frame."""
    K = config.intrinsics
    poses = config.camera_poses()
    grid = pixel_grid(K.height, K.width)
    class_of = np.array([p.class_id for p in config.primitives])
    inst_of = np.array([p.instance_id for p in config.primitives])
    moving_of = np.array([not _is_static(p) for p in config.primitives])

    raw = []
    for t in range(config.num_frames):
        depth, idx = cast(config, poses[t], t, grid)
        if not np.all(np.isfinite(depth)):
            raise DegenerateGeometry(f"frame {t}: {int(np.sum(~np.isfinite(depth)))} rays leave the scene")
        raw.append((depth, idx))

    frames = []
    noise = config.noise
    for t, (depth, idx) in enumerate(raw):
        gt_pan = PanopticMap(class_of[idx], inst_of[idx], config.thing_classes)
        obs = _jitter_labels(gt_pan, noise.seg_jitter, _stream(config.seed, t, 0))
        if noise.shuffle_ids:
            obs = _shuffle_ids(obs, _stream(config.seed, t, 1))
        frame = RenderedFrame(
            index=t, timestamp=t * config.dt, gt_pose=poses[t], gt_depth=1.0 / depth,
            gt_panoptic=gt_pan, obs_panoptic=obs, moving=moving_of[idx],
        )
        for j in range(max(0, t - config.flow_radius), min(config.num_frames, t + config.flow_radius + 1)):
            if j == t:
                continue
            flow, vis = _flow_between(config, poses, t, j, depth, idx)
            frame.gt_flow_to[j] = flow
            frame.visibility_to[j] = vis
            frame.noisy_flow_to[j] = _noisy_flow(flow, noise, _stream(config.seed, t, 2, j))
        frames.append(frame)
    return frames


def _noisy_flow(flow, noise: NoiseSpec, rng):
    out = flow.copy()
    if noise.flow_sigma > 0:
        out = out + rng.normal(scale=noise.flow_sigma, size=flow.shape)
    if noise.outlier_fraction > 0:
        bad = rng.uniform(size=flow.shape[:2]) < noise.outlier_fraction
        out[bad] = rng.uniform(-20.0, 20.0, size=(int(bad.sum()), 2))
    return out


def motion_prob_oracle(frame: RenderedFrame) -> np.ndarray:
    """1 on pixels of primitives with nonzero motion, 0 elsewhere."""
    return frame.moving.astype(np.float64)


# --- key-value config files ------------------------------------------------

def _floats(text, n=None):
    vals = [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return tuple(vals)


def _line_of(text: str, section: str, key: str | None):
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and "=" in s:
            if s.split("=", 1)[0].strip().lower() == key.lower():
                return n
    return None


def parse_scene_config(text: str) -> SceneConfig:
    """Parse the INI scene description; the format is documented in the README."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ConfigError(f"syntax error: {exc.message.splitlines()[0]}", line) from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from exc

    def get(section, key, conv, default=None):
        if not cp.has_option(section, key):
            if default is None:
                raise ConfigError(f"missing '{key}' in [{section}]", _line_of(text, section, None))
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", _line_of(text, section, key)) from exc

    if not cp.has_section("scene"):
        raise ConfigError("missing [scene] section", 1)
    try:
        K = CameraIntrinsics(
            get("scene", "fx", float), get("scene", "fy", float),
            get("scene", "cx", float), get("scene", "cy", float),
            get("scene", "width", int), get("scene", "height", int))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad intrinsics: {exc}", _line_of(text, "scene", None)) from exc

    prims = []
    for section in cp.sections():
        kind, _, name = section.partition(" ")
        if kind == "plane":
            prims.append(Plane(name, get(section, "normal", lambda s: _floats(s, 3)),
                               get(section, "offset", float), get(section, "class", int)))
        elif kind == "box":
            prims.append(Box(name, get(section, "center", lambda s: _floats(s, 3)),
                             get(section, "half_extents", lambda s: _floats(s, 3)),
                             get(section, "class", int), get(section, "instance", int, 0),
                             get(section, "twist", lambda s: _floats(s, 6), (0.0,) * 6)))
        elif kind == "sphere":
            prims.append(Sphere(name, get(section, "center", lambda s: _floats(s, 3)),
                                get(section, "radius", float), get(section, "class", int),
                                get(section, "instance", int, 0),
                                get(section, "twist", lambda s: _floats(s, 6), (0.0,) * 6)))
        elif section not in ("scene", "camera", "noise", "things"):
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section, None))

    steps = (0.0,) * 6
    if cp.has_section("camera"):
        steps = get("camera", "steps", _floats, steps)
    if len(steps) % 6:
        raise ConfigError("[camera] steps must hold whole 6-vectors", _line_of(text, "camera", "steps"))
    noise = NoiseSpec()
    if cp.has_section("noise"):
        noise = NoiseSpec(get("noise", "flow_sigma", float, 0.0), get("noise", "outlier_fraction", float, 0.0),
                          get("noise", "seg_jitter", int, 0),
                          get("noise", "shuffle_ids", lambda s: cp.BOOLEAN_STATES[s.lower()], True))
    things = frozenset()
    if cp.has_section("things"):
        things = frozenset(int(x) for x in get("things", "classes", _floats, ()))
    try:
        return SceneConfig(
            intrinsics=K,
            num_frames=get("scene", "num_frames", int),
            primitives=tuple(prims),
            thing_classes=things,
            camera_start=get("camera", "start", lambda s: _floats(s, 6), (0.0,) * 6)
            if cp.has_section("camera") else (0.0,) * 6,
            camera_steps=tuple(tuple(steps[k:k + 6]) for k in range(0, len(steps), 6)),
            noise=noise,
            flow_radius=get("scene", "flow_radius", int, 2),
            dt=get("scene", "dt", float, 0.1),
            seed=get("scene", "seed", int, 0),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), _line_of(text, "scene", None)) from exc


def load_scene_config(path) -> SceneConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scene_config(fh.read())


def _fmt(vals) -> str:
    return ", ".join(repr(float(v)) for v in vals)


def scene_config_to_text(cfg: SceneConfig) -> str:
    K = cfg.intrinsics
    buf = io.StringIO()
    buf.write("[scene]\n")
    for k, v in (("width", K.width), ("height", K.height), ("fx", repr(K.fx)), ("fy", repr(K.fy)),
                 ("cx", repr(K.cx)), ("cy", repr(K.cy)), ("num_frames", cfg.num_frames),
                 ("flow_radius", cfg.flow_radius), ("dt", repr(cfg.dt)), ("seed", cfg.seed)):
        buf.write(f"{k} = {v}\n")
    buf.write("\n[camera]\n")
    buf.write(f"start = {_fmt(cfg.camera_start)}\n")
    buf.write(f"steps = {'; '.join(_fmt(s) for s in cfg.camera_steps)}\n")
    n = cfg.noise
    buf.write("\n[noise]\n")
    buf.write(f"flow_sigma = {n.flow_sigma!r}\noutlier_fraction = {n.outlier_fraction!r}\n")
    buf.write(f"seg_jitter = {n.seg_jitter}\nshuffle_ids = {'yes' if n.shuffle_ids else 'no'}\n")
    buf.write("\n[things]\n")
    buf.write(f"classes = {', '.join(str(c) for c in sorted(cfg.thing_classes))}\n")
    for p in cfg.primitives:
        if isinstance(p, Plane):
            buf.write(f"\n[plane {p.name}]\nnormal = {_fmt(p.normal)}\noffset = {float(p.offset)!r}\n"
                      f"class = {p.class_id}\n")
        elif isinstance(p, Box):
            buf.write(f"\n[box {p.name}]\ncenter = {_fmt(p.center)}\nhalf_extents = {_fmt(p.half_extents)}\n"
                      f"class = {p.class_id}\ninstance = {p.instance_id}\ntwist = {_fmt(p.twist)}\n")
        else:
            buf.write(f"\n[sphere {p.name}]\ncenter = {_fmt(p.center)}\nradius = {float(p.radius)!r}\n"
                      f"class = {p.class_id}\ninstance = {p.instance_id}\ntwist = {_fmt(p.twist)}\n")
    return buf.getvalue()


# --- demo scenes -------------------------------------------------------------

ROAD, BUILDING, VEGETATION, SKY = 0, 1, 2, 3
CAR, PERSON = 10, 11
THING_CLASSES = frozenset({CAR, PERSON})


def _street(extra=()):
    return (
        Plane("road", (0.0, 1.0, 0.0), 1.5, ROAD),
        Plane("sky", (0.0, 1.0, 0.0), -8.0, SKY),
        Plane("left", (1.0, 0.0, 0.0), -7.0, BUILDING),
        Plane("right", (1.0, 0.0, 0.0), 7.0, VEGETATION),
        Plane("far", (0.0, 0.0, 1.0), 60.0, BUILDING),
        Plane("behind", (0.0, 0.0, 1.0), -30.0, BUILDING),
    ) + tuple(extra)


def demo_intrinsics(width=256, height=192) -> CameraIntrinsics:
    return CameraIntrinsics(fx=0.78 * width, fy=0.78 * width, cx=width / 2 - 0.5,
                            cy=height / 2 - 0.5, width=width, height=height)


DEMO_CAMERA_STEP = (0.0, 0.012, 0.0, 0.06, -0.01, 0.45)


def static_demo_config(num_frames=8, seed=0, **noise) -> SceneConfig:
    """Street canyon, moving camera, no things."""
    return SceneConfig(
        intrinsics=demo_intrinsics(), num_frames=num_frames, primitives=_street(),
        thing_classes=THING_CLASSES, camera_steps=(DEMO_CAMERA_STEP,),
        noise=NoiseSpec(**noise), seed=seed)


def occlusion_free_demo_config(num_frames=20, seed=0, **noise) -> SceneConfig:
    """Street with parked cars and a slow pedestrian that never overlap."""
    things = (
        Box("car_left", (-4.5, 0.6, 14.0), (1.0, 0.9, 2.2), CAR, 1),
        Box("car_right", (4.6, 0.6, 20.0), (1.0, 0.9, 2.2), CAR, 2),
        Sphere("person", (-1.8, 0.5, 24.0), 0.9, PERSON, 3, (0.0, 0.0, 0.0, 0.02, 0.0, 0.0)),
    )
    return SceneConfig(
        intrinsics=demo_intrinsics(), num_frames=num_frames, primitives=_street(things),
        thing_classes=THING_CLASSES, camera_steps=((0.0, 0.004, 0.0, 0.02, 0.0, 0.3),),
        noise=NoiseSpec(**noise), seed=seed)


def thing_coverage(config: SceneConfig, instance_id: int) -> float:
    """Mean fraction of pixels covered by one instance over the sequence."""
    K = config.intrinsics
    grid = pixel_grid(K.height, K.width)
    inst_of = np.array([p.instance_id for p in config.primitives])
    fracs = []
    for t, pose in enumerate(config.camera_poses()):
        _, idx = cast(config, pose, t, grid)
        fracs.append(float(np.mean(inst_of[idx] == instance_id)))
    return float(np.mean(fracs))


def dynamic_demo_config(seed=0, num_frames=8, flow_sigma=0.3, coverage=(0.15, 0.25),
                        parked_car=True, lateral_speed=(0.35, 0.55), **noise) -> SceneConfig:
    """Street with one rigid mover covering ``coverage`` of the image and,
    optionally, a parked car.  Geometry is drawn from ``seed``; the mover
    drifts sideways by ``lateral_speed`` meters per frame."""
    rng = _stream(seed, 99)
    for _ in range(200):
        side = rng.choice([-1.0, 1.0])
        half = (rng.uniform(1.1, 1.5), rng.uniform(1.0, 1.4), rng.uniform(2.0, 3.0))
        center = (side * rng.uniform(0.5, 1.8), 1.5 - half[1], rng.uniform(4.5, 6.5) + half[2])
        lateral = -side * rng.uniform(*lateral_speed)
        forward = rng.uniform(0.3, 0.6)
        yaw = rng.uniform(-0.02, 0.02)
        mover = Box("mover", center, half, CAR, 1, (0.0, yaw, 0.0, lateral, 0.0, forward))
        extra = [mover]
        if parked_car:
            extra.append(Box("parked", (-side * 4.8, 0.7, rng.uniform(11.0, 15.0)),
                             (0.9, 0.8, 2.0), CAR, 2))
        cfg = SceneConfig(
            intrinsics=demo_intrinsics(), num_frames=num_frames, primitives=_street(extra),
            thing_classes=THING_CLASSES, camera_steps=(DEMO_CAMERA_STEP,),
            noise=NoiseSpec(flow_sigma=flow_sigma, **noise), seed=seed)
        try:
            cov = thing_coverage(cfg, 1)
        except DegenerateGeometry:
            continue
        if coverage[0] <= cov <= coverage[1]:
            return cfg
    raise DegenerateGeometry(f"seed {seed}: no mover placement reached coverage {coverage}")
