"""Synthetic posed RGB-D scenes with exact instance ground truth.

Scenes are a handful of flat-colored primitives (spheres and axis-aligned
boxes) inside an optional room box, ray-cast at pixel centers. Depth is the
camera-space z coordinate of the hit point, so `scene.back_project` of any
generated pixel lands back on the surface to float precision. Detector noise
(dropped masks, per-frame id shuffles, splits, boundary growth) is applied as
a separate pass over the ground-truth id maps.

All randomness flows through one `numpy` generator seeded by the caller, so a
given (config, seed) pair always produces the same dataset, byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import save_dataset
from .errors import ConfigError, DataError
from .scene import CameraIntrinsics, Frame, Pose, SegmentFrame

_EPS = 1e-9
_WORLD_UP = np.array([0.0, 0.0, 1.0])

# Checker shading: world-space cell edge and the dim factor for odd cells.
CHECKER_CELL = 0.25
CHECKER_DIM = 0.6


@dataclass(frozen=True)
class SphereSpec:
    instance_id: int
    center: np.ndarray
    radius: float
    color: np.ndarray
    checker: bool = False

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ConfigError(f"sphere {self.instance_id}: radius must be positive")


@dataclass(frozen=True)
class BoxSpec:
    instance_id: int
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    checker: bool = False

    def __post_init__(self) -> None:
        if not (np.asarray(self.lo) < np.asarray(self.hi)).all():
            raise ConfigError(f"box {self.instance_id}: lo must be strictly below hi")


@dataclass(frozen=True)
class RoomSpec:
    """Enclosing box seen from the inside; hits count on the exit face."""

    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    checker: bool = True


@dataclass
class SyntheticScene:
    objects: list  # SphereSpec | BoxSpec
    room: RoomSpec | None
    trajectory: list[Pose]
    intrinsics: CameraIntrinsics
    seed: int = 0

    def __post_init__(self) -> None:
        ids = [o.instance_id for o in self.objects]
        if any(i <= 0 for i in ids):
            raise ConfigError("object ids must be positive integers")
        if len(set(ids)) != len(ids):
            raise ConfigError("object ids must be unique")
        if not self.trajectory:
            raise ConfigError("trajectory must contain at least one pose")
        if self.room is not None:
            lo, hi = np.asarray(self.room.lo), np.asarray(self.room.hi)
            for pose in self.trajectory:
                eye = pose.translation
                if not ((eye > lo).all() and (eye < hi).all()):
                    raise ConfigError("camera must stay strictly inside the room")


@dataclass(frozen=True)
class DetectorNoise:
    """Corruptions applied to ground-truth masks to mimic a flaky detector.

    `drop_prob` is either one probability applied to every (object, frame)
    pair or a mapping from object id to its own drop probability.
    """

    drop_prob: float | dict[int, float] = 0.0
    relabel: str = "none"  # "none" | "per-frame-random-permutation"
    split_prob: float = 0.0
    boundary_jitter: int = 0

    def __post_init__(self) -> None:
        probs = list(self.drop_prob.values()) \
            if isinstance(self.drop_prob, dict) else [self.drop_prob]
        probs.append(self.split_prob)
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probabilities must be in [0, 1], got {p}")
        if self.relabel not in ("none", "per-frame-random-permutation"):
            raise ConfigError(f"unknown relabel mode {self.relabel!r}")
        if self.boundary_jitter < 0:
            raise ConfigError("boundary_jitter must be non-negative")

    def drop_for(self, obj_id: int) -> float:
        if isinstance(self.drop_prob, dict):
            return self.drop_prob.get(obj_id, 0.0)
        return self.drop_prob

    @property
    def is_zero(self) -> bool:
        drops = self.drop_prob.values() \
            if isinstance(self.drop_prob, dict) else [self.drop_prob]
        return (all(p == 0.0 for p in drops) and self.relabel == "none"
                and self.split_prob == 0.0 and self.boundary_jitter == 0)


def look_at_pose(eye, target) -> Pose:
    """Camera-to-world pose at `eye` looking toward `target`, z-up world."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < _EPS:
        raise ConfigError("camera eye and look-at target coincide")
    forward = forward / norm
    down = -_WORLD_UP - (-_WORLD_UP @ forward) * forward
    dnorm = np.linalg.norm(down)
    if dnorm < _EPS:
        raise ConfigError("camera looking straight up or down is degenerate")
    down = down / dnorm
    right = np.cross(down, forward)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def _pose_with_forward(eye, forward) -> Pose:
    f = np.asarray(forward, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < _EPS:
        raise ConfigError("look direction must be nonzero")
    return look_at_pose(eye, np.asarray(eye, dtype=np.float64) + f / n)


def _sphere_hits(sphere: SphereSpec, eye: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = eye - np.asarray(sphere.center, dtype=np.float64)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - 4.0 * a * c
    t = np.full(dirs.shape[0], np.inf)
    m = disc >= 0
    if m.any():
        sq = np.sqrt(disc[m])
        t0 = (-b[m] - sq) / (2.0 * a[m])
        t1 = (-b[m] + sq) / (2.0 * a[m])
        near = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t[m] = near
    return t


def _box_slabs(lo, hi, eye: np.ndarray, dirs: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (np.asarray(lo) - eye) * inv
        t2 = (np.asarray(hi) - eye) * inv
    # fmin/fmax drop the NaNs produced by 0 * inf on boundary-grazing rays
    near = np.fmax(np.fmax(np.fmin(t1[:, 0], t2[:, 0]),
                           np.fmin(t1[:, 1], t2[:, 1])),
                   np.fmin(t1[:, 2], t2[:, 2]))
    far = np.fmin(np.fmin(np.fmax(t1[:, 0], t2[:, 0]),
                          np.fmax(t1[:, 1], t2[:, 1])),
                  np.fmax(t1[:, 2], t2[:, 2]))
    return near, far


def _box_hits(box: BoxSpec, eye: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    near, far = _box_slabs(box.lo, box.hi, eye, dirs)
    valid = (far >= near) & (far > _EPS)
    t = np.where(valid, np.where(near > _EPS, near, far), np.inf)
    return t


def _room_exit(room: RoomSpec, eye: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    _, far = _box_slabs(room.lo, room.hi, eye, dirs)
    return np.where(far > _EPS, far, np.inf)


def _checker_mask(points: np.ndarray) -> np.ndarray:
    cells = np.floor(points / CHECKER_CELL).astype(np.int64)
    return (cells.sum(axis=1) % 2) == 1


def render_scene_frame(scene: SyntheticScene, index: int) -> tuple[Frame, SegmentFrame]:
    """Ray-cast frame `index` (1-based). Depth equals camera z exactly."""
    intr = scene.intrinsics
    pose = scene.trajectory[index - 1]
    h, w = intr.height, intr.width

    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(u - intr.cx) / intr.fx,
                         (v - intr.cy) / intr.fy,
                         np.ones_like(u)], axis=-1).reshape(-1, 3)
    # Unnormalized directions keep the ray parameter equal to camera z.
    dirs = dirs_cam @ pose.rotation.T
    eye = pose.translation

    t = np.full(h * w, np.inf)
    hit_obj = np.full(h * w, -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        if isinstance(obj, SphereSpec):
            tk = _sphere_hits(obj, eye, dirs)
        else:
            tk = _box_hits(obj, eye, dirs)
        closer = tk < t
        t[closer] = tk[closer]
        hit_obj[closer] = k

    if scene.room is not None:
        tr = _room_exit(scene.room, eye, dirs)
        background = (hit_obj == -1) & np.isfinite(tr)
        t[background] = tr[background]
        hit_obj[background] = -2

    rgb = np.zeros((h * w, 3))
    ids = np.zeros(h * w, dtype=np.int32)
    hit = hit_obj != -1
    points = eye + t[hit, None] * dirs[hit]
    shade = np.where(_checker_mask(points), CHECKER_DIM, 1.0)
    surf = hit_obj[hit]
    colors = np.empty((surf.size, 3))
    checkered = np.zeros(surf.size, dtype=bool)
    ids_hit = np.zeros(surf.size, dtype=np.int32)
    for k, obj in enumerate(scene.objects):
        sel = surf == k
        colors[sel] = obj.color
        checkered[sel] = obj.checker
        ids_hit[sel] = obj.instance_id
    if scene.room is not None:
        sel = surf == -2
        colors[sel] = scene.room.color
        checkered[sel] = scene.room.checker
    ids[hit] = ids_hit
    rgb[hit] = colors * np.where(checkered, shade, 1.0)[:, None]

    depth = np.where(np.isfinite(t), t, 0.0).reshape(h, w)
    frame = Frame(index=index, rgb=rgb.reshape(h, w, 3), depth=depth,
                  pose=pose, intrinsics=intr)
    return frame, SegmentFrame(id_map=ids.reshape(h, w), frame_index=index)


def render_scene(scene: SyntheticScene) -> tuple[list[Frame], list[SegmentFrame]]:
    """Render every trajectory pose; error if some object is never seen."""
    frames: list[Frame] = []
    gt: list[SegmentFrame] = []
    for i in range(1, len(scene.trajectory) + 1):
        f, s = render_scene_frame(scene, i)
        frames.append(f)
        gt.append(s)
    seen: set[int] = set()
    for s in gt:
        seen.update(int(i) for i in s.ids())
    missing = sorted(o.instance_id for o in scene.objects
                     if o.instance_id not in seen)
    if missing:
        raise DataError(f"objects never visible from any camera pose: {missing}")
    return frames, gt


# --- detector noise ---------------------------------------------------------


def _split_mask(id_map: np.ndarray, obj_id: int, new_id: int) -> None:
    mask = id_map == obj_id
    cols = np.nonzero(mask)[1]
    centroid = cols.mean()
    right = mask & (np.arange(id_map.shape[1])[None, :] > centroid)
    if right.any() and not right.all():
        id_map[right] = new_id


def _jitter_mask(id_map: np.ndarray, obj_id: int, radius: int,
                 rng: np.random.Generator) -> None:
    mask = id_map == obj_id
    grown = ndimage.binary_dilation(mask, iterations=radius)
    ring = grown & (id_map == 0)
    cand = np.nonzero(ring)
    take = rng.random(cand[0].size) < 0.5
    id_map[cand[0][take], cand[1][take]] = obj_id


def corrupt_detections(gt: list[SegmentFrame], noise: DetectorNoise,
                       seed: int) -> list[SegmentFrame]:
    """Degrade ground-truth masks per `noise`; zero noise is the identity."""
    if noise.is_zero:
        return [SegmentFrame(s.id_map.copy(), s.frame_index) for s in gt]
    rng = np.random.default_rng(seed)
    out: list[SegmentFrame] = []
    for s in gt:
        id_map = s.id_map.copy()
        present = [int(i) for i in s.ids()]
        next_id = max(present, default=0) + 1

        for obj in present:
            p = noise.drop_for(obj)
            if p > 0 and rng.random() < p:
                id_map[id_map == obj] = 0
        survivors = [o for o in present if (id_map == o).any()]

        for obj in survivors:
            if noise.split_prob > 0 and rng.random() < noise.split_prob:
                _split_mask(id_map, obj, next_id)
                next_id += 1

        if noise.boundary_jitter > 0:
            for obj in np.unique(id_map[id_map > 0]):
                _jitter_mask(id_map, int(obj), noise.boundary_jitter, rng)

        if noise.relabel == "per-frame-random-permutation":
            ids = np.unique(id_map[id_map > 0])
            if ids.size > 1:
                perm = rng.permutation(ids)
                relabeled = id_map.copy()
                for old, new in zip(ids, perm):
                    relabeled[id_map == old] = new
                id_map = relabeled

        out.append(SegmentFrame(id_map=id_map, frame_index=s.frame_index))
    return out


# --- declarative configs and presets ----------------------------------------

_PALETTE = np.array([
    [0.85, 0.30, 0.25], [0.25, 0.60, 0.85], [0.30, 0.75, 0.35],
    [0.90, 0.75, 0.25], [0.70, 0.35, 0.80], [0.90, 0.50, 0.20],
    [0.25, 0.75, 0.70], [0.80, 0.40, 0.55],
])


def _room_orbit_config() -> dict:
    objects = []
    for k in range(8):
        angle = 2.0 * math.pi * k / 8
        x = 0.95 * math.cos(angle)
        y = 0.95 * math.sin(angle)
        color = _PALETTE[k].tolist()
        if k % 2 == 0:
            objects.append({"shape": "sphere", "id": k + 1,
                            "center": [x, y, 0.45], "radius": 0.28,
                            "color": color})
        else:
            objects.append({"shape": "box", "id": k + 1,
                            "lo": [x - 0.22, y - 0.22, 0.1],
                            "hi": [x + 0.22, y + 0.22, 0.62],
                            "color": color, "checker": k == 3})
    return {
        "width": 320, "height": 240, "fx": 200.0, "fy": 200.0,
        "frames": 60,
        "room": {"lo": [-3.2, -3.2, 0.0], "hi": [3.2, 3.2, 2.6],
                 "color": [0.78, 0.78, 0.74]},
        "objects": objects,
        "trajectory": {"kind": "orbit", "center": [0.0, 0.0, 1.35],
                       "radius": 2.45, "look_at": [0.0, 0.0, 0.4],
                       "start_deg": 0.0, "sweep_deg": 360.0},
    }


def _two_plane_config() -> dict:
    # camera looks along +x; a small slab at x=1.5 occludes part of a big
    # wall at x=3; sliding the camera sideways exposes the hidden strip
    return {
        "width": 320, "height": 240, "fx": 260.0, "fy": 260.0,
        "frames": 2,
        "room": None,
        "objects": [
            {"shape": "box", "id": 1, "lo": [1.45, -0.4, -0.3],
             "hi": [1.55, 0.4, 0.3], "color": [0.85, 0.35, 0.25]},
            {"shape": "box", "id": 2, "lo": [3.0, -2.2, -1.6],
             "hi": [3.1, 2.2, 1.6], "color": [0.3, 0.55, 0.8],
             "checker": True},
        ],
        "trajectory": {"kind": "linear", "start": [0.0, 0.0, 0.0],
                       "end": [0.0, 0.45, 0.0], "look_dir": [1.0, 0.0, 0.0]},
    }


PRESETS = {
    "room-orbit": _room_orbit_config,
    "two-plane": _two_plane_config,
}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _vec3(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    _require(arr.shape == (3,), f"{what} must be a 3-vector")
    return arr


def _build_trajectory(spec: dict, frames: int) -> list[Pose]:
    kind = spec.get("kind")
    if kind == "orbit":
        center = _vec3(spec["center"], "orbit center")
        radius = float(spec["radius"])
        _require(radius > 0, "orbit radius must be positive")
        look_at = _vec3(spec.get("look_at", center), "orbit look_at")
        start = math.radians(float(spec.get("start_deg", 0.0)))
        sweep = math.radians(float(spec.get("sweep_deg", 360.0)))
        poses = []
        for i in range(frames):
            angle = start + sweep * i / frames
            eye = center + radius * np.array([math.cos(angle),
                                              math.sin(angle), 0.0])
            poses.append(look_at_pose(eye, look_at))
        return poses
    if kind == "linear":
        start = _vec3(spec["start"], "linear start")
        end = _vec3(spec["end"], "linear end")
        poses = []
        for i in range(frames):
            s = i / max(frames - 1, 1)
            eye = (1 - s) * start + s * end
            if "look_dir" in spec:
                poses.append(_pose_with_forward(eye, _vec3(spec["look_dir"],
                                                           "look_dir")))
            else:
                poses.append(look_at_pose(eye, _vec3(spec["look_at"],
                                                     "look_at")))
        return poses
    if kind == "static":
        eye = _vec3(spec["eye"], "static eye")
        if "look_dir" in spec:
            pose = _pose_with_forward(eye, _vec3(spec["look_dir"], "look_dir"))
        else:
            pose = look_at_pose(eye, _vec3(spec["look_at"], "look_at"))
        return [pose] * frames
    raise ConfigError(f"unknown trajectory kind {kind!r}")


def scene_from_config(config: dict, seed: int) -> SyntheticScene:
    """Build a scene from a declarative description (see README schema).

    A "preset" key loads a named base config; any other keys override its
    fields. Object colors default to a fixed palette cycled by object order.
    """
    cfg = dict(config)
    preset = cfg.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        base = PRESETS[preset]()
        base.update(cfg)
        cfg = base

    for key in ("width", "height", "frames"):
        _require(key in cfg, f"scene config is missing {key!r}")
    width, height = int(cfg["width"]), int(cfg["height"])
    frames = int(cfg["frames"])
    _require(frames >= 2, "scene needs at least 2 frames")
    fx = float(cfg.get("fx", 0.8 * width))
    fy = float(cfg.get("fy", fx))
    cx = float(cfg.get("cx", (width - 1) / 2.0))
    cy = float(cfg.get("cy", (height - 1) / 2.0))
    intr = CameraIntrinsics(fx, fy, cx, cy, width, height)

    objects = []
    for k, ospec in enumerate(cfg.get("objects", [])):
        _require(isinstance(ospec, dict), "each object must be a mapping")
        shape = ospec.get("shape")
        oid = int(ospec.get("id", k + 1))
        color = np.asarray(ospec.get("color", _PALETTE[k % len(_PALETTE)]),
                           dtype=np.float64)
        checker = bool(ospec.get("checker", False))
        if shape == "sphere":
            objects.append(SphereSpec(oid, _vec3(ospec["center"], "center"),
                                      float(ospec["radius"]), color, checker))
        elif shape == "box":
            objects.append(BoxSpec(oid, _vec3(ospec["lo"], "lo"),
                                   _vec3(ospec["hi"], "hi"), color, checker))
        else:
            raise ConfigError(f"unknown object shape {shape!r}")

    room = None
    rspec = cfg.get("room")
    if rspec is not None:
        room = RoomSpec(lo=_vec3(rspec["lo"], "room lo"),
                        hi=_vec3(rspec["hi"], "room hi"),
                        color=np.asarray(rspec.get("color", [0.75, 0.75, 0.75]),
                                         dtype=np.float64),
                        checker=bool(rspec.get("checker", True)))

    _require("trajectory" in cfg, "scene config is missing 'trajectory'")
    trajectory = _build_trajectory(cfg["trajectory"], frames)
    return SyntheticScene(objects=objects, room=room, trajectory=trajectory,
                          intrinsics=intr, seed=seed)


def noise_from_config(config: dict | None) -> DetectorNoise:
    if not config:
        return DetectorNoise()
    known = {"drop_prob", "relabel", "split_prob", "boundary_jitter"}
    extra = set(config) - known
    if extra:
        raise ConfigError(f"unknown detector noise keys: {sorted(extra)}")
    drop = config.get("drop_prob", 0.0)
    if isinstance(drop, dict):
        drop = {int(k): float(v) for k, v in drop.items()}
    else:
        drop = float(drop)
    return DetectorNoise(
        drop_prob=drop,
        relabel=str(config.get("relabel", "none")),
        split_prob=float(config.get("split_prob", 0.0)),
        boundary_jitter=int(config.get("boundary_jitter", 0)),
    )


def generate_scene(config: dict, seed: int, out_dir: str | Path) -> Path:
    """Render a scene config and write the dataset directory layout.

    Writes rgb/, depth/, pose/, gt/, intrinsics.txt, and, when the config has
    a "detector_noise" section, detections under det/. Returns `out_dir`.
    """
    cfg = dict(config)
    noise = noise_from_config(cfg.pop("detector_noise", None))
    scene = scene_from_config(cfg, seed)
    frames, gt = render_scene(scene)
    det = None
    if not noise.is_zero:
        det = corrupt_detections(gt, noise, seed)
    out = Path(out_dir)
    save_dataset(out, frames, gt, det)
    return out
