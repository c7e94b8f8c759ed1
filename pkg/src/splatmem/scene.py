"""Camera, frame, and segment data model shared by every stage.

Conventions used throughout the package:

- Poses are camera-to-world rigid transforms. The camera looks down +z,
  x grows to the right in the image, y grows downward.
- Pixel (u, v) means column u, row v, and the pixel center sits at the
  integer coordinate (u, v) of the continuous image plane.
- Depth maps store the camera-space z coordinate in meters. A depth of
  exactly 0 marks an invalid measurement.
- Segment id maps store one integer per pixel. Id 0 is reserved for
  background / unassigned, object ids are strictly positive.
- Frame indices are 1-based: a video with T frames uses indices 1..T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for one camera, in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DataError("image size must be positive")

    def crop_border(self, border: int) -> "CameraIntrinsics":
        """Intrinsics after removing a uniform border of `border` pixels."""
        if border < 0 or 2 * border >= min(self.width, self.height):
            raise DataError(f"cannot crop border of {border} pixels from "
                            f"{self.width}x{self.height} image")
        return CameraIntrinsics(self.fx, self.fy,
                                self.cx - border, self.cy - border,
                                self.width - 2 * border,
                                self.height - 2 * border)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray   # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DataError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise DataError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > ROTATION_TOL:
            raise DataError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise DataError("pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise DataError("pose matrix must be 4x4")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > ROTATION_TOL:
            raise DataError("pose matrix last row must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass
class Frame:
    """One posed RGB-D observation."""

    index: int
    rgb: np.ndarray    # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    pose: Pose
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        if self.index < 1:
            raise DataError("frame indices are 1-based")
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3):
            raise DataError(f"rgb shape {self.rgb.shape} does not match "
                            f"intrinsics {h}x{w}")
        if self.depth.shape != (h, w):
            raise DataError(f"depth shape {self.depth.shape} does not match "
                            f"intrinsics {h}x{w}")
        if np.any(self.depth < 0):
            raise DataError("depth values must be non-negative (0 = invalid)")


@dataclass
class SegmentFrame:
    """Per-pixel segment ids for one frame. Id 0 is background."""

    id_map: np.ndarray  # (H, W) integers
    frame_index: int

    def __post_init__(self) -> None:
        if self.id_map.ndim != 2:
            raise DataError("id map must be 2-D")
        if not np.issubdtype(self.id_map.dtype, np.integer):
            self.id_map = self.id_map.astype(np.int32)
        if self.id_map.size and self.id_map.min() < 0:
            raise DataError("segment ids must be non-negative")

    def ids(self) -> np.ndarray:
        """Sorted nonzero segment ids present in this frame."""
        u = np.unique(self.id_map)
        return u[u > 0]

    def mask(self, segment_id: int) -> np.ndarray:
        return self.id_map == segment_id


@dataclass
class SegmentTube:
    """One object's masks over the frames where it is visible."""

    object_id: int
    masks: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self) -> None:
        indices = [i for i, _ in self.masks]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataError("tube frame indices must be strictly increasing")

    def frame_indices(self) -> list[int]:
        return [i for i, _ in self.masks]

    def mask_at(self, frame_index: int) -> np.ndarray | None:
        for i, m in self.masks:
            if i == frame_index:
                return m
        return None


def back_project(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    """Lift every valid-depth pixel of `frame` to a world-space point.

    Returns (points, valid) where points is (H, W, 3) and valid is the
    boolean mask of pixels with nonzero depth. Points at invalid pixels
    are zero. A pixel (u, v) with depth D maps to the camera-space point
    ((u - cx) D / fx, (v - cy) D / fy, D) and then through the pose.
    """
    intr = frame.intrinsics
    h, w = intr.height, intr.width
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    d = frame.depth.astype(np.float64)
    valid = d > 0
    x = (uu - intr.cx) * d / intr.fx
    y = (vv - intr.cy) * d / intr.fy
    cam = np.stack([x, y, d], axis=-1)
    pts = frame.pose.transform(cam)
    pts[~valid] = 0.0
    return pts, valid


def tubes_from_id_maps(frames: list[SegmentFrame]) -> list[SegmentTube]:
    """Group per-frame masks by segment id into tubes, ids ascending."""
    by_id: dict[int, list[tuple[int, np.ndarray]]] = {}
    seen: set[int] = set()
    for f in frames:
        if f.frame_index in seen:
            raise DataError(f"duplicate frame index {f.frame_index}")
        seen.add(f.frame_index)
    for f in sorted(frames, key=lambda f: f.frame_index):
        for sid in f.ids():
            by_id.setdefault(int(sid), []).append((f.frame_index, f.mask(int(sid))))
    return [SegmentTube(sid, masks) for sid, masks in sorted(by_id.items())]


def id_maps_from_tubes(tubes: list[SegmentTube], frame_indices: list[int],
                       shape: tuple[int, int]) -> list[SegmentFrame]:
    """Inverse of tubes_from_id_maps for disjoint tubes.

    `frame_indices` fixes the output frames so that frames where no tube
    is visible survive the round trip as all-background maps.
    """
    maps = {i: np.zeros(shape, dtype=np.int32) for i in frame_indices}
    for tube in tubes:
        for i, mask in tube.masks:
            if i not in maps:
                raise DataError(f"tube {tube.object_id} references frame {i} "
                                "outside the requested index list")
            target = maps[i]
            if np.any(target[mask] != 0):
                raise DataError("tubes overlap; id maps require disjoint masks")
            target[mask] = tube.object_id
    return [SegmentFrame(maps[i], i) for i in frame_indices]
