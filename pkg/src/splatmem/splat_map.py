"""The growable Gaussian map and its construction from posed RGB-D frames.

Geometry follows the online-mapping recipe: every valid-depth pixel of a
frame becomes one isotropic Gaussian sitting on the back-projected point,
fully opaque, with an identity orientation and a scale of one pixel's
footprint at that depth (depth / fx per axis). Geometry, color, and
opacity are frozen once created; only the identity feature vector is ever
optimized afterwards.

Densification runs after the map has been rendered into a new frame: a
pixel earns a fresh Gaussian when the rendered silhouette says the map
does not cover it yet, or when the observation sits more than a depth
gate in front of the rendered surface, which catches newly seen geometry
while ignoring the depth mixing that splat tails cause at occlusion
boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .codebook import Codebook, encode
from .errors import DataError
from .scene import Frame, SegmentFrame, back_project

if TYPE_CHECKING:  # pragma: no cover
    from .raster import RenderOutput

DEPTH_GATE = 0.15
COVERAGE_THRESHOLD = 0.5
FIELDS_PER_GAUSSIAN = 14  # mu 3 + q 4 + s 3 + opacity 1 + color 3, plus d_id

_MAGIC = b"SMGM"
_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


@dataclass
class Gaussian:
    """One map element, a convenience view used by tests and tools."""

    position: np.ndarray    # (3,)
    quaternion: np.ndarray  # (4,) w, x, y, z
    scale: np.ndarray       # (3,)
    opacity: float
    color: np.ndarray       # (3,)
    feature: np.ndarray     # (d_id,)


class GaussianMap:
    """Structure-of-arrays store for the splat map. Single writer."""

    def __init__(self, positions: np.ndarray, quaternions: np.ndarray,
                 scales: np.ndarray, opacities: np.ndarray,
                 colors: np.ndarray, features: np.ndarray) -> None:
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.quaternions = np.asarray(quaternions, dtype=np.float64).reshape(-1, 4)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError("features must be a 2-D (count, d_id) array")
        self.features = feats
        self.validate()

    @classmethod
    def empty(cls, d_id: int) -> "GaussianMap":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros((0, d_id)))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def d_id(self) -> int:
        return self.features.shape[1]

    def parameter_count(self) -> int:
        return len(self) * (FIELDS_PER_GAUSSIAN + self.d_id)

    def validate(self) -> None:
        n = len(self)
        for name, arr, shape in [("quaternions", self.quaternions, (n, 4)),
                                 ("scales", self.scales, (n, 3)),
                                 ("opacities", self.opacities, (n,)),
                                 ("colors", self.colors, (n, 3)),
                                 ("features", self.features,
                                  (n, self.features.shape[1]))]:
            if arr.shape != shape:
                raise DataError(f"{name} shape {arr.shape} does not match "
                                f"{n} Gaussians")
        if n == 0:
            return
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise DataError("opacities must lie in [0, 1]")
        if np.any(self.scales <= 0):
            raise DataError("scales must be positive")

    def gaussian(self, index: int) -> Gaussian:
        return Gaussian(self.positions[index], self.quaternions[index],
                        self.scales[index], float(self.opacities[index]),
                        self.colors[index], self.features[index])

    def append(self, other: "GaussianMap") -> None:
        if other.d_id != self.d_id:
            raise DataError("cannot append a map with a different d_id")
        self.positions = np.concatenate([self.positions, other.positions])
        self.quaternions = np.concatenate([self.quaternions, other.quaternions])
        self.scales = np.concatenate([self.scales, other.scales])
        self.opacities = np.concatenate([self.opacities, other.opacities])
        self.colors = np.concatenate([self.colors, other.colors])
        self.features = np.concatenate([self.features, other.features])

    def save(self, path: Path) -> None:
        header = _HEADER.pack(_MAGIC, _VERSION, 0, len(self), self.d_id)
        rows = np.concatenate([self.positions, self.quaternions, self.scales,
                               self.opacities[:, None], self.colors,
                               self.features], axis=1).astype("<f4")
        Path(path).write_bytes(header + rows.tobytes(order="C"))

    @classmethod
    def load(cls, path: Path) -> "GaussianMap":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"map checkpoint {path} does not exist")
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"map checkpoint {path} is truncated")
        magic, version, _, count, d_id = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise DataError(f"{path} is not a map checkpoint (bad magic)")
        if version != _VERSION:
            raise DataError(f"map checkpoint version {version} not supported")
        width = FIELDS_PER_GAUSSIAN + d_id
        expected = _HEADER.size + 4 * count * width
        if len(raw) != expected:
            raise DataError(f"map checkpoint {path} has {len(raw)} bytes, "
                            f"expected {expected}")
        rows = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        rows = rows.reshape(count, width).astype(np.float64)
        return cls(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10],
                   rows[:, 11:14], rows[:, 14:])


def _gaussians_for_pixels(frame: Frame, feature_map: np.ndarray,
                          select: np.ndarray) -> GaussianMap:
    """Build per-pixel Gaussians for the selected valid-depth pixels."""
    pts, valid = back_project(frame)
    select = select & valid
    n = int(select.sum())
    d_id = feature_map.shape[2]
    if n == 0:
        return GaussianMap.empty(d_id)
    depths = frame.depth[select]
    scales = np.repeat((depths / frame.intrinsics.fx)[:, None], 3, axis=1)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianMap(positions=pts[select],
                       quaternions=quats,
                       scales=scales,
                       opacities=np.ones(n),
                       colors=frame.rgb[select],
                       features=feature_map[select])


def initialize_from_frame(frame: Frame, segments: SegmentFrame,
                          book: Codebook,
                          assignment: dict[int, int]) -> GaussianMap:
    """One Gaussian per valid-depth pixel, features from the segment map."""
    feat = encode(segments, book, assignment)
    return _gaussians_for_pixels(frame, feat,
                                 np.ones(frame.depth.shape, dtype=bool))


def densify(gmap: GaussianMap, frame: Frame, rendered: "RenderOutput",
            segments: SegmentFrame, book: Codebook,
            assignment: dict[int, int],
            depth_gate: float = DEPTH_GATE,
            coverage_threshold: float = COVERAGE_THRESHOLD) -> int:
    """Add Gaussians where `rendered` fails to explain `frame`.

    `rendered` must come from rendering `gmap` at `frame`'s pose. Returns
    the number of Gaussians added. New Gaussians take their feature from
    `segments` (background pixels get a zero feature).

    The depth test is one-sided: it fires only where the observation is
    closer than the rendered surface, meaning unmodeled geometry in front.
    Pixels where the observation is deeper stay untouched; splats there
    would sit behind existing ones and never receive blend weight, and at
    occlusion boundaries the rendered depth mixes near and far surfaces,
    which would otherwise trigger spurious growth every frame.
    """
    if rendered.shape != frame.depth.shape:
        raise DataError("rendered output does not match the frame size")
    obs_valid = frame.depth > 0
    uncovered = rendered.silhouette < coverage_threshold
    covered = ~uncovered
    disparity = covered & obs_valid & (
        rendered.depth - frame.depth > depth_gate)
    select = obs_valid & (uncovered | disparity)
    if not select.any():
        return 0
    feat = encode(segments, book, assignment)
    fresh = _gaussians_for_pixels(frame, feat, select)
    gmap.append(fresh)
    return len(fresh)


def cap_feature_norms(gmap: GaussianMap, max_norm: float = 1.0) -> None:
    """Rescale any feature row whose norm exceeds `max_norm` down to it."""
    norms = np.linalg.norm(gmap.features, axis=1)
    over = norms > max_norm
    if over.any():
        gmap.features[over] *= (max_norm / norms[over])[:, None]
