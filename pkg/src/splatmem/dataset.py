"""On-disk dataset layout and PNG/text readers and writers.

A dataset directory holds, with frame indices running 1..T:

    intrinsics.txt        one line: fx fy cx cy width height
    rgb/%06d.png          8-bit RGB
    depth/%06d.png        16-bit grayscale, depth in millimeters, 0 invalid
    pose/%06d.txt         4x4 camera-to-world matrix, row-major text
    gt/%06d.png           optional 16-bit id maps (labels)
    det/%06d.png          optional 16-bit id maps (detections)

Loading can remove a uniform pixel border from every image channel; the
intrinsics are shifted and shrunk to stay consistent with the crop.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .scene import CameraIntrinsics, Frame, Pose, SegmentFrame

DEPTH_SCALE = 1000.0  # stored millimeters per meter
MAX_DEPTH_M = 65.535  # largest depth a 16-bit millimeter PNG can hold


@dataclass
class Dataset:
    """An in-memory view of one dataset directory."""

    frames: list[Frame]
    gt: list[SegmentFrame] | None = None
    det: list[SegmentFrame] | None = None

    def __len__(self) -> int:
        return len(self.frames)


def _frame_name(index: int) -> str:
    return f"{index:06d}"


def write_rgb8(path: Path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb8(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_gray16(path: Path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.min() < 0 or arr.max() > 65535:
        raise DataError("16-bit PNG values must lie in [0, 65535]")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_gray16(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.int64)
    if arr.ndim != 2:
        raise DataError(f"{path} is not a single-channel image")
    if arr.min() < 0 or arr.max() > 65535:
        raise DataError(f"{path} does not hold 16-bit values")
    return arr.astype(np.uint16)


def write_depth(path: Path, depth_m: np.ndarray) -> None:
    d = np.asarray(depth_m, dtype=np.float64)
    if np.any(d < 0):
        raise DataError("depth must be non-negative")
    if np.any(d > MAX_DEPTH_M):
        raise DataError(f"depth beyond {MAX_DEPTH_M} m does not fit 16-bit mm")
    write_gray16(path, np.round(d * DEPTH_SCALE))


def read_depth(path: Path) -> np.ndarray:
    return read_gray16(path).astype(np.float64) / DEPTH_SCALE


def write_pose(path: Path, pose: Pose) -> None:
    np.savetxt(path, pose.matrix(), fmt="%.17g")


def read_pose(path: Path) -> Pose:
    try:
        m = np.loadtxt(path)
    except ValueError as exc:
        raise DataError(f"unreadable pose file {path}: {exc}") from exc
    if m.shape != (4, 4):
        raise DataError(f"pose file {path} must hold a 4x4 matrix")
    return Pose.from_matrix(m)


def write_intrinsics(path: Path, intr: CameraIntrinsics) -> None:
    path.write_text(f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} "
                    f"{intr.cy:.17g} {intr.width} {intr.height}\n")


def read_intrinsics(path: Path) -> CameraIntrinsics:
    parts = path.read_text().split()
    if len(parts) != 6:
        raise DataError(f"intrinsics file {path} must hold "
                        "'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = int(parts[4]), int(parts[5])
    except ValueError as exc:
        raise DataError(f"unreadable intrinsics file {path}: {exc}") from exc
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def write_id_map(path: Path, segment: SegmentFrame) -> None:
    ids = segment.id_map
    if ids.size and ids.max() > 65535:
        raise DataError("segment ids beyond 65535 do not fit 16-bit PNGs")
    write_gray16(path, ids)


def read_id_map(path: Path, frame_index: int) -> SegmentFrame:
    return SegmentFrame(read_gray16(path).astype(np.int32), frame_index)


def save_dataset(root: Path, frames: list[Frame],
                 gt: list[SegmentFrame] | None = None,
                 det: list[SegmentFrame] | None = None) -> None:
    """Write a full dataset directory; intrinsics come from frame 1."""
    root = Path(root)
    if not frames:
        raise DataError("cannot save an empty dataset")
    for sub in ["rgb", "depth", "pose"]:
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", frames[0].intrinsics)
    for f in frames:
        name = _frame_name(f.index)
        write_rgb8(root / "rgb" / f"{name}.png", f.rgb)
        write_depth(root / "depth" / f"{name}.png", f.depth)
        write_pose(root / "pose" / f"{name}.txt", f.pose)
    for sub, seq in [("gt", gt), ("det", det)]:
        if seq is None:
            continue
        (root / sub).mkdir(parents=True, exist_ok=True)
        for s in seq:
            write_id_map(root / sub / f"{_frame_name(s.frame_index)}.png", s)


def save_id_maps(directory: Path, segments: list[SegmentFrame]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in segments:
        write_id_map(directory / f"{_frame_name(s.frame_index)}.png", s)


def load_id_maps(directory: Path) -> list[SegmentFrame]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"id map directory {directory} does not exist")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"id map directory {directory} holds no PNG files")
    out = []
    for p in paths:
        try:
            index = int(p.stem)
        except ValueError as exc:
            raise DataError(f"id map file name {p.name} is not a frame index") from exc
        out.append(read_id_map(p, index))
    return out


def _crop2(arr: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return arr
    return arr[border:-border, border:-border]


def load_dataset(root: Path, crop_border: int = 0) -> Dataset:
    """Load a dataset directory, optionally cropping a uniform border.

    The crop removes `crop_border` pixels from every side of every image
    channel (rgb, depth, gt, det) and adjusts the intrinsics to match, so
    projection math stays valid on the cropped frames.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    intr_path = root / "intrinsics.txt"
    if not intr_path.is_file():
        raise DataError(f"dataset {root} is missing intrinsics.txt")
    intr = read_intrinsics(intr_path)
    if crop_border:
        intr = intr.crop_border(crop_border)

    rgb_paths = sorted((root / "rgb").glob("*.png"))
    if not rgb_paths:
        raise DataError(f"dataset {root} holds no rgb frames")
    frames = []
    for p in rgb_paths:
        try:
            index = int(p.stem)
        except ValueError as exc:
            raise DataError(f"frame file name {p.name} is not a frame index") from exc
        name = _frame_name(index)
        depth_path = root / "depth" / f"{name}.png"
        pose_path = root / "pose" / f"{name}.txt"
        if not depth_path.is_file():
            raise DataError(f"frame {index} is missing its depth map")
        if not pose_path.is_file():
            raise DataError(f"frame {index} is missing its pose")
        frames.append(Frame(index=index,
                            rgb=_crop2(read_rgb8(p), crop_border),
                            depth=_crop2(read_depth(depth_path), crop_border),
                            pose=read_pose(pose_path),
                            intrinsics=intr))

    def load_optional(sub: str) -> list[SegmentFrame] | None:
        d = root / sub
        if not d.is_dir():
            return None
        out = []
        for f in frames:
            p = d / f"{_frame_name(f.index)}.png"
            if not p.is_file():
                raise DataError(f"{sub} maps are present but frame {f.index} "
                                "is missing")
            seg = read_id_map(p, f.index)
            out.append(SegmentFrame(_crop2(seg.id_map, crop_border), f.index))
        return out

    return Dataset(frames=frames, gt=load_optional("gt"), det=load_optional("det"))
