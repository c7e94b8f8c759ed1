"""Tube-overlap quality scores for class-agnostic video segmentation.

Two scores, both label-permutation invariant:

- vsq: windowed tube matching. For each window size k and each stride
  offset, every tube is restricted to the window's frames, predictions are
  assigned to ground truth one-to-one by maximum total tube IoU, and the
  window scores sum(IoU of accepted pairs) / (TP + FP/2 + FN/2). A pair is
  accepted when its IoU clears the floor. Tube IoU over a window is one
  joint ratio: intersections and unions summed over the window's frames
  before dividing.

- stq: whole-video association/segmentation balance, the geometric mean
  of AQ and SQ. SQ is the IoU between the union of all predicted pixels
  and the union of all labeled pixels. AQ averages, over ground-truth
  tracks, the precision-weighted IoU of every overlapping predicted track.

Videos with no ground truth and no predictions score 1.0 by convention
(nothing was missed and nothing was invented).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .scene import SegmentTube

DEFAULT_K_SET = (1, 5, 10, 15)
DEFAULT_STRIDE = 15
DEFAULT_IOU_FLOOR = 0.5


@dataclass
class VsqReport:
    per_k: dict[int, float]
    vsq: float
    window_counts: dict[int, list[tuple[int, int, int]]] = field(
        default_factory=dict)  # per k: (TP, FP, FN) for each scored window

    def __post_init__(self) -> None:
        for k, score in self.per_k.items():
            if not 0.0 <= score <= 1.0 + 1e-12:
                raise DataError(f"VSQ^{k} = {score} is outside [0, 1]")


@dataclass
class StqReport:
    aq: float
    sq: float
    stq: float

    def __post_init__(self) -> None:
        for name, value in (("AQ", self.aq), ("SQ", self.sq),
                            ("STQ", self.stq)):
            if not 0.0 <= value <= 1.0 + 1e-12:
                raise DataError(f"{name} = {value} is outside [0, 1]")
        if abs(self.stq ** 2 - self.aq * self.sq) > 1e-9:
            raise DataError("STQ must be the geometric mean of AQ and SQ")


def _tube_span(tubes: list[SegmentTube]) -> int:
    last = 0
    for tube in tubes:
        for i, _ in tube.masks:
            last = max(last, i)
    return last


def _check_tubes(tubes: list[SegmentTube], num_frames: int,
                 shape: tuple[int, int] | None, side: str):
    for tube in tubes:
        for i, mask in tube.masks:
            if i > num_frames:
                raise DataError(f"{side} tube {tube.object_id} has a mask at "
                                f"frame {i} beyond the video length "
                                f"{num_frames}")
            if shape is None:
                shape = mask.shape
            elif mask.shape != shape:
                raise DataError(f"{side} tube {tube.object_id} mask shape "
                                f"{mask.shape} does not match {shape}")
    return shape


def _window_restrict(tubes: list[SegmentTube], start: int, end: int):
    """Masks of each tube inside 1-based frame window [start, end]."""
    out = []
    for tube in tubes:
        masks = {i: m for i, m in tube.masks if start <= i <= end}
        if masks and any(m.any() for m in masks.values()):
            out.append(masks)
    return out


def _tube_iou(a: dict[int, np.ndarray], b: dict[int, np.ndarray]) -> float:
    inter = 0
    union = 0
    for i in set(a) | set(b):
        if i in a and i in b:
            inter += int((a[i] & b[i]).sum())
            union += int((a[i] | b[i]).sum())
        elif i in a:
            union += int(a[i].sum())
        else:
            union += int(b[i].sum())
    return inter / union if union else 0.0


def vsq(pred: list[SegmentTube], gt: list[SegmentTube],
        k_set: tuple[int, ...] = DEFAULT_K_SET,
        stride: int = DEFAULT_STRIDE,
        iou_floor: float = DEFAULT_IOU_FLOOR,
        num_frames: int | None = None) -> VsqReport:
    """Windowed tube-matching quality; see the module docstring.

    `num_frames` defaults to the last frame index present on either side.
    Windows that would extend past the end are truncated. Windows where
    neither side has any tube are skipped, not scored.
    """
    if not k_set:
        raise DataError("k_set must not be empty")
    if stride < 1:
        raise DataError("stride must be at least 1")
    if num_frames is None:
        num_frames = max(_tube_span(pred), _tube_span(gt))
    shape = _check_tubes(gt, num_frames, None, "gt")
    _check_tubes(pred, num_frames, shape, "pred")

    per_k: dict[int, float] = {}
    window_counts: dict[int, list[tuple[int, int, int]]] = {}
    for k in sorted(k_set):
        if k < 1:
            raise DataError("window sizes must be at least 1")
        scores = []
        counts = []
        for start in range(1, max(num_frames, 1) + 1, stride):
            end = min(start + k - 1, num_frames)
            gts = _window_restrict(gt, start, end)
            preds = _window_restrict(pred, start, end)
            if not gts and not preds:
                continue
            iou = np.zeros((len(gts), len(preds)))
            for gi, g in enumerate(gts):
                for pi, p in enumerate(preds):
                    iou[gi, pi] = _tube_iou(g, p)
            tp_iou = 0.0
            tp = 0
            if iou.size:
                rows, cols = linear_sum_assignment(iou, maximize=True)
                for r, c in zip(rows, cols):
                    if iou[r, c] > iou_floor:
                        tp += 1
                        tp_iou += iou[r, c]
            fp = len(preds) - tp
            fn = len(gts) - tp
            scores.append(tp_iou / (tp + 0.5 * fp + 0.5 * fn))
            counts.append((tp, fp, fn))
        per_k[k] = float(np.mean(scores)) if scores else 1.0
        window_counts[k] = counts
    aggregate = float(np.mean([per_k[k] for k in per_k]))
    return VsqReport(per_k=per_k, vsq=aggregate, window_counts=window_counts)


def _track_pixels(maps: list[np.ndarray]):
    """Total pixel count of each nonzero id across the whole video."""
    sizes: dict[int, int] = {}
    for m in maps:
        ids, counts = np.unique(m[m > 0], return_counts=True)
        for i, c in zip(ids, counts):
            sizes[int(i)] = sizes.get(int(i), 0) + int(c)
    return sizes


def stq(pred: list[np.ndarray], gt: list[np.ndarray]) -> StqReport:
    """Whole-video STQ = sqrt(AQ * SQ) over aligned id-map sequences."""
    if len(pred) != len(gt):
        raise DataError(f"prediction has {len(pred)} frames, ground truth "
                        f"has {len(gt)}")
    for t, (p, g) in enumerate(zip(pred, gt)):
        if p.shape != g.shape:
            raise DataError(f"frame {t + 1}: prediction shape {p.shape} "
                            f"does not match ground truth {g.shape}")

    pred_any = 0
    gt_any = 0
    both = 0
    inter: dict[tuple[int, int], int] = {}
    for p, g in zip(pred, gt):
        pm = p > 0
        gm = g > 0
        pred_any += int(pm.sum())
        gt_any += int(gm.sum())
        both += int((pm & gm).sum())
        overlap = pm & gm
        if overlap.any():
            pairs = g[overlap].astype(np.int64) * (1 << 32) \
                + p[overlap].astype(np.int64)
            ids, counts = np.unique(pairs, return_counts=True)
            for pair, c in zip(ids, counts):
                key = (int(pair >> 32), int(pair & 0xFFFFFFFF))
                inter[key] = inter.get(key, 0) + int(c)

    union_any = pred_any + gt_any - both
    sq = both / union_any if union_any else 1.0

    gt_sizes = _track_pixels(gt)
    pred_sizes = _track_pixels(pred)
    if gt_sizes:
        total = 0.0
        for g_id, g_size in gt_sizes.items():
            inner = 0.0
            for (gi, pi), tpa in inter.items():
                if gi != g_id:
                    continue
                iou = tpa / (g_size + pred_sizes[pi] - tpa)
                inner += tpa * iou
            total += inner / g_size
        aq = total / len(gt_sizes)
    else:
        aq = 1.0 if not pred_sizes else 0.0

    return StqReport(aq=aq, sq=sq, stq=float(np.sqrt(aq * sq)))
