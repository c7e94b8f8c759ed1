"""Detector-memory fusion: the per-frame loop that keeps segment identity.

Each frame, the rendered feature map is decoded into memory segments and
matched against the incoming detector segments by mask overlap (Hungarian
assignment on F-scores). Matched detections repaint their memory segment's
codeword at full confidence; unmatched detections claim a fresh codeword;
memory segments the detector failed to confirm keep their direction but
lose a fixed slice of confidence, and are retired once it reaches zero.
The painted map is then the optimization target for the map's per-Gaussian
features, written back with a few SGD steps through the frozen blend
weights.

Confidence lives in vector magnitude. A segment stays visible to the
decoder while its magnitude clears the decode threshold, so a missed
segment survives several misses before it stops being reported, and the
assignment table remembers it until confidence reaches zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .codebook import Codebook, decode
from .errors import CapacityError, ConfigError, DataError, NumericalError
from .raster import backward_features, render
from .scene import Frame, SegmentFrame
from .splat_map import GaussianMap, densify, initialize_from_frame

MATCH_FLOOR = 0.3
C_CONF = 0.1
N_OPT = 20
LAMBDA_MAG = 50.0
LAMBDA_DIR = 1.0
LEARNING_RATE = 0.05

_NORM_EPS = 1e-6
# Pixels rendering below this norm get no direction gradient. The cosine
# gradient scales with 1/norm^2, so dim tail pixels would dominate the
# update and oscillate; their direction is noise until the magnitude term
# has grown them.
_DIR_GRAD_EPS = 0.05
_RETIRE_EPS = 1e-9  # absorbs float drift so k decrements of 1/k reach zero


@dataclass
class MatchResult:
    """Partition of one frame's segments after Hungarian matching."""

    matched: list[tuple[int, int, float]]  # (splat id, detection id, f-score)
    unmatched_detections: list[int]
    unmatched_splat: list[int]


class AssignmentTable:
    """Ownership of codewords by the currently remembered segments.

    Maps each active segment id to its codeword index and current
    confidence magnitude in [0, 1]. Segment ids in the fused output are
    codeword indices themselves (the decoder reports codeword indices), so
    key and index coincide; the pair is stored anyway to keep the
    bookkeeping explicit. A free pool backs fresh assignments, and no two
    live entries may share a codeword.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ConfigError("assignment table needs capacity >= 1")
        self.capacity = int(capacity)
        self._entries: dict[int, tuple[int, float]] = {}
        self._free: set[int] = set(range(1, self.capacity + 1))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, segment_id: int) -> bool:
        return int(segment_id) in self._entries

    def segment_ids(self) -> list[int]:
        return sorted(self._entries)

    @property
    def free_count(self) -> int:
        return len(self._free)

    def _entry(self, segment_id: int) -> tuple[int, float]:
        try:
            return self._entries[int(segment_id)]
        except KeyError:
            raise DataError(f"segment {segment_id} is not in the assignment "
                            f"table") from None

    def codeword_index(self, segment_id: int) -> int:
        return self._entry(segment_id)[0]

    def magnitude(self, segment_id: int) -> float:
        return self._entry(segment_id)[1]

    def register(self, segment_id: int, codeword_index: int,
                 magnitude: float = 1.0) -> None:
        """Claim `codeword_index` for a new segment at the given magnitude."""
        segment_id = int(segment_id)
        codeword_index = int(codeword_index)
        if segment_id in self._entries:
            raise DataError(f"segment {segment_id} is already tracked")
        if not 1 <= codeword_index <= self.capacity:
            raise DataError(f"codeword index {codeword_index} outside "
                            f"1..{self.capacity}")
        if codeword_index not in self._free:
            raise DataError(f"codeword {codeword_index} is already owned")
        if not 0.0 <= magnitude <= 1.0:
            raise DataError("magnitude must lie in [0, 1]")
        self._free.remove(codeword_index)
        self._entries[segment_id] = (codeword_index, float(magnitude))

    def assign_fresh(self, rng: np.random.Generator) -> int:
        """Hand out an unused codeword, chosen uniformly from the pool."""
        if not self._free:
            raise CapacityError(f"codebook exhausted: all {self.capacity} "
                                f"codewords are in use")
        pool = sorted(self._free)
        index = pool[int(rng.integers(len(pool)))]
        self._free.remove(index)
        self._entries[index] = (index, 1.0)
        return index

    def refresh(self, segment_id: int) -> None:
        """Reset a re-observed segment to full confidence."""
        index, _ = self._entry(segment_id)
        self._entries[int(segment_id)] = (index, 1.0)

    def decay(self, segment_id: int, c_conf: float) -> float:
        """Drop confidence by `c_conf`; retire at zero. Returns the new
        magnitude (0.0 once retired, with the codeword back in the pool)."""
        segment_id = int(segment_id)
        index, magnitude = self._entry(segment_id)
        magnitude -= c_conf
        if magnitude <= _RETIRE_EPS:
            del self._entries[segment_id]
            self._free.add(index)
            return 0.0
        self._entries[segment_id] = (index, magnitude)
        return magnitude

    def copy(self) -> "AssignmentTable":
        dup = AssignmentTable(self.capacity)
        dup._entries = dict(self._entries)
        dup._free = set(self._free)
        return dup


def _f_score_matrix(splat: SegmentFrame, detections: SegmentFrame,
                    splat_ids: list[int],
                    det_ids: list[int]) -> np.ndarray:
    """F = 2|A∩B| / (|A|+|B|) for every (splat, detection) segment pair."""
    a = splat.id_map.astype(np.int64)
    b = detections.id_map.astype(np.int64)
    ids_a, counts_a = np.unique(a[a > 0], return_counts=True)
    ids_b, counts_b = np.unique(b[b > 0], return_counts=True)
    size_a = dict(zip(ids_a.tolist(), counts_a.tolist()))
    size_b = dict(zip(ids_b.tolist(), counts_b.tolist()))
    row = {sid: k for k, sid in enumerate(splat_ids)}
    col = {did: k for k, did in enumerate(det_ids)}
    score = np.zeros((len(splat_ids), len(det_ids)))
    both = (a > 0) & (b > 0)
    keys, counts = np.unique(a[both] * (1 << 32) + b[both],
                             return_counts=True)
    for key, overlap in zip(keys.tolist(), counts.tolist()):
        sid, did = key >> 32, key & 0xFFFFFFFF
        score[row[sid], col[did]] = 2.0 * overlap / (size_a[sid]
                                                     + size_b[did])
    return score


def match_segments(splat: SegmentFrame, detections: SegmentFrame,
                   floor: float = MATCH_FLOOR) -> MatchResult:
    """Assign memory segments to detections, maximizing the total F-score.

    Pairs whose F-score falls below `floor` are demoted to unmatched on
    both sides, so a degenerate sliver of overlap never binds two
    segments together.
    """
    if splat.id_map.shape != detections.id_map.shape:
        raise DataError("segment frames differ in size: "
                        f"{splat.id_map.shape} vs {detections.id_map.shape}")
    splat_ids = [int(i) for i in splat.ids()]
    det_ids = [int(i) for i in detections.ids()]
    if not splat_ids or not det_ids:
        return MatchResult([], det_ids, splat_ids)
    score = _f_score_matrix(splat, detections, splat_ids, det_ids)
    rows, cols = linear_sum_assignment(score, maximize=True)
    matched = []
    taken_s: set[int] = set()
    taken_d: set[int] = set()
    for r, c in zip(rows, cols):
        if score[r, c] >= floor:
            matched.append((splat_ids[r], det_ids[c], float(score[r, c])))
            taken_s.add(splat_ids[r])
            taken_d.add(det_ids[c])
    return MatchResult(matched,
                       [d for d in det_ids if d not in taken_d],
                       [s for s in splat_ids if s not in taken_s])


def fuse(match: MatchResult, detections: SegmentFrame,
         splat_segments: SegmentFrame, book: Codebook,
         table: AssignmentTable, rng: np.random.Generator,
         c_conf: float = C_CONF
         ) -> tuple[np.ndarray, AssignmentTable, SegmentFrame]:
    """Paint the fused identity-feature map and update the table in place.

    Matched detections take their memory segment's codeword at magnitude 1
    and the table entry is refreshed to full confidence. Unmatched
    detections claim a fresh codeword. Unconfirmed memory segments are
    repainted over their rendered mask with the same direction at
    magnitude reduced by `c_conf`; an entry whose magnitude reaches zero
    is retired and its codeword returns to the pool. Everything else is
    zero. Detection pixels win where layers overlap.

    Returns the painted map, the table, and its decoded segmentation,
    which is the model's prediction for the frame.
    """
    if detections.id_map.shape != splat_segments.id_map.shape:
        raise DataError("detection and splat segment frames differ in size")
    if not 0.0 < c_conf <= 1.0:
        raise ConfigError("confidence decrement must lie in (0, 1]")
    h, w = detections.id_map.shape
    fused = np.zeros((h, w, book.d_id))
    for sid in sorted(match.unmatched_splat):
        index = table.codeword_index(sid)
        magnitude = table.decay(sid, c_conf)
        if magnitude > 0.0:
            fused[splat_segments.mask(sid)] = (book.codeword(index)
                                               * magnitude)
    for sid, did, _ in match.matched:
        index = table.codeword_index(sid)
        table.refresh(sid)
        fused[detections.mask(did)] = book.codeword(index)
    for did in sorted(match.unmatched_detections):
        index = table.assign_fresh(rng)
        fused[detections.mask(did)] = book.codeword(index)
    prediction = decode(fused, book, frame_index=detections.frame_index)
    return fused, table, prediction


def update_memory(gmap: GaussianMap, pose, intrinsics, fused: np.ndarray,
                  n_opt: int = N_OPT, lambda_mag: float = LAMBDA_MAG,
                  lambda_dir: float = LAMBDA_DIR,
                  lr: float = LEARNING_RATE) -> list[float]:
    """SGD the map's features toward the fused target; return the loss trace.

    Geometry is frozen, so re-rendering each step reduces to applying the
    retained blend weights to the current features. The loss is
    lambda_mag * MSE(target norm, rendered norm) over all pixels plus
    lambda_dir * (1 - mean cosine) over pixels where the target is
    nonzero. Pixels rendering a zero feature give no gradient (the norm
    has none there); pixels rendering only a dim one keep their cosine in
    the loss but get no direction gradient until the magnitude term has
    grown them past a stability floor.

    Mutates `gmap.features` in place. The trace holds the loss before
    each of the `n_opt` steps; a non-finite loss aborts with its step
    index.
    """
    if n_opt < 0:
        raise ConfigError("step count must be >= 0")
    if lr <= 0.0:
        raise ConfigError("learning rate must be positive")
    target = np.asarray(fused, dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != gmap.d_id:
        raise DataError(f"fused map shape {target.shape} does not match "
                        f"feature dimension {gmap.d_id}")
    out = render(gmap, pose, intrinsics, retain_records=True, with_rgb=False)
    if out.shape != target.shape[:2]:
        raise DataError("fused map does not match the render size")
    records = out.records
    h, w = out.shape
    npix = h * w
    tgt_norm = np.linalg.norm(target, axis=2)
    dir_mask = tgt_norm > 0.0
    n_dir = int(dir_mask.sum())

    trace: list[float] = []
    for step in range(n_opt):
        feat = records.feature_render(gmap.features, (h, w))
        # a non-finite target must reach the loss check, not warn here
        with np.errstate(invalid="ignore", over="ignore"):
            rnorm = np.linalg.norm(feat, axis=2)
            diff = rnorm - tgt_norm
            mse = float(np.mean(diff * diff))
            ok = dir_mask & (rnorm > _NORM_EPS)
            cos = np.zeros((h, w))
            denom = rnorm * tgt_norm
            cos[ok] = np.sum(feat[ok] * target[ok], axis=1) / denom[ok]
            mean_cos = float(cos[dir_mask].mean()) if n_dir else 1.0
            loss = lambda_mag * mse + lambda_dir * (1.0 - mean_cos)
        if not np.isfinite(loss):
            raise NumericalError(f"feature loss is non-finite at step {step}")
        trace.append(loss)

        grad = np.zeros_like(feat)
        safe = rnorm > _NORM_EPS
        coef = np.zeros((h, w))
        coef[safe] = 2.0 * lambda_mag * diff[safe] / (npix * rnorm[safe])
        grad += coef[..., None] * feat
        if n_dir:
            steer = ok & (rnorm > _DIR_GRAD_EPS)
            c_self = np.zeros((h, w))
            c_tgt = np.zeros((h, w))
            c_self[steer] = cos[steer] / (rnorm[steer] ** 2)
            c_tgt[steer] = 1.0 / denom[steer]
            grad += (lambda_dir / n_dir) * (c_self[..., None] * feat
                                            - c_tgt[..., None] * target)
        gmap.features -= lr * backward_features(out, grad)
    return trace


def active_segments(segments: SegmentFrame,
                    table: AssignmentTable) -> SegmentFrame:
    """Zero out decoded ids with no live table entry.

    A retired segment's Gaussians keep rendering its old codeword for a
    while; those pixels must read as background so a detection there
    starts a fresh segment instead of faulting on a dead table key.
    """
    dead = [int(i) for i in segments.ids() if int(i) not in table]
    if not dead:
        return segments
    id_map = segments.id_map.copy()
    id_map[np.isin(segments.id_map, dead)] = 0
    return SegmentFrame(id_map, segments.frame_index)


class FusionPipeline:
    """Online loop state: the map, the table, and the run hyperparameters.

    Feed frames strictly in order through `process_frame`. The first frame
    initializes the map from its detections; every later frame runs
    render, match, fuse, densify, and the feature write-back.
    """

    def __init__(self, book: Codebook, rng: np.random.Generator,
                 c_conf: float = C_CONF, match_floor: float = MATCH_FLOOR,
                 n_opt: int = N_OPT, lambda_mag: float = LAMBDA_MAG,
                 lambda_dir: float = LAMBDA_DIR,
                 learning_rate: float = LEARNING_RATE) -> None:
        self.book = book
        self.rng = rng
        self.c_conf = c_conf
        self.match_floor = match_floor
        self.n_opt = n_opt
        self.lambda_mag = lambda_mag
        self.lambda_dir = lambda_dir
        self.learning_rate = learning_rate
        self.gmap: GaussianMap | None = None
        self.table = AssignmentTable(book.n)
        self.loss_traces: list[list[float]] = []
        self.densify_counts: list[int] = []

    def process_frame(self, frame: Frame,
                      detections: SegmentFrame) -> SegmentFrame:
        """Advance one frame; returns the fused segmentation prediction."""
        if detections.frame_index != frame.index:
            raise DataError("detections and frame disagree on the frame "
                            f"index: {detections.frame_index} vs "
                            f"{frame.index}")
        shape = frame.depth.shape
        if detections.id_map.shape != shape:
            raise DataError("detection map does not match the frame size")
        if self.gmap is None:
            rendered = None
            splat_seg = SegmentFrame(np.zeros(shape, dtype=np.int32),
                                     frame.index)
        else:
            rendered = render(self.gmap, frame.pose, frame.intrinsics,
                              with_rgb=False)
            splat_seg = active_segments(
                decode(rendered.feature, self.book, frame_index=frame.index),
                self.table)
        match = match_segments(splat_seg, detections, self.match_floor)
        fused, _, prediction = fuse(match, detections, splat_seg, self.book,
                                    self.table, self.rng, self.c_conf)
        assignment = {int(i): int(i) for i in prediction.ids()}
        if self.gmap is None:
            self.gmap = initialize_from_frame(frame, prediction, self.book,
                                              assignment)
            self.densify_counts.append(len(self.gmap))
        else:
            added = densify(self.gmap, frame, rendered, prediction,
                            self.book, assignment)
            self.densify_counts.append(added)
        trace = update_memory(self.gmap, frame.pose, frame.intrinsics, fused,
                              self.n_opt, self.lambda_mag, self.lambda_dir,
                              self.learning_rate)
        self.loss_traces.append(trace)
        return prediction


def process_frame_fastsam_splat(state: FusionPipeline, frame: Frame,
                                detections: SegmentFrame) -> SegmentFrame:
    """One step of the online loop; `state` carries the map and table."""
    return state.process_frame(frame, detections)
