"""Correction layer that keeps an external mask tracker honest.

Each frame, the tracker's predictions are compared against the rendered
memory segmentation. Disagreements fall into three categories: a memory
segment no track covers, a memory segment whose best-covering track is
the wrong one, and several tracks piling onto one memory segment. Each
finding becomes a point prompt (positive clicks inside the remembered
region, negative clicks over the offending region) sent back through a
small tracker interface, and the tracker predicts again. The corrected
masks then drive the usual memory update, with the track-id
correspondence standing in for Hungarian matching.

A scripted mock tracker replays ground truth with injected drop, relabel,
and duplicate episodes so the whole loop can be exercised hermetically.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy import ndimage

from .codebook import Codebook, decode
from .errors import ConfigError, DataError
from .fusion import (
    C_CONF,
    LAMBDA_DIR,
    LAMBDA_MAG,
    LEARNING_RATE,
    N_OPT,
    AssignmentTable,
    MatchResult,
    active_segments,
    fuse,
    update_memory,
)
from .raster import render
from .scene import Frame, SegmentFrame
from .splat_map import GaussianMap, densify, initialize_from_frame

# Overlap below this reads as "no track covers the region"; it doubles as
# the suppression gate for adding detections as new objects.
IOU_FLOOR = 0.1
NMS_IOU = 0.1
CLICK_BUDGETS = (1, 3, 5)

# Scripted duplicate episodes predict their spurious half under ids from
# this range so they can never collide with real track ids.
_SPURIOUS_BASE = 10000


class Category(str, Enum):
    """The three tracker failure modes the correction layer repairs."""

    NOT_TRACKED = "NotTracked"
    INCORRECT_TRACK = "IncorrectTrack"
    DUPLICATED_TRACK = "DuplicatedTrack"


@dataclass(frozen=True)
class Finding:
    """One inconsistency between memory and the tracker's output.

    ``track_id`` is the track the repair prompt must address: the
    segment's own track for the first two categories, the losing
    duplicate for the third. ``region`` is the evidence: the uncovered
    memory region, the wrongly assigned pixels, or the duplicate's mask.
    """

    category: Category
    memory_id: int
    track_id: int
    region: np.ndarray


@dataclass(frozen=True)
class PromptEntry:
    """Point prompt for one track: clicks are (row, col) pixel indices."""

    category: Category
    track_id: int
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]


@dataclass(frozen=True)
class PromptPlan:
    entries: list[PromptEntry]

    def __len__(self) -> int:
        return len(self.entries)


class TrackerInterface(ABC):
    """What the correction loop needs from a promptable mask tracker.

    ``predict`` must be deterministic between prompts: calling it twice
    on the same frame without an intervening ``prompt`` or ``add_object``
    returns the same segmentation. Only ``add_object`` creates tracks;
    prompts refine existing ones.
    """

    @abstractmethod
    def predict(self, frame: Frame) -> SegmentFrame:
        """Segment the frame; labels are this tracker's track ids."""

    @abstractmethod
    def prompt(self, track_id: int, positives: list[tuple[int, int]],
               negatives: list[tuple[int, int]]) -> None:
        """Refine one track with positive/negative point clicks."""

    @abstractmethod
    def add_object(self, mask: np.ndarray) -> int:
        """Start tracking the object under the mask; returns its track id."""


def _iou_matrix(a: SegmentFrame, b: SegmentFrame, a_ids: list[int],
                b_ids: list[int]) -> np.ndarray:
    """Pairwise IoU between segments of two frames, shape (|a|, |b|)."""
    out = np.zeros((len(a_ids), len(b_ids)))
    if not a_ids or not b_ids:
        return out
    amap = a.id_map.ravel()
    bmap = b.id_map.ravel()
    both = (amap > 0) & (bmap > 0)
    keys = amap[both].astype(np.int64) * np.int64(1 << 32) \
        + bmap[both].astype(np.int64)
    pairs, counts = np.unique(keys, return_counts=True)
    a_pos = {sid: i for i, sid in enumerate(a_ids)}
    b_pos = {sid: j for j, sid in enumerate(b_ids)}
    a_sizes = {sid: int(np.count_nonzero(amap == sid)) for sid in a_ids}
    b_sizes = {sid: int(np.count_nonzero(bmap == sid)) for sid in b_ids}
    for key, inter in zip(pairs, counts):
        sid = int(key >> 32)
        tid = int(key & ((1 << 32) - 1))
        union = a_sizes[sid] + b_sizes[tid] - int(inter)
        out[a_pos[sid], b_pos[tid]] = inter / union
    return out


def classify_inconsistencies(memory: SegmentFrame, tracked: SegmentFrame,
                             correspondence: dict[int, int],
                             iou_floor: float = IOU_FLOOR) -> list[Finding]:
    """Compare rendered memory against tracker output.

    ``correspondence`` maps memory segment ids to the track ids that
    should cover them. Duplicates are resolved first, track-side: when
    two or more tracks best-match the same memory segment, every track
    but the kept one (the corresponded track when it is among them,
    otherwise the lowest id, since ids are handed out in creation order)
    becomes a finding, and that memory segment is considered explained.
    Remaining memory segments with no track overlap above ``iou_floor``
    are NotTracked; those whose best-overlapping track is not their own
    are IncorrectTrack. Memory ids absent from ``correspondence`` have no
    track to prompt and are skipped. Identical inputs yield no findings.
    """
    if memory.id_map.shape != tracked.id_map.shape:
        raise DataError("memory and tracker frames differ in size")
    mem_ids = [int(i) for i in memory.ids()]
    trk_ids = [int(i) for i in tracked.ids()]
    iou = _iou_matrix(memory, tracked, mem_ids, trk_ids)

    findings: list[Finding] = []
    explained: set[int] = set()
    if mem_ids and trk_ids:
        groups: dict[int, list[int]] = {}
        for j, tid in enumerate(trk_ids):
            col = iou[:, j]
            i = int(np.argmax(col))
            if col[i] >= iou_floor:
                groups.setdefault(mem_ids[i], []).append(tid)
        for mid in sorted(groups):
            tracks = groups[mid]
            if len(tracks) < 2:
                continue
            own = correspondence.get(mid)
            kept = own if own in tracks else min(tracks)
            for loser in sorted(t for t in tracks if t != kept):
                findings.append(Finding(Category.DUPLICATED_TRACK, mid,
                                        loser, tracked.mask(loser)))
            explained.add(mid)

    for i, mid in enumerate(mem_ids):
        if mid in explained or mid not in correspondence:
            continue
        own = correspondence[mid]
        row = iou[i] if trk_ids else np.zeros(0)
        if row.size == 0 or float(row.max()) < iou_floor:
            findings.append(Finding(Category.NOT_TRACKED, mid, own,
                                    memory.mask(mid)))
            continue
        best = trk_ids[int(np.argmax(row))]
        if best != own:
            region = tracked.mask(best) & ~memory.mask(mid)
            findings.append(Finding(Category.INCORRECT_TRACK, mid, own,
                                    region))
    return findings


def _interior_points(region: np.ndarray, count: int,
                     rng: np.random.Generator, exclude: np.ndarray,
                     min_dist: float = 0.0) -> list[tuple[int, int]]:
    """Sample up to ``count`` distinct pixels, biased away from the edge.

    Candidates are restricted to the inner half of the region's distance
    profile (the padded transform counts the image border as boundary),
    then drawn without replacement with distance weighting. Clicks must
    survive a region that overshoots the true object by a pixel or two,
    so edge pixels are not merely down-weighted but excluded; ``min_dist``
    additionally drops regions too thin to click safely. A region smaller
    than the budget yields fewer points rather than failing.
    """
    mask = region & ~exclude
    coords = np.argwhere(mask)
    if coords.shape[0] == 0:
        return []
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    weights = dist[tuple(coords.T)]
    inner = weights >= max(min_dist, 0.5 * weights.max())
    coords = coords[inner]
    weights = weights[inner]
    if coords.shape[0] == 0:
        return []
    k = min(count, coords.shape[0])
    picks = rng.choice(coords.shape[0], size=k, replace=False,
                       p=weights / weights.sum())
    return [(int(y), int(x)) for y, x in coords[picks]]


def build_prompt_plan(findings: list[Finding], memory: SegmentFrame,
                      tracked: SegmentFrame, clicks_per_object: int,
                      seed: int) -> PromptPlan:
    """Turn findings into seeded point prompts.

    NotTracked gets positives inside the memory region; IncorrectTrack
    gets positives there plus negatives over the wrongly assigned pixels;
    DuplicatedTrack gets negatives over the losing track's region.
    Negative clicks keep a two-pixel margin from their region's edge, so
    evidence slivers thinner than that produce no negatives. No pixel is
    ever used as both a positive and a negative anywhere in the plan.
    """
    if clicks_per_object not in CLICK_BUDGETS:
        raise ConfigError(
            f"clicks per object must be one of {CLICK_BUDGETS}, "
            f"got {clicks_per_object}")
    if memory.id_map.shape != tracked.id_map.shape:
        raise DataError("memory and tracker frames differ in size")
    rng = np.random.default_rng(seed)
    used = np.zeros(memory.id_map.shape, dtype=bool)

    def take(region: np.ndarray,
             min_dist: float = 0.0) -> list[tuple[int, int]]:
        points = _interior_points(region, clicks_per_object, rng, used,
                                  min_dist)
        for y, x in points:
            used[y, x] = True
        return points

    entries = []
    for finding in findings:
        if finding.category is Category.NOT_TRACKED:
            positives = take(memory.mask(finding.memory_id))
            negatives: list[tuple[int, int]] = []
        elif finding.category is Category.INCORRECT_TRACK:
            positives = take(memory.mask(finding.memory_id))
            negatives = take(finding.region, min_dist=2.0)
        else:
            positives = []
            negatives = take(finding.region, min_dist=2.0)
        entries.append(PromptEntry(finding.category, finding.track_id,
                                   positives, negatives))
    return PromptPlan(entries)


@dataclass
class Episode:
    """One scripted tracker failure over an inclusive frame window."""

    kind: str
    object_id: int
    t_start: int
    t_end: int
    partner_id: int | None = None
    repaired: bool = False

    def active(self, frame_index: int) -> bool:
        return (not self.repaired
                and self.t_start <= frame_index <= self.t_end)


_EPISODE_KINDS = ("drop", "relabel", "duplicate")


def parse_error_script(text: str) -> list[Episode]:
    """Parse an error script: one episode per line.

    Format: ``kind object_id t_start t_end [partner_id]`` with ``#``
    comments and blank lines ignored. ``relabel`` requires a partner,
    the other kinds forbid one.
    """
    episodes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        if kind not in _EPISODE_KINDS:
            raise ConfigError(f"line {lineno}: unknown episode kind {kind!r}")
        want = 5 if kind == "relabel" else 4
        if len(parts) != want:
            raise ConfigError(
                f"line {lineno}: {kind} takes {want - 1} fields, "
                f"got {len(parts) - 1}")
        try:
            numbers = [int(p) for p in parts[1:]]
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: non-integer field") from exc
        object_id, t_start, t_end = numbers[:3]
        partner = numbers[3] if kind == "relabel" else None
        if t_start > t_end:
            raise ConfigError(
                f"line {lineno}: window {t_start}..{t_end} is reversed")
        if kind == "relabel" and partner == object_id:
            raise ConfigError(
                f"line {lineno}: relabel partner equals the object")
        episodes.append(Episode(kind, object_id, t_start, t_end, partner))
    return episodes


def _split_columns(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a mask at its mean column: (left-and-center, right)."""
    cols = np.nonzero(mask)[1]
    pivot = cols.mean()
    col_grid = np.arange(mask.shape[1])[None, :]
    right = mask & (col_grid > pivot)
    return mask & ~right, right


class MockTracker(TrackerInterface):
    """Replays ground truth with scripted failures.

    ``predict`` paints each registered track with its object's ground
    truth mask, then applies the active unrepaired episodes in script
    order: drop removes the object's track, relabel swaps two tracks'
    labels, duplicate splits the mask and hands the right half to a
    spurious track id (10000 plus the episode's position). A prompt whose
    positives all land in the object's ground-truth region and whose
    negatives all land outside it repairs the episode for the rest of its
    window; a positives-free prompt to a spurious track whose negatives
    land inside its half retires that duplicate. Everything else is a
    no-op, so predictions are deterministic between prompts.
    """

    def __init__(self, gt: list[SegmentFrame], script: list[Episode]):
        if not gt:
            raise DataError("mock tracker needs at least one frame")
        self._gt = gt
        known = {int(i) for f in gt for i in f.ids()}
        for ep in script:
            if ep.object_id not in known:
                raise ConfigError(
                    f"episode references unknown object {ep.object_id}")
            if ep.partner_id is not None and ep.partner_id not in known:
                raise ConfigError(
                    f"episode references unknown object {ep.partner_id}")
            if ep.t_start < 1 or ep.t_end > len(gt):
                raise ConfigError(
                    f"episode window {ep.t_start}..{ep.t_end} leaves the "
                    f"video (frames 1..{len(gt)})")
        self._episodes = [Episode(ep.kind, ep.object_id, ep.t_start,
                                  ep.t_end, ep.partner_id) for ep in script]
        self._tracks: dict[int, int] = {}
        self._next_track = 1
        self._frame_index = 1

    @property
    def episodes(self) -> list[Episode]:
        """The scripted episodes, with their current repair state."""
        return list(self._episodes)

    def _gt_frame(self, frame_index: int) -> SegmentFrame:
        if not 1 <= frame_index <= len(self._gt):
            raise DataError(f"frame {frame_index} outside the video")
        return self._gt[frame_index - 1]

    def _track_of(self, object_id: int) -> int | None:
        for tid, oid in self._tracks.items():
            if oid == object_id:
                return tid
        return None

    def _spurious_id(self, episode: Episode) -> int:
        return _SPURIOUS_BASE + self._episodes.index(episode)

    def predict(self, frame: Frame) -> SegmentFrame:
        gtf = self._gt_frame(frame.index)
        self._frame_index = frame.index
        out = np.zeros_like(gtf.id_map)
        for tid in sorted(self._tracks):
            oid = self._tracks[tid]
            if oid in gtf.ids():
                out[gtf.mask(oid)] = tid
        for ep in self._episodes:
            if not ep.active(frame.index):
                continue
            if ep.kind == "drop":
                tid = self._track_of(ep.object_id)
                if tid is not None:
                    out[out == tid] = 0
            elif ep.kind == "relabel":
                t1 = self._track_of(ep.object_id)
                t2 = self._track_of(ep.partner_id)
                if t1 is not None and t2 is not None:
                    m1 = out == t1
                    out[out == t2] = t1
                    out[m1] = t2
            else:
                tid = self._track_of(ep.object_id)
                if tid is not None and np.any(out == tid):
                    _, right = _split_columns(out == tid)
                    out[right] = self._spurious_id(ep)
        return SegmentFrame(out, frame.index)

    def prompt(self, track_id: int, positives: list[tuple[int, int]],
               negatives: list[tuple[int, int]]) -> None:
        t = self._frame_index
        gtf = self._gt_frame(t)
        for ep in self._episodes:
            if (ep.kind == "duplicate" and ep.active(t)
                    and self._spurious_id(ep) == track_id):
                tid = self._track_of(ep.object_id)
                if tid is None or positives:
                    continue
                _, right = _split_columns(gtf.mask(ep.object_id))
                if negatives and all(right[y, x] for y, x in negatives):
                    ep.repaired = True
                return
        if track_id not in self._tracks:
            raise DataError(f"unknown track {track_id}")
        oid = self._tracks[track_id]
        region = gtf.mask(oid) if oid in gtf.ids() \
            else np.zeros_like(gtf.id_map, dtype=bool)
        good = (positives and all(region[y, x] for y, x in positives)
                and all(not region[y, x] for y, x in negatives))
        if not good:
            return
        for ep in self._episodes:
            if not ep.active(t) or ep.kind == "duplicate":
                continue
            if oid in (ep.object_id, ep.partner_id):
                ep.repaired = True

    def add_object(self, mask: np.ndarray) -> int:
        gtf = self._gt_frame(self._frame_index)
        if mask.shape != gtf.id_map.shape:
            raise DataError("object mask does not match the frame size")
        best_oid = 0
        best_iou = 0.0
        for oid in gtf.ids():
            gmask = gtf.mask(int(oid))
            inter = int(np.count_nonzero(mask & gmask))
            if inter == 0:
                continue
            iou = inter / int(np.count_nonzero(mask | gmask))
            if iou > best_iou:
                best_iou = iou
                best_oid = int(oid)
        tid = self._next_track
        self._next_track += 1
        self._tracks[tid] = best_oid
        return tid


def mock_tracker(script: list[Episode],
                 gt: list[SegmentFrame]) -> MockTracker:
    """Build a scripted tracker over a ground-truth video."""
    return MockTracker(gt, script)


class ExternalTrackerAdapter(TrackerInterface):
    """Speaks the tracker interface over newline-delimited JSON records.

    The transport is any callable taking one JSON-serializable request
    dict and returning the response dict (one line out, one line back,
    in a subprocess harness). This class carries no model; it only
    enforces the message contract:

    request  {"op": "predict", "frame_index": k, "height": h, "width": w}
    response {"id_map": [[int, ...], ...]}  row-major, h rows of w labels

    request  {"op": "prompt", "track_id": t,
              "positives": [[row, col], ...], "negatives": [[row, col], ...]}
    response {"ok": true}

    request  {"op": "add_object", "height": h, "width": w,
              "pixels": [[row, col], ...]}  the mask's set pixels
    response {"track_id": t}
    """

    def __init__(self, transport: Callable[[dict], dict]):
        if not callable(transport):
            raise ConfigError("external tracker needs a callable transport")
        self._transport = transport

    def _call(self, request: dict) -> dict:
        response = self._transport(request)
        if not isinstance(response, dict):
            raise DataError(
                f"tracker returned {type(response).__name__}, not a record")
        return response

    def predict(self, frame: Frame) -> SegmentFrame:
        h, w = frame.depth.shape
        response = self._call({"op": "predict", "frame_index": frame.index,
                               "height": h, "width": w})
        id_map = np.asarray(response.get("id_map"), dtype=np.int32)
        if id_map.shape != (h, w):
            raise DataError("tracker id map does not match the frame size")
        return SegmentFrame(id_map, frame.index)

    def prompt(self, track_id: int, positives: list[tuple[int, int]],
               negatives: list[tuple[int, int]]) -> None:
        response = self._call({
            "op": "prompt", "track_id": int(track_id),
            "positives": [[int(y), int(x)] for y, x in positives],
            "negatives": [[int(y), int(x)] for y, x in negatives]})
        if response.get("ok") is not True:
            raise DataError(f"tracker rejected prompt for track {track_id}")

    def add_object(self, mask: np.ndarray) -> int:
        pixels = [[int(y), int(x)] for y, x in np.argwhere(mask)]
        response = self._call({"op": "add_object", "height": mask.shape[0],
                               "width": mask.shape[1], "pixels": pixels})
        return int(response["track_id"])


class RepromptPipeline:
    """Tracker-in-the-loop variant of the online fusion loop.

    The tracker owns the per-frame segmentation; memory renders are used
    to audit it. One correction round per frame: predict, classify,
    prompt, predict again. Detections only seed the tracker (all of them
    on the first frame, later ones only when they overlap no current
    track above the suppression gate). The corrected output then updates
    memory through the usual fusion path, with the track-to-memory
    correspondence supplying the match.
    """

    def __init__(self, book: Codebook, rng: np.random.Generator,
                 clicks_per_object: int = 3,
                 iou_floor: float = IOU_FLOOR,
                 nms_iou: float = NMS_IOU,
                 enabled_categories: set[Category] | None = None,
                 c_conf: float = C_CONF,
                 n_opt: int = N_OPT,
                 lambda_mag: float = LAMBDA_MAG,
                 lambda_dir: float = LAMBDA_DIR,
                 learning_rate: float = LEARNING_RATE):
        if clicks_per_object not in CLICK_BUDGETS:
            raise ConfigError(
                f"clicks per object must be one of {CLICK_BUDGETS}, "
                f"got {clicks_per_object}")
        self.book = book
        self.rng = rng
        self.clicks_per_object = clicks_per_object
        self.iou_floor = iou_floor
        self.nms_iou = nms_iou
        self.enabled_categories = (set(Category)
                                   if enabled_categories is None
                                   else set(enabled_categories))
        self.c_conf = c_conf
        self.n_opt = n_opt
        self.lambda_mag = lambda_mag
        self.lambda_dir = lambda_dir
        self.learning_rate = learning_rate
        self.gmap: GaussianMap | None = None
        self.table = AssignmentTable(book.n)
        self.mem_to_track: dict[int, int] = {}
        self.track_to_mem: dict[int, int] = {}
        self.loss_traces: list[list[float]] = []
        self.densify_counts: list[int] = []
        self.findings_log: list[list[Finding]] = []
        self.plans_log: list[PromptPlan] = []

    def _guard(self, frame_index: int, op: Callable):
        try:
            return op()
        except Exception as exc:
            raise DataError(
                f"tracker failed at frame {frame_index}: {exc}") from exc

    def _correspondence_match(self, corrected: SegmentFrame,
                              memory_seg: SegmentFrame) -> MatchResult:
        """Stand in for Hungarian matching using the track-id binding."""
        matched = []
        unmatched_tracks = []
        track_ids = [int(t) for t in corrected.ids()]
        for tid in track_ids:
            mid = self.track_to_mem.get(tid)
            if mid is not None and mid in self.table:
                matched.append((mid, tid, 1.0))
            else:
                unmatched_tracks.append(tid)
        present = set(track_ids)
        unmatched_mem = [int(m) for m in memory_seg.ids()
                         if self.mem_to_track.get(int(m)) not in present]
        return MatchResult(matched, unmatched_tracks, unmatched_mem)

    def _bind_new_tracks(self, corrected: SegmentFrame,
                         prediction: SegmentFrame) -> None:
        for tid in (int(t) for t in corrected.ids()):
            if tid in self.track_to_mem \
                    and self.track_to_mem[tid] in self.table:
                continue
            labels = prediction.id_map[corrected.mask(tid)]
            labels = labels[labels > 0]
            if labels.size == 0:
                continue
            mid = int(labels[0])
            self.track_to_mem[tid] = mid
            self.mem_to_track[mid] = tid
        dead = [mid for mid in self.mem_to_track if mid not in self.table]
        for mid in dead:
            tid = self.mem_to_track.pop(mid)
            if self.track_to_mem.get(tid) == mid:
                del self.track_to_mem[tid]

    def process_frame(self, frame: Frame,
                      detections: SegmentFrame | None,
                      tracker: TrackerInterface) -> SegmentFrame:
        """Advance one frame; returns the tracker's corrected prediction."""
        if detections is not None:
            if detections.frame_index != frame.index:
                raise DataError("detection frame index does not match")
            if detections.id_map.shape != frame.depth.shape:
                raise DataError("detection map does not match the frame size")

        if self.gmap is None:
            if detections is not None:
                for did in (int(d) for d in detections.ids()):
                    mask = detections.mask(did)
                    self._guard(frame.index,
                                lambda m=mask: tracker.add_object(m))
            corrected = self._guard(frame.index,
                                    lambda: tracker.predict(frame))
            memory_seg = SegmentFrame(
                np.zeros(frame.depth.shape, dtype=np.int32), frame.index)
            self.findings_log.append([])
            self.plans_log.append(PromptPlan([]))
        else:
            tracked = self._guard(frame.index,
                                  lambda: tracker.predict(frame))
            rendered = render(self.gmap, frame.pose, frame.intrinsics,
                              with_rgb=False)
            memory_seg = active_segments(
                decode(rendered.feature, self.book, frame_index=frame.index),
                self.table)
            findings = classify_inconsistencies(
                memory_seg, tracked, self.mem_to_track, self.iou_floor)
            acted = [f for f in findings
                     if f.category in self.enabled_categories]
            plan = build_prompt_plan(acted, memory_seg, tracked,
                                     self.clicks_per_object,
                                     seed=int(self.rng.integers(2 ** 63)))
            for entry in plan.entries:
                self._guard(frame.index,
                            lambda e=entry: tracker.prompt(
                                e.track_id, e.positives, e.negatives))
            corrected = self._guard(frame.index,
                                    lambda: tracker.predict(frame))
            self.findings_log.append(findings)
            self.plans_log.append(plan)

            if detections is not None:
                added = False
                for did in (int(d) for d in detections.ids()):
                    dmask = detections.mask(did)
                    novel = True
                    for tid in (int(t) for t in corrected.ids()):
                        tmask = corrected.mask(tid)
                        inter = int(np.count_nonzero(dmask & tmask))
                        if inter == 0:
                            continue
                        union = int(np.count_nonzero(dmask | tmask))
                        if inter / union > self.nms_iou:
                            novel = False
                            break
                    if novel:
                        self._guard(frame.index,
                                    lambda m=dmask: tracker.add_object(m))
                        added = True
                if added:
                    corrected = self._guard(frame.index,
                                            lambda: tracker.predict(frame))

        match = self._correspondence_match(corrected, memory_seg)
        fused, _, prediction = fuse(match, corrected, memory_seg, self.book,
                                    self.table, self.rng, self.c_conf)
        self._bind_new_tracks(corrected, prediction)
        assignment = {int(i): int(i) for i in prediction.ids()}
        if self.gmap is None:
            self.gmap = initialize_from_frame(frame, prediction, self.book,
                                              assignment)
            self.densify_counts.append(len(self.gmap))
            self.loss_traces.append([])
        else:
            self.densify_counts.append(
                densify(self.gmap, frame, rendered, prediction, self.book,
                        assignment))
            self.loss_traces.append(
                update_memory(self.gmap, frame.pose, frame.intrinsics, fused,
                              n_opt=self.n_opt, lambda_mag=self.lambda_mag,
                              lambda_dir=self.lambda_dir,
                              lr=self.learning_rate))
        return corrected


def process_frame_sam2_splat(state: RepromptPipeline, frame: Frame,
                             detections: SegmentFrame | None,
                             tracker: TrackerInterface) -> SegmentFrame:
    """One step of the tracker-corrected loop; see ``RepromptPipeline``."""
    return state.process_frame(frame, detections, tracker)
