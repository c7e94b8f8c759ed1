"""End-to-end drivers: runs, evaluation reports, and the ablation harness.

A run reads a dataset directory, drives one of the three pipeline modes
over its frames, and writes per-frame 16-bit ID PNGs plus a JSON
manifest. The manifest holds everything needed to reproduce the run
(validated config, its hash, derived seeds, library versions) and the
run's deterministic measurements (loss traces, growth, parameter
counts). Wall-clock timings go to a separate file so two identical runs
produce byte-identical manifests.
"""

from __future__ import annotations

import json
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .codebook import (Codebook, generate_codebook, integer_codebook,
                       load_codebook)
from .config import (RunConfig, config_hash, derived_seed, make_run_config,
                     named_rng, parse_categories)
from .dataset import load_dataset, load_id_maps, save_id_maps
from .errors import ConfigError, DataError, SplatMemError
from .fusion import FusionPipeline
from .metrics import stq, vsq
from .reprompt import (Category, RepromptPipeline, mock_tracker,
                       parse_error_script)
from .scene import Frame, SegmentFrame, tubes_from_id_maps
from .splat_map import FIELDS_PER_GAUSSIAN
from .synth import render_scene, scene_from_config

_KIND_CATEGORY = {"drop": Category.NOT_TRACKED,
                  "relabel": Category.INCORRECT_TRACK,
                  "duplicate": Category.DUPLICATED_TRACK}


@dataclass
class RunResult:
    manifest: dict
    manifest_path: Path
    predictions: list[SegmentFrame]


@contextmanager
def _stage(name: str, frame_index: int | None = None):
    """Re-raise module errors with the failing stage and frame attached."""
    try:
        yield
    except SplatMemError as exc:
        where = f" at frame {frame_index}" if frame_index is not None else ""
        raise type(exc)(f"stage {name}{where}: {exc}") from exc


def _check_references(config: RunConfig) -> None:
    if config.dataset is None:
        raise ConfigError("config needs a dataset directory")
    if config.out is None:
        raise ConfigError("config needs an output directory")
    if not Path(config.dataset).is_dir():
        raise ConfigError(f"dataset directory {config.dataset} "
                          "does not exist")
    for name in ("det", "codebook", "script"):
        value = getattr(config, name)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{name} path {value} does not exist")


def build_codebook(config: RunConfig) -> Codebook:
    """The run's codebook: loaded, integer-mode, or generated."""
    if config.codebook is not None:
        return load_codebook(Path(config.codebook))
    if config.integer_mode:
        return integer_codebook(config.codebook_n)
    seed = config.codebook_seed
    if seed is None:
        seed = derived_seed(config.seed, "codebook")
    return generate_codebook(config.codebook_n, config.codebook_d, seed)


def _run_passthrough(detections: list[SegmentFrame], timings: list[float]):
    predictions = []
    for det in detections:
        start = time.perf_counter()
        predictions.append(SegmentFrame(det.id_map.copy(), det.frame_index))
        timings.append(time.perf_counter() - start)
    return predictions, {}


def _run_fastsam(config: RunConfig, book: Codebook, frames: list[Frame],
                 detections: list[SegmentFrame], timings: list[float]):
    pipe = FusionPipeline(book, named_rng(config.seed, "fusion"),
                          c_conf=config.c_conf,
                          match_floor=config.match_floor,
                          n_opt=config.n_opt,
                          lambda_mag=config.lambda_mag,
                          lambda_dir=config.lambda_dir,
                          learning_rate=config.learning_rate)
    predictions = []
    for frame, det in zip(frames, detections):
        start = time.perf_counter()
        with _stage("fuse", frame.index):
            predictions.append(pipe.process_frame(frame, det))
        timings.append(time.perf_counter() - start)
    stats = {
        "gaussians": len(pipe.gmap) if pipe.gmap is not None else 0,
        "loss_traces": pipe.loss_traces,
        "densify_counts": pipe.densify_counts,
    }
    return predictions, stats, pipe.gmap


def _findings_by_category(findings_log) -> dict[str, int]:
    counts = {c.value: 0 for c in Category}
    for findings in findings_log:
        for f in findings:
            counts[f.category.value] += 1
    return counts


def _episode_counts(episodes) -> dict[str, dict[str, int]]:
    out = {c.value: {"total": 0, "repaired": 0} for c in Category}
    for ep in episodes:
        row = out[_KIND_CATEGORY[ep.kind].value]
        row["total"] += 1
        row["repaired"] += int(ep.repaired)
    return out


def _run_sam2(config: RunConfig, book: Codebook, frames: list[Frame],
              gt: list[SegmentFrame], detections: list[SegmentFrame],
              timings: list[float]):
    script = []
    if config.script is not None:
        script = parse_error_script(Path(config.script).read_text())
    tracker = mock_tracker(script, gt)
    pipe = RepromptPipeline(
        book, named_rng(config.seed, "reprompt"),
        clicks_per_object=config.clicks_per_object,
        iou_floor=config.reprompt_iou_floor,
        nms_iou=config.nms_iou,
        enabled_categories=parse_categories(config.reprompt_categories),
        c_conf=config.c_conf, n_opt=config.n_opt,
        lambda_mag=config.lambda_mag, lambda_dir=config.lambda_dir,
        learning_rate=config.learning_rate)
    predictions = []
    for frame, det in zip(frames, detections):
        start = time.perf_counter()
        with _stage("reprompt", frame.index):
            predictions.append(pipe.process_frame(frame, det, tracker))
        timings.append(time.perf_counter() - start)
    stats = {
        "gaussians": len(pipe.gmap) if pipe.gmap is not None else 0,
        "loss_traces": pipe.loss_traces,
        "densify_counts": pipe.densify_counts,
        "findings": _findings_by_category(pipe.findings_log),
        "episodes": _episode_counts(tracker.episodes),
    }
    return predictions, stats, pipe.gmap


def run_pipeline(config: RunConfig) -> RunResult:
    """Execute one run and write predictions, manifest, and timings."""
    _check_references(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("load-dataset"):
        ds = load_dataset(Path(config.dataset))
        detections = ds.det
        if config.det is not None:
            detections = load_id_maps(Path(config.det))
        if detections is None:
            detections = ds.gt
        if detections is None:
            raise DataError("dataset has neither det/ nor gt/ id maps")
        if len(detections) != len(ds.frames):
            raise DataError(
                f"{len(detections)} detection frames for "
                f"{len(ds.frames)} video frames")

    with _stage("codebook"):
        book = build_codebook(config)

    timings: list[float] = []
    gmap = None
    if config.mode == "passthrough-detector":
        predictions, stats = _run_passthrough(detections, timings)
    elif config.mode == "fastsam-splat":
        predictions, stats, gmap = _run_fastsam(config, book, ds.frames,
                                                detections, timings)
    else:
        if ds.gt is None:
            raise DataError("sam2-splat with the mock tracker needs gt/")
        predictions, stats, gmap = _run_sam2(config, book, ds.frames, ds.gt,
                                             detections, timings)

    with _stage("write-predictions"):
        save_id_maps(out_dir / "pred", predictions)
        if config.save_map and gmap is not None:
            gmap.save(out_dir / "map.smgm")

    gaussians = stats.get("gaussians", 0)
    manifest = {
        "format": "splatmem-run-manifest",
        "version": 1,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seeds": {
            "root": config.seed,
            "codebook": (config.codebook_seed
                         if config.codebook_seed is not None
                         else derived_seed(config.seed, "codebook")),
            "fusion": derived_seed(config.seed, "fusion"),
            "reprompt": derived_seed(config.seed, "reprompt"),
        },
        "versions": {
            "splatmem": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "frames": len(ds.frames),
        "predictions": [f"pred/{p.frame_index:06d}.png"
                        for p in predictions],
        "codebook": {"n": book.n, "d_id": book.d_id,
                     "integer_mode": book.integer_mode},
        "gaussians": gaussians,
        "parameters": {
            "geometry": gaussians * FIELDS_PER_GAUSSIAN,
            "features": gaussians * book.d_id,
            "total": gaussians * (FIELDS_PER_GAUSSIAN + book.d_id),
        },
        "loss_traces": stats.get("loss_traces", []),
        "densify_counts": stats.get("densify_counts", []),
    }
    for key in ("findings", "episodes"):
        if key in stats:
            manifest[key] = stats[key]

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n")
    (out_dir / "timings.json").write_text(json.dumps({
        "per_frame_s": timings, "total_s": sum(timings)}, indent=2) + "\n")
    return RunResult(manifest, manifest_path, predictions)


def evaluate_directories(pred_dir: str | Path, gt_dir: str | Path,
                         k_set: tuple[int, ...] = (1, 5, 10, 15),
                         stride: int = 15, tp_gate: float = 0.5) -> dict:
    """Score a prediction directory against ground truth id maps."""
    pred = load_id_maps(Path(pred_dir))
    gt = load_id_maps(Path(gt_dir))
    if len(pred) != len(gt):
        raise DataError(f"{len(pred)} prediction frames for "
                        f"{len(gt)} ground-truth frames")
    num_frames = len(gt)
    vsq_report = vsq(tubes_from_id_maps(pred), tubes_from_id_maps(gt),
                     k_set=tuple(k_set), stride=stride, iou_floor=tp_gate,
                     num_frames=num_frames)
    stq_report = stq([p.id_map for p in pred], [g.id_map for g in gt])
    return {
        "format": "splatmem-eval-report",
        "version": 1,
        "frames": num_frames,
        "vsq": {"per_k": {str(k): v for k, v in vsq_report.per_k.items()},
                "mean": vsq_report.vsq},
        "stq": {"aq": stq_report.aq, "sq": stq_report.sq,
                "stq": stq_report.stq},
    }


def format_eval_text(report: dict) -> str:
    lines = [f"frames: {report['frames']}"]
    for k, score in sorted(report["vsq"]["per_k"].items(),
                           key=lambda kv: int(kv[0])):
        lines.append(f"VSQ^{k}: {score:.4f}")
    lines.append(f"VSQ: {report['vsq']['mean']:.4f}")
    s = report["stq"]
    lines.append(f"AQ: {s['aq']:.4f}  SQ: {s['sq']:.4f}  STQ: {s['stq']:.4f}")
    return "\n".join(lines)


_SIM_SCENE = {
    "width": 96, "height": 72, "fx": 80.0, "fy": 80.0,
    "room": {"lo": [-4.0, -4.0, -1.0], "hi": [4.0, 4.0, 3.0],
             "color": [0.72, 0.72, 0.72], "checker": False},
    "objects": [
        {"shape": "sphere", "id": 1, "center": [2.0, -0.75, 1.0],
         "radius": 0.4},
        {"shape": "box", "id": 2, "lo": [1.8, 0.45, 0.7],
         "hi": [2.4, 1.05, 1.3]},
        {"shape": "box", "id": 3, "lo": [1.8, -0.25, 1.45],
         "hi": [2.3, 0.3, 1.85]},
        {"shape": "sphere", "id": 4, "center": [2.1, -0.1, 0.35],
         "radius": 0.3},
    ],
    "trajectory": {"kind": "static", "eye": [0.0, 0.0, 1.0],
                   "look_at": [2.0, 0.0, 1.0]},
}


def simulate_reprompt(script_text: str, clicks_per_object: int = 3,
                      seed: int = 0, categories: str = "all",
                      scene_config: dict | None = None,
                      frames: int | None = None,
                      n_opt: int = 3) -> dict:
    """Run the correction loop against the scripted mock tracker.

    Builds a small synthetic scene (four separated objects, static
    camera, unless ``scene_config`` overrides it), injects the scripted
    episodes, and reports per-category episode totals, repairs, finding
    counts, and the largest click counts any prompt used.
    """
    episodes = parse_error_script(script_text)
    if frames is None:
        frames = max([ep.t_end for ep in episodes], default=1) + 1
    frames = max(frames, 2)
    cfg = dict(scene_config if scene_config is not None else _SIM_SCENE)
    cfg["frames"] = frames
    video, gt = render_scene(scene_from_config(cfg, seed=seed))
    tracker = mock_tracker(episodes, gt)
    book = generate_codebook(max(64, 4 * len(gt[0].ids())), 8,
                             derived_seed(seed, "codebook"))
    pipe = RepromptPipeline(book, named_rng(seed, "reprompt"),
                            clicks_per_object=clicks_per_object,
                            enabled_categories=parse_categories(categories),
                            n_opt=n_opt)
    for i, frame in enumerate(video):
        with _stage("reprompt", frame.index):
            pipe.process_frame(frame, gt[i] if i == 0 else None, tracker)

    max_positives = 0
    max_negatives = 0
    plans = []
    for plan in pipe.plans_log:
        rows = []
        for entry in plan.entries:
            max_positives = max(max_positives, len(entry.positives))
            max_negatives = max(max_negatives, len(entry.negatives))
            rows.append({"category": entry.category.value,
                         "track": entry.track_id,
                         "positives": len(entry.positives),
                         "negatives": len(entry.negatives)})
        plans.append(rows)
    return {
        "format": "splatmem-reprompt-sim",
        "version": 1,
        "frames": frames,
        "clicks_per_object": clicks_per_object,
        "categories": categories,
        "episodes": _episode_counts(tracker.episodes),
        "findings": _findings_by_category(pipe.findings_log),
        "plans": plans,
        "max_positives": max_positives,
        "max_negatives": max_negatives,
    }


ABLATION_AXES = ("d_id", "reprompt-category", "clicks")


def _config_for_axis(base: RunConfig, axis: str, value, out_dir: Path):
    values = base.to_dict()
    values["out"] = str(out_dir)
    if axis == "d_id":
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"d_id axis values must be integers >= 1, "
                              f"got {value!r}")
        values.update(codebook_d=value, integer_mode=value == 1,
                      codebook=None)
    elif axis == "reprompt-category":
        if base.mode != "sam2-splat":
            raise ConfigError(
                "the reprompt-category axis needs mode sam2-splat")
        values["reprompt_categories"] = str(value)
    elif axis == "clicks":
        values["clicks_per_object"] = value
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"pick from {ABLATION_AXES}")
    return make_run_config(values)


def _format_ablation(table: dict) -> str:
    header = f"{'value':>24} {'VSQ':>8} {'STQ':>8} {'AQ':>8} {'SQ':>8}"
    has_rate = any("correction_rate" in r for r in table["rows"])
    if has_rate:
        header += f" {'corrected':>10}"
    lines = [f"axis: {table['axis']}", header]
    for row in table["rows"]:
        line = (f"{row['value']:>24} {row['vsq']:>8.4f} {row['stq']:>8.4f} "
                f"{row['aq']:>8.4f} {row['sq']:>8.4f}")
        if has_rate:
            rate = row.get("correction_rate")
            line += f" {rate:>10.4f}" if rate is not None else " " * 11
        lines.append(line)
    return "\n".join(lines)


def ablate(axis: str, values: list, base: RunConfig) -> tuple[dict, str]:
    """One run per value, shared root seed, scored against dataset gt.

    Writes each run under ``<out_dir>/<axis>/<value>/`` plus
    ``ablation.json`` and ``ablation.txt`` at the top level, and returns
    the table with its text rendering.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"pick from {ABLATION_AXES}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    if base.out is None:
        raise ConfigError("config needs an output directory")
    out_root = Path(base.out)
    gt_dir = Path(base.dataset or "") / "gt"
    if not gt_dir.is_dir():
        raise ConfigError(f"ablation needs ground truth at {gt_dir}")

    rows = []
    for value in values:
        slug = str(value).replace("/", "_")
        cfg = _config_for_axis(base, axis, value, out_root / axis / slug)
        result = run_pipeline(cfg)
        report = evaluate_directories(Path(cfg.out) / "pred", gt_dir,
                                      k_set=cfg.k_set, stride=cfg.stride,
                                      tp_gate=cfg.tp_gate)
        row = {
            "value": str(value),
            "vsq": report["vsq"]["mean"],
            "stq": report["stq"]["stq"],
            "aq": report["stq"]["aq"],
            "sq": report["stq"]["sq"],
            "run": str(Path(cfg.out).relative_to(out_root)),
        }
        episodes = result.manifest.get("episodes")
        if episodes:
            total = sum(r["total"] for r in episodes.values())
            repaired = sum(r["repaired"] for r in episodes.values())
            row["correction_rate"] = repaired / total if total else 1.0
        rows.append(row)

    table = {"format": "splatmem-ablation", "version": 1,
             "axis": axis, "rows": rows}
    text = _format_ablation(table)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n")
    (out_root / "ablation.txt").write_text(text + "\n")
    return table, text
