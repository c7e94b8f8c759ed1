"""The ``splatmem`` command: subcommands for every pipeline stage.

Exit codes: 0 success, 2 config error (bad flags, bad config file),
3 data error (missing or malformed inputs, capacity overflow),
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .codebook import (generate_codebook, integer_codebook, load_codebook,
                       min_pairwise_distance, save_codebook)
from .config import (SCHEMA, load_config_file, make_run_config)
from .dataset import (read_intrinsics, read_pose, write_depth, write_gray16,
                      write_id_map, write_rgb8)
from .errors import ConfigError, NumericalError, SplatMemError
from .pipeline import (ABLATION_AXES, ablate, evaluate_directories,
                       format_eval_text, run_pipeline, simulate_reprompt)
from .raster import render, render_id_map
from .splat_map import GaussianMap
from .synth import PRESETS, generate_scene

# config keys grouped by flag value type; everything else parses as str
_INT_KEYS = frozenset({"seed", "codebook_n", "codebook_d", "codebook_seed",
                       "n_opt", "clicks_per_object", "stride"})
_FLOAT_KEYS = frozenset({"c_conf", "lambda_mag", "lambda_dir",
                         "learning_rate", "match_floor",
                         "reprompt_iou_floor", "nms_iou", "tp_gate"})
_BOOL_KEYS = frozenset({"integer_mode", "save_map"})


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per config key; unset flags leave the config value alone."""
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="JSON config file; flags override its values")
    for field in SCHEMA:
        flag = "--" + field.name.replace("_", "-")
        if field.name in _BOOL_KEYS:
            parser.add_argument(flag, dest=field.name, default=None,
                                action=argparse.BooleanOptionalAction,
                                help=field.help)
        elif field.name in _INT_KEYS:
            parser.add_argument(flag, dest=field.name, default=None,
                                type=int, help=field.help)
        elif field.name in _FLOAT_KEYS:
            parser.add_argument(flag, dest=field.name, default=None,
                                type=float, help=field.help)
        else:
            parser.add_argument(flag, dest=field.name, default=None,
                                help=field.help)


def _config_from_args(args: argparse.Namespace):
    values = {}
    if args.config is not None:
        values.update(load_config_file(Path(args.config)))
    for field in SCHEMA:
        flag_value = getattr(args, field.name)
        if flag_value is not None:
            values[field.name] = flag_value
    return make_run_config(values)


def _cmd_codebook_gen(args: argparse.Namespace) -> int:
    if args.integer:
        if args.dim != 1:
            raise ConfigError("--integer requires --dim 1")
        book = integer_codebook(args.n)
    else:
        book = generate_codebook(args.n, args.dim, args.seed,
                                 steps=args.steps, learning_rate=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(out, book)
    print(f"codebook: n={book.n} dim={book.d_id} "
          f"min-distance={min_pairwise_distance(book.vectors):.6f}")
    print(f"wrote {out}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.config is None and args.preset is None:
        raise ConfigError("synth needs --config or --preset")
    cfg: dict = {}
    if args.config is not None:
        cfg = load_config_file(Path(args.config))
    if args.preset is not None:
        cfg["preset"] = args.preset
    out = generate_scene(cfg, args.seed, Path(args.out))
    n_frames = len(list((out / "rgb").glob("*.png")))
    print(f"wrote {n_frames} frames to {out}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = run_pipeline(config)
    m = result.manifest
    print(f"mode={m['config']['mode']} frames={m['frames']} "
          f"gaussians={m['gaussians']} "
          f"parameters={m['parameters']['total']}")
    print(f"wrote {result.manifest_path}")
    return 0


def _cmd_reprompt_sim(args: argparse.Namespace) -> int:
    script_text = Path(args.script).read_text()
    report = simulate_reprompt(script_text,
                               clicks_per_object=args.clicks,
                               seed=args.seed,
                               categories=args.categories,
                               frames=args.frames)
    for name, row in sorted(report["episodes"].items()):
        found = report["findings"][name]
        print(f"{name}: scripted={row['total']} detected={found} "
              f"corrected={row['repaired']}")
    print(f"max clicks used: positives={report['max_positives']} "
          f"negatives={report['max_negatives']}")
    if args.json is not None:
        path = Path(args.json)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    wanted = tuple(m.strip() for m in args.metric.split(",") if m.strip())
    unknown = set(wanted) - {"vsq", "stq"}
    if unknown or not wanted:
        raise ConfigError(f"--metric takes vsq, stq, or both; "
                          f"got {args.metric!r}")
    k_set = tuple(int(k) for k in args.k_set.split(",") if k.strip())
    report = evaluate_directories(args.pred, args.gt, k_set=k_set,
                                  stride=args.stride, tp_gate=args.tp_gate)
    for key in ("vsq", "stq"):
        if key not in wanted:
            del report[key]
    text = format_eval_text(report) if len(wanted) == 2 else None
    if text is None:
        lines = [f"frames: {report['frames']}"]
        if "vsq" in report:
            for k, score in sorted(report["vsq"]["per_k"].items(),
                                   key=lambda kv: int(kv[0])):
                lines.append(f"VSQ^{k}: {score:.4f}")
            lines.append(f"VSQ: {report['vsq']['mean']:.4f}")
        if "stq" in report:
            s = report["stq"]
            lines.append(f"AQ: {s['aq']:.4f}  SQ: {s['sq']:.4f}  "
                         f"STQ: {s['stq']:.4f}")
        text = "\n".join(lines)
    print(text)
    if args.json is not None:
        path = Path(args.json)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    gmap = GaussianMap.load(Path(args.map))
    pose = read_pose(Path(args.pose))
    intrinsics = read_intrinsics(Path(args.intrinsics))
    book = load_codebook(Path(args.codebook))
    if book.d_id != gmap.d_id:
        raise ConfigError(f"codebook dimension {book.d_id} does not match "
                          f"the map's {gmap.d_id}")
    output = render(gmap, pose, intrinsics)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)

    def dest(name: str) -> Path:
        return prefix.parent / (prefix.name + name)

    write_rgb8(dest("rgb.png"), np.clip(output.rgb, 0.0, 1.0))
    write_depth(dest("depth.png"), output.depth)
    write_id_map(dest("ids.png"),
                 render_id_map(output, book, threshold=args.threshold))
    sil = np.round(np.clip(output.silhouette, 0.0, 1.0) * 65535.0)
    write_gray16(dest("silhouette.png"), sil)
    for name in ("rgb.png", "depth.png", "ids.png", "silhouette.png"):
        print(f"wrote {dest(name)}")
    return 0


def _parse_axis_values(axis: str, text: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--values must list at least one value")
    if axis in ("d_id", "clicks"):
        try:
            return [int(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"{axis} values must be integers: "
                              f"{text!r}") from exc
    return parts


def _cmd_ablate(args: argparse.Namespace) -> int:
    base = _config_from_args(args)
    values = _parse_axis_values(args.axis, args.values)
    _, text = ablate(args.axis, values, base)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatmem",
        description="Gaussian-splat segment memory pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codebook-gen",
                       help="optimize and save an identity codebook")
    p.add_argument("--n", type=int, required=True,
                   help="number of codewords")
    p.add_argument("--dim", type=int, required=True,
                   help="codeword dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000,
                   help="repulsion optimization steps")
    p.add_argument("--lr", type=float, default=0.1,
                   help="repulsion step size")
    p.add_argument("--out", required=True, help="output codebook file")
    p.add_argument("--integer", action="store_true",
                   help="scalar codewords 1..n (requires --dim 1)")
    p.set_defaults(func=_cmd_codebook_gen)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--config", default=None, metavar="FILE",
                   help="scene description file (JSON)")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS),
                   help="named base scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="run a pipeline over a dataset")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("reprompt-sim",
                       help="drive the correction loop on a scripted tracker")
    p.add_argument("--script", required=True,
                   help="error script file (kind id t_start t_end [partner])")
    p.add_argument("--clicks", type=int, default=3,
                   help="points per re-prompt (1, 3, or 5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", default="all",
                   help="'all', 'none', or '+'-joined category names")
    p.add_argument("--frames", type=int, default=None,
                   help="video length (default: covers every episode)")
    p.add_argument("--json", default=None, metavar="OUT",
                   help="also write the report as JSON")
    p.set_defaults(func=_cmd_reprompt_sim)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction id-map dir")
    p.add_argument("--gt", required=True, help="ground-truth id-map dir")
    p.add_argument("--metric", default="vsq,stq",
                   help="comma list: vsq, stq")
    p.add_argument("--json", default=None, metavar="OUT",
                   help="also write the report as JSON")
    p.add_argument("--k-set", default="1,5,10,15",
                   help="VSQ window lengths")
    p.add_argument("--stride", type=int, default=15,
                   help="VSQ window stride")
    p.add_argument("--tp-gate", type=float, default=0.5,
                   help="tube IoU needed for a true positive")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render",
                       help="rasterize a saved map from a given pose")
    p.add_argument("--map", required=True, help="map checkpoint file")
    p.add_argument("--pose", required=True, help="camera-to-world pose file")
    p.add_argument("--intrinsics", required=True,
                   help="intrinsics file (fx fy cx cy width height)")
    p.add_argument("--codebook", required=True,
                   help="codebook for decoding the id image")
    p.add_argument("--out-prefix", required=True,
                   help="output path prefix for the four images")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="silhouette threshold for decoding ids")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("ablate", help="sweep one axis and tabulate scores")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True,
                   help="comma list of axis values")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except SplatMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
