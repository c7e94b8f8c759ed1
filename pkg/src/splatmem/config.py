"""Run configuration: one flat, schema-checked mapping.

A run is described by a single JSON object whose keys mirror the CLI
flags one to one. Validation is pure (no filesystem access); path
existence is checked by the pipeline right before use. All randomness
in a run flows from the single ``seed`` value, split into independent
per-module streams by name, so two runs differing in one parameter
share every stream that parameter does not touch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError
from .reprompt import CLICK_BUDGETS, Category

MODES = ("fastsam-splat", "sam2-splat", "passthrough-detector")
TRACKERS = ("mock",)


def stream_words(stream: str) -> list[int]:
    """Stable 4-word digest of a stream name for seed derivation."""
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def named_rng(root_seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named stream under one root seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(root_seed), *stream_words(stream)]))


def derived_seed(root_seed: int, stream: str) -> int:
    """A scalar seed drawn from the named stream (for APIs taking ints)."""
    return int(named_rng(root_seed, stream).integers(2 ** 63))


def parse_categories(text: str) -> set[Category]:
    """Parse a category set: 'all', 'none', or '+'-joined names."""
    if text == "all":
        return set(Category)
    if text == "none":
        return set()
    names = {c.value: c for c in Category}
    out = set()
    for part in text.split("+"):
        if part not in names:
            raise ConfigError(
                f"unknown re-prompt category {part!r}; pick from "
                f"{sorted(names)} or 'all'/'none'")
        out.add(names[part])
    return out


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return _is_int(v) or isinstance(v, float)


@dataclass(frozen=True)
class _Field:
    name: str
    default: Any
    coerce: Callable[[Any], Any]
    help: str


def _str_or_none(name: str):
    def check(v):
        if v is None or isinstance(v, str):
            return v
        raise ConfigError(f"{name} must be a string path or null")
    return check


def _int_in(name: str, lo: int | None = None, hi: int | None = None,
            choices: tuple[int, ...] | None = None):
    def check(v):
        if not _is_int(v):
            raise ConfigError(f"{name} must be an integer")
        if choices is not None and v not in choices:
            raise ConfigError(f"{name} must be one of {choices}, got {v}")
        if lo is not None and v < lo:
            raise ConfigError(f"{name} must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ConfigError(f"{name} must be <= {hi}, got {v}")
        return int(v)
    return check


def _float_in(name: str, lo: float, hi: float, lo_open: bool = False):
    def check(v):
        if not _is_num(v):
            raise ConfigError(f"{name} must be a number")
        v = float(v)
        if (v < lo or v > hi) or (lo_open and v == lo):
            bracket = "(" if lo_open else "["
            raise ConfigError(
                f"{name} must lie in {bracket}{lo}, {hi}], got {v}")
        return v
    return check


def _bool(name: str):
    def check(v):
        if isinstance(v, bool):
            return v
        raise ConfigError(f"{name} must be true or false")
    return check


def _choice(name: str, choices: tuple[str, ...]):
    def check(v):
        if v not in choices:
            raise ConfigError(f"{name} must be one of {choices}, got {v!r}")
        return v
    return check


def _k_set(v):
    if isinstance(v, str):
        try:
            v = [int(p) for p in v.split(",") if p.strip()]
        except ValueError as exc:
            raise ConfigError("k_set must be a comma list of integers") \
                from exc
    if not isinstance(v, (list, tuple)) or not v \
            or not all(_is_int(k) and k >= 1 for k in v):
        raise ConfigError("k_set must be a non-empty list of integers >= 1")
    out = tuple(sorted(set(int(k) for k in v)))
    return out


def _categories(v):
    if not isinstance(v, str):
        raise ConfigError("reprompt_categories must be a string")
    parse_categories(v)   # raises on bad names
    return v


def _seed(v):
    if not _is_int(v) or v < 0:
        raise ConfigError("seed must be a non-negative integer")
    return int(v)


def _codebook_seed(v):
    if v is None:
        return None
    return _seed(v)


SCHEMA: tuple[_Field, ...] = (
    _Field("mode", "fastsam-splat", _choice("mode", MODES),
           "pipeline variant to run"),
    _Field("seed", 0, _seed, "root seed; all module streams derive from it"),
    _Field("dataset", None, _str_or_none("dataset"),
           "dataset directory (rgb/depth/pose[/gt][/det])"),
    _Field("det", None, _str_or_none("det"),
           "detection id-map directory overriding <dataset>/det"),
    _Field("out", None, _str_or_none("out"),
           "run output directory"),
    _Field("codebook", None, _str_or_none("codebook"),
           "load this codebook instead of generating one"),
    _Field("codebook_n", 64, _int_in("codebook_n", lo=1),
           "number of codewords when generating"),
    _Field("codebook_d", 8, _int_in("codebook_d", lo=1),
           "codeword dimension when generating"),
    _Field("codebook_seed", None, _codebook_seed,
           "codebook stream seed; null derives it from the root seed"),
    _Field("integer_mode", False, _bool("integer_mode"),
           "scalar integer codewords (ablation; requires codebook_d = 1)"),
    _Field("c_conf", 0.1, _float_in("c_conf", 0.0, 1.0, lo_open=True),
           "per-miss confidence decrement"),
    _Field("n_opt", 20, _int_in("n_opt", lo=0),
           "feature optimization steps per frame"),
    _Field("lambda_mag", 50.0, _float_in("lambda_mag", 0.0, 1e9),
           "magnitude loss weight"),
    _Field("lambda_dir", 1.0, _float_in("lambda_dir", 0.0, 1e9),
           "direction loss weight"),
    _Field("learning_rate", 0.05,
           _float_in("learning_rate", 0.0, 1e9, lo_open=True),
           "feature SGD step size"),
    _Field("match_floor", 0.3, _float_in("match_floor", 0.0, 1.0),
           "minimum F-score for a segment match"),
    _Field("clicks_per_object", 3,
           _int_in("clicks_per_object", choices=CLICK_BUDGETS),
           "points per re-prompt"),
    _Field("reprompt_categories", "all", _categories,
           "'all', 'none', or '+'-joined category names"),
    _Field("reprompt_iou_floor", 0.1,
           _float_in("reprompt_iou_floor", 0.0, 1.0, lo_open=True),
           "overlap below this reads as not tracked"),
    _Field("nms_iou", 0.1, _float_in("nms_iou", 0.0, 1.0),
           "suppression gate for adding detections as new tracks"),
    _Field("script", None, _str_or_none("script"),
           "error script file for the mock tracker"),
    _Field("tracker", "mock", _choice("tracker", TRACKERS),
           "tracker backend for sam2-splat"),
    _Field("save_map", False, _bool("save_map"),
           "write the final Gaussian map checkpoint"),
    _Field("k_set", (1, 5, 10, 15), _k_set,
           "window lengths for VSQ"),
    _Field("stride", 15, _int_in("stride", lo=1),
           "window stride for VSQ"),
    _Field("tp_gate", 0.5, _float_in("tp_gate", 0.0, 1.0),
           "tube IoU needed for a true positive"),
)

_BY_NAME = {f.name: f for f in SCHEMA}


@dataclass(frozen=True)
class RunConfig:
    mode: str
    seed: int
    dataset: str | None
    det: str | None
    out: str | None
    codebook: str | None
    codebook_n: int
    codebook_d: int
    codebook_seed: int | None
    integer_mode: bool
    c_conf: float
    n_opt: int
    lambda_mag: float
    lambda_dir: float
    learning_rate: float
    match_floor: float
    clicks_per_object: int
    reprompt_categories: str
    reprompt_iou_floor: float
    nms_iou: float
    script: str | None
    tracker: str
    save_map: bool
    k_set: tuple[int, ...]
    stride: int
    tp_gate: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_set"] = list(self.k_set)
        return d


def make_run_config(values: dict | None = None) -> RunConfig:
    """Validate a flat mapping against the schema and fill defaults."""
    values = dict(values or {})
    unknown = set(values) - set(_BY_NAME)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for f in SCHEMA:
        out[f.name] = f.coerce(values.get(f.name, f.default))
    config = RunConfig(**out)
    if config.integer_mode and config.codebook_d != 1:
        raise ConfigError("integer_mode requires codebook_d = 1")
    return config


def load_config_file(path: str | Path) -> dict:
    """Read one JSON object of config keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") \
            from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def config_hash(config: RunConfig) -> str:
    """Stable content hash of the validated configuration."""
    canon = json.dumps(config.to_dict(), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
