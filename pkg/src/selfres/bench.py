"""Benchmark driver: JSON run requests in, one CSV row per (config, seed) out.

Usage::

    selfres-bench run --config request.json --seeds 0..9 --out runs.csv
    selfres-bench sweep --dim layer --grid 1..8 --config request.json --out layers.csv

Every command-line flag overrides the matching request field.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, RequestError
from .model import ModelConfig, init_weights
from .oracle import aligned_event_direction, pipeline_recall
from .pipeline import Execution, Mode, PositionStrategy, Prompt, run_pipeline
from .vision import EventSpec, generate_planted_video

CSV_SCHEMA_VERSION = 1

DEFAULT_VIDEO = {
    "num_frames": 64,
    "patches_per_frame": 8,
    "event": {"frame_range": [20, 31], "patch_range": [2, 5],
              "direction": "aligned", "bias": 4.0},
}


@dataclass(frozen=True)
class RunRequest:
    model: ModelConfig = field(default_factory=ModelConfig)
    video: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_VIDEO)))
    T: int = 16
    S: int = 8
    reflection_layer: int = None
    K: int = None
    mode: str = "regular"
    position_strategy: str = "reassigned"
    exec: str = "batch"
    seeds: tuple = (0,)
    max_new: int = 8
    prompt: Prompt = Prompt((1, 2, 3, 4), (10, 11, 12, 13))

    @property
    def layer(self):
        return self.model.reflection_layer if self.reflection_layer is None else self.reflection_layer

    @property
    def R(self):
        return self.T // self.S

    def keep(self):
        return self.S * self.video["patches_per_frame"] if self.K is None else self.K

    def to_dict(self, with_seeds=True):
        d = {
            "model": self.model.to_dict(),
            "video": self.video,
            "T": self.T, "S": self.S,
            "reflection_layer": self.layer,
            "K": self.keep(),
            "mode": self.mode,
            "position_strategy": self.position_strategy,
            "exec": self.exec,
            "max_new": self.max_new,
            "prompt": {"system": list(self.prompt.system), "query": list(self.prompt.query)},
        }
        if with_seeds:
            d["seeds"] = list(self.seeds)
        return d

    def config_hash(self):
        canon = json.dumps(self.to_dict(with_seeds=False), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def validate(self):
        cfg = self.model
        if not 1 <= self.layer <= cfg.num_layers:
            raise ConfigError(f"reflection_layer {self.layer} outside [1, {cfg.num_layers}]")
        if self.S <= 0 or self.T <= 0 or self.T % self.S:
            raise ConfigError(f"T={self.T} is not a positive multiple of S={self.S}")
        if self.T > self.video["num_frames"]:
            raise ConfigError(f"T={self.T} exceeds the video's {self.video['num_frames']} frames")
        for name, cls in (("mode", Mode), ("position_strategy", PositionStrategy),
                          ("exec", Execution)):
            try:
                cls(getattr(self, name))
            except ValueError:
                raise ConfigError(f"{name}={getattr(self, name)!r} is not one of "
                                  f"{[m.value for m in cls]}") from None
        return self


def parse_seeds(value):
    """``"a..b"`` (inclusive), ``"a,b,c"``, an int or a list."""
    if isinstance(value, int):
        return (value,)
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    if ".." in text:
        a, b = text.split("..", 1)
        a, b = int(a), int(b)
        if b < a:
            raise RequestError(f"empty seed range {text!r}")
        return tuple(range(a, b + 1))
    return tuple(int(v) for v in text.split(","))


_REQUEST_KEYS = {"model", "video", "T", "S", "reflection_layer", "K", "mode",
                 "position_strategy", "exec", "seed", "seeds", "max_new", "prompt"}


def request_from_dict(data):
    if not isinstance(data, dict):
        raise RequestError("request must be a JSON object")
    unknown = set(data) - _REQUEST_KEYS
    if unknown:
        raise RequestError(f"unknown request field(s): {sorted(unknown)}")
    kw = {}
    try:
        if "model" in data:
            kw["model"] = ModelConfig.from_dict(data["model"])
    except (TypeError, ConfigError) as exc:
        raise RequestError(f"field 'model': {exc}") from None
    if "video" in data:
        video = {**DEFAULT_VIDEO, **data["video"]}
        for key in ("num_frames", "patches_per_frame", "event"):
            if key not in video:
                raise RequestError(f"field 'video.{key}' is required")
        kw["video"] = video
    for key in ("T", "S", "reflection_layer", "K", "max_new"):
        if key in data:
            v = data[key]
            if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
                raise RequestError(f"field {key!r} must be an integer, got {v!r}")
            kw[key] = v
    for key in ("mode", "position_strategy", "exec"):
        if key in data:
            if not isinstance(data[key], str):
                raise RequestError(f"field {key!r} must be a string")
            kw[key] = data[key]
    if "seeds" in data or "seed" in data:
        try:
            kw["seeds"] = parse_seeds(data.get("seeds", data.get("seed")))
        except ValueError as exc:
            raise RequestError(f"field 'seeds': {exc}") from None
    if "prompt" in data:
        p = data["prompt"]
        try:
            kw["prompt"] = Prompt(tuple(int(t) for t in p.get("system", ())),
                                  tuple(int(t) for t in p["query"]))
        except (KeyError, TypeError, ValueError, AttributeError):
            raise RequestError("field 'prompt' needs integer lists 'system' and 'query'") from None
    return RunRequest(**kw)


def load_request(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RequestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return request_from_dict(data)


@dataclass
class ResultRow:
    run_id: str
    config_hash: str
    T: int
    S: int
    R: int
    l: int
    K: int
    mode: str
    position_strategy: str
    exec: str
    seed: int
    planted_recall: float
    attention_macs: int
    layer_invocations: int
    peak_live_activation_bytes: int
    wall_clock_ms: float
    output_ids: str

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def values(self):
        out = []
        for name in self.header():
            v = getattr(self, name)
            if isinstance(v, float) and np.isnan(v):
                v = ""
            out.append(v)
        return out


def _video_for(request, weights, seed):
    spec = request.video
    ev = dict(spec["event"])
    direction = ev.get("direction", "aligned")
    if isinstance(direction, str):
        if direction != "aligned":
            raise RequestError(f"field 'video.event.direction': unknown value {direction!r}")
        direction = aligned_event_direction(weights, request.prompt,
                                            request.S * spec["patches_per_frame"], request.layer)
    event = EventSpec(tuple(ev["frame_range"]), tuple(ev["patch_range"]),
                      tuple(direction), ev.get("bias", 0.0))
    return generate_planted_video(seed, spec["num_frames"], spec["patches_per_frame"],
                                  weights.config.vision_dim, event)


class _RecallView:
    """Adapter giving pipeline_recall the geometry it reads from a workload."""

    def __init__(self, request):
        self.frames = request.T
        self.patches = request.video["patches_per_frame"]


def execute(request, weights=None):
    """Run every seed of ``request``; returns ResultRows."""
    request.validate()
    weights = weights or init_weights(request.model)
    rows = []
    chash = request.config_hash()
    for seed in request.seeds:
        video = _video_for(request, weights, seed)
        t0 = time.perf_counter()
        res = run_pipeline(video, request.prompt, weights, request.T, request.S,
                           request.layer, request.keep(), request.mode,
                           request.position_strategy, request.exec, request.max_new)
        ms = (time.perf_counter() - t0) * 1e3
        rows.append(ResultRow(
            run_id=f"{chash}-{seed}", config_hash=chash, T=request.T, S=request.S,
            R=request.R, l=request.layer, K=len(res.plan.selected), mode=request.mode,
            position_strategy=request.position_strategy, exec=request.exec, seed=seed,
            planted_recall=pipeline_recall(res, _RecallView(request), video),
            attention_macs=res.counters.attention_macs,
            layer_invocations=res.counters.layer_invocations,
            peak_live_activation_bytes=res.counters.peak_live_activation_bytes,
            wall_clock_ms=round(ms, 3),
            output_ids=" ".join(str(t) for t in res.output_ids),
        ))
    return rows


def write_rows(rows, out_path):
    """Append rows to ``out_path``; the header is written when the file is new."""
    fresh = not os.path.exists(out_path) or os.path.getsize(out_path) == 0
    with open(out_path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(ResultRow.header())
        for r in rows:
            w.writerow(r.values())


def run_benchmark(request, out_path, weights=None):
    rows = execute(request, weights)
    write_rows(rows, out_path)
    return rows


def _parse_grid(dimension, grid):
    if isinstance(grid, str):
        items = [g.strip() for g in grid.split(",") if g.strip()]
        if dimension == "layer":
            out = []
            for it in items:
                if ".." in it:
                    a, b = it.split("..", 1)
                    out.extend(range(int(a), int(b) + 1))
                else:
                    out.append(int(it))
            grid = out
        elif dimension == "context":
            grid = [tuple(int(x) for x in it.lower().split("x")) for it in items]
        else:
            grid = items
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    return grid


def sweep_requests(dimension, grid, base):
    """Expand a sweep into requests, validating each grid value first."""
    grid = _parse_grid(dimension, grid)
    cfg = base.model
    out = []
    if dimension == "layer":
        for l in grid:
            if not 1 <= l <= cfg.num_layers:
                raise ConfigError(f"layer grid value {l} outside [1, {cfg.num_layers}]")
            for mode in (Mode.REGULAR.value, Mode.SMOOTH.value):
                out.append(replace(base, reflection_layer=l, mode=mode))
    elif dimension == "context":
        for pair in grid:
            S, T = pair
            if S <= 0 or T % S or T > base.video["num_frames"]:
                raise ConfigError(f"context grid value S={S}, T={T} is invalid for a "
                                  f"{base.video['num_frames']}-frame video")
            out.append(replace(base, S=S, T=T))
    elif dimension == "strategy":
        for name in grid:
            try:
                PositionStrategy(name)
            except ValueError:
                raise ConfigError(f"strategy grid value {name!r} is unknown") from None
            out.append(replace(base, position_strategy=name))
    else:
        raise ConfigError(f"unknown sweep dimension {dimension!r}")
    return [r.validate() for r in out]


def sweep(dimension, grid, base, out_path, weights=None):
    requests = sweep_requests(dimension, grid, base)
    weights = weights or init_weights(base.model)
    rows = []
    for req in requests:
        rows.extend(execute(req, weights))
    write_rows(rows, out_path)
    return rows


# -- command line ------------------------------------------------------------

def _add_request_flags(p):
    p.add_argument("--config", help="run request JSON")
    p.add_argument("--frames", type=int, dest="T", help="total sampled frames T")
    p.add_argument("--segment", type=int, dest="S", help="frames per reflection path S")
    p.add_argument("--layer", type=int, dest="reflection_layer", help="self-reflection layer (1-based)")
    p.add_argument("--keep", type=int, dest="K", help="visual tokens kept after selection")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--pos", dest="position_strategy", choices=[s.value for s in PositionStrategy])
    p.add_argument("--exec", dest="exec", choices=[e.value for e in Execution])
    p.add_argument("--seeds", help="seed range a..b (inclusive) or list a,b,c")
    p.add_argument("--out", required=True, help="CSV output path (appended)")


def _request_from_args(args):
    base = load_request(args.config) if args.config else RunRequest()
    changes = {}
    for key in ("T", "S", "reflection_layer", "K", "mode", "position_strategy", "exec"):
        v = getattr(args, key)
        if v is not None:
            changes[key] = v
    if args.seeds is not None:
        changes["seeds"] = parse_seeds(args.seeds)
    return replace(base, **changes)


def build_parser():
    parser = argparse.ArgumentParser(prog="selfres-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one request for each seed")
    _add_request_flags(run_p)
    sw = sub.add_parser("sweep", help="sweep one dimension of a request")
    _add_request_flags(sw)
    sw.add_argument("--dim", required=True, choices=["layer", "context", "strategy"])
    sw.add_argument("--grid", required=True,
                    help="layer: 1..8 | context: SxT,SxT | strategy: reassigned,dup,inc,single")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        request = _request_from_args(args)
        if args.command == "run":
            rows = run_benchmark(request, args.out)
        else:
            rows = sweep(args.dim, args.grid, request, args.out)
    except (RequestError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(rows)} row(s) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
