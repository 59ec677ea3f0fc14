"""Brute-force references and planted-signal workloads.

Nothing here reuses the saliency or selection code it checks: the reference
logits come from a from-scratch full attention evaluation at the reflection
layer, and top-k is a plain Python sort.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigError
from .model import (KVCache, WorkCounters, embed_tokens, forward_range,
                    greedy_decode)
from .numerics import DTYPE, apply_rope, as_matrix, rms_normalize, row_softmax
from .pipeline import (Prompt, Segment, build_path_sequence,
                       select_salient, self_reflect, split_paths)
from .vision import (EventSpec, encode_and_project, generate_planted_video,
                     sample_frames_uniform)

NORM_EPS = 1e-5


# -- attention reference -------------------------------------------------

def attention_logit_rows(queries, keys):
    """Per-head pre-softmax logits ``Q K^T / sqrt(d_k)``, shape (heads, n_q, n_k)."""
    q = as_matrix(queries)
    k = as_matrix(keys)
    if q.ndim == 2:
        q = q[:, None, :]
    if k.ndim == 2:
        k = k[:, None, :]
    d_k = q.shape[-1]
    out = np.einsum("qhd,khd->hqk", q.astype(np.float64), k.astype(np.float64))
    return (out / np.sqrt(d_k)).astype(DTYPE)


def _full_attention_layer(weights, layer, hidden, positions):
    """Standard causal attention at one layer; returns (logits, layer output)."""
    cfg = weights.config
    lw = weights.layer(layer)
    n = hidden.shape[0]
    x = rms_normalize(hidden, lw.attn_norm, NORM_EPS)
    heads = lambda m: m.reshape(n, cfg.num_heads, cfg.head_dim)
    q = apply_rope(heads(x @ lw.wq), positions, cfg.rope_base)
    k = apply_rope(heads(x @ lw.wk), positions, cfg.rope_base)
    v = heads(x @ lw.wv)
    logits = attention_logit_rows(q, k)
    masked = np.where(np.tril(np.ones((n, n), dtype=bool))[None], logits, -np.inf)
    probs = row_softmax(masked)
    ctx = np.einsum("hqk,khd->qhd", probs, v).reshape(n, cfg.model_dim)
    return logits, as_matrix(ctx @ lw.wo)


def reference_reflection_logits(path, weights, layer):
    """Reflection-token logits over the path's visual keys, head-averaged.

    Recomputes the prefix from the path's input embeddings, then evaluates
    the complete attention of ``layer`` (softmax and value product
    included) and reads the last row of its pre-softmax logits.
    """
    cfg = weights.config
    if not 1 <= layer <= cfg.num_layers:
        raise ConfigError(f"reflection layer {layer} outside [1, {cfg.num_layers}]")
    seq = path.sequence
    hidden, _ = forward_range(weights, seq.embeddings, path.positions, 1, layer)
    logits, _ = _full_attention_layer(weights, layer, hidden, path.positions)
    visual = np.flatnonzero(seq.segments == Segment.VISUAL)
    return logits[:, -1, visual].astype(np.float64).mean(axis=0)


def brute_force_topk(table, keep):
    pairs = sorted(zip(table.score.tolist(), table.flat_index.tolist()),
                   key=lambda sp: (-sp[0], sp[1]))
    return sorted(i for _, i in pairs[:max(keep, 0)])


# -- linear-sampling baseline --------------------------------------------

@dataclass
class BaselineResult:
    output_ids: list
    counters: WorkCounters
    decode_counters: WorkCounters
    logits: np.ndarray
    context_length: int


def baseline_run(video, prompt, weights, frames, max_new=8):
    """One context holding all ``frames`` uniformly sampled frames, no reflection."""
    cfg = weights.config
    sample = sample_frames_uniform(video.num_frames, frames)
    visual = encode_and_project(video, sample, weights)
    x = np.concatenate([
        embed_tokens(weights, prompt.system).reshape(len(prompt.system), -1),
        visual.embeddings,
        embed_tokens(weights, prompt.query),
    ]).astype(DTYPE)
    n = x.shape[0]
    counters = WorkCounters()
    logits, cache = forward_range(weights, x, np.arange(n), 1, cfg.num_layers + 1,
                                  KVCache(cfg.num_layers), counters)
    dec = WorkCounters(live_bytes=counters.live_bytes,
                       peak_live_activation_bytes=counters.live_bytes)
    ids = greedy_decode(weights, logits[-1], cache, n, max_new, dec)
    counters.peak_live_activation_bytes = max(counters.peak_live_activation_bytes,
                                              dec.peak_live_activation_bytes)
    counters.live_bytes = 0
    return BaselineResult(ids, counters, dec, logits, n)


def baseline_prefill_macs(num_layers, n_system, n_visual_total, n_query, model_dim):
    n = n_system + n_visual_total + n_query
    return num_layers * 2 * n * n * model_dim


def reflective_prefill_macs(num_paths, layer, path_length, model_dim):
    return num_paths * layer * 2 * path_length * path_length * model_dim


# -- hidden-state consistency --------------------------------------------

@dataclass
class DivergenceRow:
    segment: str
    position: int
    path_a: int
    path_b: int
    l2: float
    cosine: float


@dataclass
class DivergenceReport:
    layer: int
    rows: list = field(default_factory=list)

    def for_segment(self, name):
        return [r for r in self.rows if r.segment == name]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "segment", "position", "path_a", "path_b", "l2", "cosine"])
            for r in self.rows:
                w.writerow([self.layer, r.segment, r.position, r.path_a, r.path_b,
                            repr(r.l2), repr(r.cosine)])


def hidden_divergence(paths, layer):
    """Pairwise distance of text-token hidden states (after ``layer``) across paths."""
    report = DivergenceReport(layer)
    if len(paths) < 2:
        return report
    for a in range(len(paths)):
        for b in range(a + 1, len(paths)):
            pa, pb = paths[a], paths[b]
            for name, seg in (("system", Segment.SYSTEM), ("query", Segment.QUERY)):
                ra = np.flatnonzero(pa.sequence.segments == seg)
                rb = np.flatnonzero(pb.sequence.segments == seg)
                for i, j in zip(ra, rb):
                    u = pa.hidden_out[i].astype(np.float64)
                    v = pb.hidden_out[j].astype(np.float64)
                    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
                    cos = float(u @ v / (nu * nv)) if nu and nv else 1.0
                    report.rows.append(DivergenceRow(
                        name, int(pa.positions[i]), a, b, float(np.linalg.norm(u - v)), cos))
    return report


# -- planted-signal workload ---------------------------------------------

DEFAULT_PROMPT = Prompt(system=(1, 2, 3, 4), query=(10, 11, 12, 13))


@dataclass(frozen=True)
class PlantedWorkload:
    """Video geometry, sampling and prompt for a planted-event selection test."""

    num_frames: int = 64
    patches: int = 8
    frames: int = 16
    segment: int = 8
    event_frames: tuple = (20, 31)
    event_patches: tuple = (2, 5)
    prompt: Prompt = DEFAULT_PROMPT
    layer: int = None
    keep: int = None

    @property
    def num_paths(self):
        return self.frames // self.segment

    @property
    def visual_per_path(self):
        return self.segment * self.patches

    def keep_count(self):
        return self.visual_per_path if self.keep is None else self.keep

    def chance_recall(self):
        return self.keep_count() / (self.num_paths * self.visual_per_path)

    def event(self, direction, beta):
        return EventSpec(self.event_frames, self.event_patches, tuple(direction), beta)

    def direction(self, weights):
        return aligned_event_direction(weights, self.prompt, self.visual_per_path, self.layer)

    def video(self, weights, seed, beta, direction=None):
        if direction is None:
            direction = self.direction(weights)
        return generate_planted_video(seed, self.num_frames, self.patches,
                                      weights.config.vision_dim, self.event(direction, beta))


def aligned_event_direction(weights, prompt, n_visual, layer=None):
    """Feature direction that the prompt's reflection token attends to.

    Probes the reflection query at the reflection layer with blank visual
    features, averages it over all visual offsets (which keeps the slowly
    rotating rotary pairs) and maps it back through the layer's key
    projection and the vision projection. Planting an event along this
    direction makes it prompt-relevant.
    """
    cfg = weights.config
    layer = layer or cfg.reflection_layer
    n_s, n_v = len(prompt.system), n_visual
    x = np.concatenate([
        embed_tokens(weights, prompt.system).reshape(n_s, -1),
        np.zeros((n_v, cfg.model_dim), dtype=DTYPE),
        embed_tokens(weights, prompt.query),
    ])
    n = x.shape[0]
    positions = np.arange(n)
    h, _ = forward_range(weights, x, positions, 1, layer)
    lw = weights.layer(layer)
    xr = rms_normalize(h[-1:], lw.attn_norm, NORM_EPS)
    q = apply_rope((xr @ lw.wq).reshape(1, cfg.num_heads, cfg.head_dim),
                   [n - 1], cfg.rope_base)[0].astype(np.float64)
    vis_pos = np.arange(n_s, n_s + n_v)
    back = apply_rope(np.broadcast_to(q, (n_v,) + q.shape).astype(DTYPE), -vis_pos,
                      cfg.rope_base).astype(np.float64).mean(axis=0)
    target = lw.wk.astype(np.float64) @ back.reshape(-1)
    # steepest ascent of the key score per unit of feature norm
    direction = weights.vision_proj.astype(np.float64) @ target
    return direction / np.linalg.norm(direction)


def planted_labels(workload, video):
    """Flat saliency indices that hold event cells, given the frame sample."""
    sample = np.asarray(sample_frames_uniform(video.num_frames, workload.frames).indices)
    frames = np.repeat(sample, workload.patches)
    patches = np.tile(np.arange(workload.patches), len(sample))
    return np.flatnonzero(video.event.contains(frames, patches))


def selection_for(workload, weights, video, execution="seq"):
    sample = sample_frames_uniform(video.num_frames, workload.frames)
    visual = encode_and_project(video, sample, weights)
    paths = [build_path_sequence(weights, workload.prompt, v, i)
             for i, v in enumerate(split_paths(visual, workload.segment))]
    layer = workload.layer or weights.config.reflection_layer
    _, table = self_reflect(paths, weights, layer, execution)
    return select_salient(table, workload.keep_count())


def planted_recall(workload, weights, beta, seeds, direction=None):
    """Fraction of planted visual tokens, pooled over ``seeds``, that get selected."""
    if direction is None:
        direction = workload.direction(weights)
    hit = total = 0
    for seed in seeds:
        video = workload.video(weights, seed, beta, direction)
        planted = planted_labels(workload, video)
        chosen = selection_for(workload, weights, video)
        hit += np.isin(planted, chosen).sum()
        total += len(planted)
    return hit / total if total else float("nan")


def pipeline_recall(result, workload, video):
    planted = planted_labels(workload, video)
    return float(np.isin(planted, result.selected).mean()) if len(planted) else float("nan")


@dataclass
class Calibration:
    beta: float
    target_recall: float
    trace: list

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "beta", "recall", "meets_target"])
            for i, (b, r) in enumerate(self.trace):
                w.writerow([i, repr(b), repr(r), int(r >= self.target_recall)])


def calibrate_beta(workload, weights, target_recall, seeds, beta_start=0.25,
                   beta_max=64.0, bisect_steps=6):
    """Smallest event bias whose pooled recall over ``seeds`` meets the target.

    Doubles from ``beta_start`` until the target is met, then bisects between
    the last failing and first passing value. The returned bias always met
    the target on ``seeds``.
    """
    if not 0 < target_recall <= 1:
        raise ConfigError(f"target recall must be in (0, 1], got {target_recall}")
    direction = workload.direction(weights)
    trace = []

    def recall(beta):
        r = float(planted_recall(workload, weights, beta, seeds, direction))
        trace.append((float(beta), r))
        return r

    lo, hi = 0.0, beta_start
    while recall(hi) < target_recall:
        lo, hi = hi, hi * 2
        if hi > beta_max:
            raise CalibrationError(
                f"recall {trace[-1][1]:.3f} below {target_recall} at beta={lo}", trace)
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        if recall(mid) >= target_recall:
            hi = mid
        else:
            lo = mid
    return Calibration(hi, target_recall, trace)


__all__ = [
    "BaselineResult", "Calibration", "DivergenceReport", "DivergenceRow",
    "PlantedWorkload", "aligned_event_direction", "attention_logit_rows",
    "baseline_prefill_macs", "baseline_run", "brute_force_topk", "calibrate_beta",
    "hidden_divergence", "pipeline_recall", "planted_labels", "planted_recall",
    "reference_reflection_logits", "reflective_prefill_macs",
    "selection_for",
]
