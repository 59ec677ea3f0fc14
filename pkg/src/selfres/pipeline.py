"""Self-reflective sampling: reflection paths, saliency, selection, convergence.

The sampled frames are split into ``R = T / S`` reflection paths. Each path
sees ``system + its visual tokens + query`` and is run through layers
``1 .. l``. At layer ``l`` the last input token (the reflection token) scores
every visual token of its path with its raw scaled query-key products,
averaged over heads. The top ``K`` visual tokens over all paths are kept in
their original order and the paths converge into one sequence:

* regular: rebuild the input-level sequence and run all ``L`` layers;
* smooth: gather layer-``l`` outputs (text from path 0) and run ``l+1 .. L``.
"""

import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivisibilityError
from .model import (BYTES, KVCache, WorkCounters, embed_tokens, forward_range,
                    greedy_decode, layer_queries_keys)
from .numerics import DTYPE, as_matrix
from .vision import encode_and_project, sample_frames_uniform


class Segment(enum.IntEnum):
    SYSTEM = 0
    VISUAL = 1
    QUERY = 2


class Mode(str, enum.Enum):
    REGULAR = "regular"
    SMOOTH = "smooth"


class PositionStrategy(str, enum.Enum):
    REASSIGNED = "reassigned"
    DUPLICATED = "dup"
    PATH_INCREMENTED = "inc"
    SINGLE = "single"


class Execution(str, enum.Enum):
    BATCH = "batch"
    SEQUENTIAL = "seq"


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        names = ", ".join(m.value for m in cls)
        raise ConfigError(f"unknown {cls.__name__} {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class Prompt:
    system: tuple
    query: tuple


@dataclass
class SegmentedSequence:
    embeddings: np.ndarray
    segments: np.ndarray
    token_ids: np.ndarray     # -1 on visual rows
    frames: np.ndarray        # -1 off visual rows
    patches: np.ndarray
    path: np.ndarray

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def visual_rows(self):
        return np.flatnonzero(self.segments == Segment.VISUAL)

    @property
    def system_rows(self):
        return np.flatnonzero(self.segments == Segment.SYSTEM)

    @property
    def query_rows(self):
        return np.flatnonzero(self.segments == Segment.QUERY)

    @property
    def reflection_row(self):
        return len(self) - 1


@dataclass
class ReflectionPath:
    index: int
    sequence: SegmentedSequence
    positions: np.ndarray
    hidden_in: np.ndarray = None    # entering layer l
    hidden_out: np.ndarray = None   # leaving layer l
    cache: KVCache = None
    counters: WorkCounters = field(default_factory=WorkCounters)

    @property
    def length(self):
        return len(self.sequence)

    def retained_bytes(self, mode):
        if mode is Mode.SMOOTH:
            return self.hidden_out.nbytes + self.cache.nbytes()
        return len(self.sequence.visual_rows) * BYTES


@dataclass
class SaliencyTable:
    path: np.ndarray
    frame: np.ndarray
    patch: np.ndarray
    flat_index: np.ndarray
    score: np.ndarray
    n_visual: int

    def __len__(self):
        return len(self.score)

    @property
    def num_paths(self):
        return len(self) // self.n_visual if self.n_visual else 0

    def labels(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return list(zip(self.path[idx].tolist(), self.frame[idx].tolist(),
                        self.patch[idx].tolist()))

    @classmethod
    def from_scores(cls, scores, n_visual, frames=None, patches=None):
        """Table from a flat score vector, e.g. for tests; labels default to indices."""
        scores = as_matrix(scores).ravel()
        n = len(scores)
        flat = np.arange(n, dtype=np.int64)
        return cls(
            path=flat // n_visual,
            frame=np.asarray(frames if frames is not None else flat % n_visual),
            patch=np.asarray(patches if patches is not None else np.zeros(n, dtype=np.int64)),
            flat_index=flat,
            score=scores,
            n_visual=n_visual,
        )


@dataclass(frozen=True)
class ConvergencePlan:
    selected: tuple
    keep_count: int
    mode: Mode = Mode.REGULAR
    position_strategy: PositionStrategy = PositionStrategy.REASSIGNED
    execution: Execution = Execution.BATCH

    def __post_init__(self):
        object.__setattr__(self, "mode", _enum(Mode, self.mode))
        object.__setattr__(self, "position_strategy",
                           _enum(PositionStrategy, self.position_strategy))
        object.__setattr__(self, "execution", _enum(Execution, self.execution))
        sel = tuple(int(i) for i in self.selected)
        object.__setattr__(self, "selected", sel)
        if len(sel) != self.keep_count:
            raise ContractError(f"{len(sel)} selected indices but keep_count={self.keep_count}")
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ContractError("selected indices must be strictly increasing")


def split_paths(visual, segment):
    """Split frame-major visual tokens of ``T`` frames into ``T / segment`` paths."""
    T = int(visual.slots.max()) + 1 if len(visual) else 0
    if segment <= 0 or T == 0 or T % segment:
        raise DivisibilityError(f"T={T} frames is not a multiple of segment size S={segment}")
    R = T // segment
    return [visual.take(np.flatnonzero((visual.slots >= i * segment)
                                       & (visual.slots < (i + 1) * segment)))
            for i in range(R)]


def build_path_sequence(weights, prompt, path_visual, path_index=0):
    """Path input ``system + visual + query`` with positions ``0 .. N_r - 1``."""
    if len(prompt.query) == 0:
        raise ContractError("query is empty: there is no reflection token")
    n_s, n_v, n_q = len(prompt.system), len(path_visual), len(prompt.query)
    emb = np.concatenate([
        embed_tokens(weights, prompt.system).reshape(n_s, -1),
        path_visual.embeddings.reshape(n_v, -1),
        embed_tokens(weights, prompt.query),
    ]).astype(DTYPE)
    segments = np.repeat([Segment.SYSTEM, Segment.VISUAL, Segment.QUERY], [n_s, n_v, n_q])
    no_label = np.full(n_s, -1), np.full(n_q, -1)
    seq = SegmentedSequence(
        embeddings=emb,
        segments=segments.astype(np.int8),
        token_ids=np.concatenate([prompt.system, np.full(n_v, -1), prompt.query]).astype(np.int64),
        frames=np.concatenate([no_label[0], path_visual.frames, no_label[1]]).astype(np.int64),
        patches=np.concatenate([no_label[0], path_visual.patches, no_label[1]]).astype(np.int64),
        path=np.concatenate([no_label[0], np.full(n_v, path_index), no_label[1]]).astype(np.int64),
    )
    return ReflectionPath(index=path_index, sequence=seq,
                          positions=np.arange(len(seq), dtype=np.int64))


def sra_scores(query, keys):
    """Head-averaged ``q . k / sqrt(d_k)`` with no softmax and no values.

    ``query`` is (heads, d_k) and ``keys`` is (n, heads, d_k).
    """
    query = as_matrix(query)
    keys = as_matrix(keys)
    if query.ndim == 1:
        query = query[None]
    if keys.ndim == 2:
        keys = keys[:, None, :]
    d_k = query.shape[-1]
    per_head = (keys * query[None]).sum(axis=-1) * DTYPE(1.0 / np.sqrt(d_k))
    return per_head.mean(axis=1, dtype=DTYPE)


def _reflect_one(path, weights, layer):
    counters = WorkCounters()
    h_in, cache = forward_range(weights, path.sequence.embeddings, path.positions,
                                1, layer, KVCache(weights.config.num_layers), counters)
    seq = path.sequence
    rows = np.append(seq.visual_rows, seq.reflection_row)
    q, k = layer_queries_keys(weights, layer, h_in[rows], path.positions[rows])
    scores = sra_scores(q[-1], k[:-1])
    cfg = weights.config
    counters.sra_macs += len(rows[:-1]) * cfg.num_heads * cfg.head_dim
    h_out, cache = forward_range(weights, h_in, path.positions, layer, layer + 1, cache, counters)
    path.hidden_in, path.hidden_out, path.cache, path.counters = h_in, h_out, cache, counters
    return scores


def self_reflect(paths, weights, layer, execution=Execution.BATCH):
    """Prefill each path through ``layer`` and score its visual tokens there.

    Batch execution runs paths on a thread pool; results are merged by path
    index so scheduling order never shows in the output.
    """
    cfg = weights.config
    if not 1 <= layer <= cfg.num_layers:
        raise ConfigError(f"reflection layer {layer} outside [1, {cfg.num_layers}]")
    execution = _enum(Execution, execution)
    n_visual = {len(p.sequence.visual_rows) for p in paths}
    if len(n_visual) != 1:
        raise ContractError(f"paths disagree on visual token count: {sorted(n_visual)}")
    if execution is Execution.BATCH and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=len(paths)) as pool:
            scores = list(pool.map(lambda p: _reflect_one(p, weights, layer), paths))
    else:
        scores = [_reflect_one(p, weights, layer) for p in paths]

    nv = n_visual.pop()
    parts = []
    for i, (p, s) in enumerate(zip(paths, scores)):
        vr = p.sequence.visual_rows
        parts.append((np.full(nv, i), p.sequence.frames[vr], p.sequence.patches[vr], s))
    table = SaliencyTable(
        path=np.concatenate([x[0] for x in parts]).astype(np.int64),
        frame=np.concatenate([x[1] for x in parts]),
        patch=np.concatenate([x[2] for x in parts]),
        flat_index=np.arange(nv * len(paths), dtype=np.int64),
        score=np.concatenate([x[3] for x in parts]).astype(DTYPE),
        n_visual=nv,
    )
    return paths, table


def select_salient(table, keep):
    """Top-``keep`` flat indices (ties to the lower index), returned ascending."""
    total = len(table)
    if keep > total:
        warnings.warn(f"keep={keep} exceeds {total} visual tokens; clamping", stacklevel=2)
        keep = total
    if keep <= 0:
        warnings.warn("keep=0 selects no visual tokens", stacklevel=2)
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-table.score, kind="stable")
    return np.sort(table.flat_index[order[:keep]])


@dataclass(frozen=True)
class Provenance:
    """Where each converged token came from."""

    segments: np.ndarray
    path: np.ndarray
    local_position: np.ndarray


def assign_positions(provenance, strategy, path_length, n_system):
    strategy = _enum(PositionStrategy, strategy)
    seg = np.asarray(provenance.segments)
    n = len(seg)
    if strategy is PositionStrategy.REASSIGNED:
        return np.arange(n, dtype=np.int64)
    local = np.asarray(provenance.local_position, dtype=np.int64)
    if strategy is PositionStrategy.DUPLICATED:
        return local.copy()
    if strategy is PositionStrategy.PATH_INCREMENTED:
        return local + np.asarray(provenance.path, dtype=np.int64) * path_length
    # SINGLE: every visual token shares one index right after the system prompt
    out = np.empty(n, dtype=np.int64)
    sys_rows = seg == Segment.SYSTEM
    out[sys_rows] = np.arange(sys_rows.sum())
    out[seg == Segment.VISUAL] = n_system
    q_rows = seg == Segment.QUERY
    out[q_rows] = n_system + 1 + np.arange(q_rows.sum())
    return out


@dataclass
class ConvergedContext:
    inputs: np.ndarray
    positions: np.ndarray
    provenance: Provenance
    start_layer: int
    cache: KVCache
    mode: Mode

    def __len__(self):
        return self.inputs.shape[0]


def _sources(paths, selected, n_visual):
    """(path index, row within path) for every converged token, in order."""
    p0 = paths[0].sequence
    src = [(0, r) for r in p0.system_rows]
    for flat in selected:
        p, local = divmod(int(flat), n_visual)
        src.append((p, int(paths[p].sequence.visual_rows[local])))
    src += [(0, r) for r in p0.query_rows]
    return src


def converge(paths, plan, weights):
    """Assemble the single final-path sequence described by ``plan``."""
    cfg = weights.config
    if not paths:
        raise ContractError("no reflection paths to converge")
    if plan.mode is Mode.SMOOTH and any(p.hidden_out is None for p in paths):
        raise ContractError("smooth convergence needs self-reflected paths")
    n_visual = len(paths[0].sequence.visual_rows)
    if plan.selected and (plan.selected[0] < 0 or plan.selected[-1] >= n_visual * len(paths)):
        raise ContractError("selected index outside the saliency table")
    src = _sources(paths, plan.selected, n_visual)
    p_idx = np.array([s[0] for s in src], dtype=np.int64)
    rows = np.array([s[1] for s in src], dtype=np.int64)
    seg = np.array([paths[p].sequence.segments[r] for p, r in src], dtype=np.int8)
    prov = Provenance(segments=seg, path=np.where(seg == Segment.VISUAL, p_idx, 0),
                      local_position=np.array([paths[p].positions[r] for p, r in src],
                                              dtype=np.int64))
    positions = assign_positions(prov, plan.position_strategy, paths[0].length,
                                 len(paths[0].sequence.system_rows))

    if plan.mode is Mode.REGULAR:
        inputs = np.stack([paths[p].sequence.embeddings[r] for p, r in src])
        return ConvergedContext(as_matrix(inputs), positions, prov, 1,
                                KVCache(cfg.num_layers), plan.mode)

    layer = _reflection_layer_of(paths)
    inputs = np.stack([paths[p].hidden_out[r] for p, r in src])
    # layers 1..l cannot be recomputed without leaving smooth mode, so their
    # keys and values are gathered; keys are stored unrotated and pick up
    # the new positions at attention time
    cache = KVCache(cfg.num_layers)
    for lyr in range(1, layer + 1):
        ks = np.stack([paths[p].cache.keys[lyr][r] for p, r in src])
        vs = np.stack([paths[p].cache.values[lyr][r] for p, r in src])
        cache.append(lyr, ks, vs, positions)
    return ConvergedContext(as_matrix(inputs), positions, prov, layer + 1, cache, plan.mode)


def _reflection_layer_of(paths):
    layers = {max(p.cache.keys) for p in paths}
    if len(layers) != 1:
        raise ContractError("paths were reflected at different layers")
    return layers.pop()


@dataclass
class PipelineResult:
    output_ids: list
    counters: WorkCounters
    table: SaliencyTable
    plan: ConvergencePlan
    context: ConvergedContext
    paths: list
    reflection_counters: WorkCounters
    final_counters: WorkCounters
    decode_counters: WorkCounters
    final_logits: np.ndarray

    @property
    def selected(self):
        return np.asarray(self.plan.selected, dtype=np.int64)


def _sum_counters(items):
    out = WorkCounters()
    for c in items:
        out.attention_macs += c.attention_macs
        out.layer_invocations += c.layer_invocations
        out.sra_macs += c.sra_macs
    return out


def run_pipeline(video, prompt, weights, frames, segment, layer=None, keep=None,
                 mode=Mode.REGULAR, position_strategy=PositionStrategy.REASSIGNED,
                 execution=Execution.BATCH, max_new=8):
    """sample -> encode -> split -> self-reflect -> select -> converge -> decode.

    ``keep`` defaults to one path's visual token count. Peak live bytes model
    batch execution as all paths resident at once and sequential execution
    as one path at a time plus whatever earlier paths hand to convergence.
    """
    cfg = weights.config
    layer = cfg.reflection_layer if layer is None else layer
    mode = _enum(Mode, mode)
    execution = _enum(Execution, execution)
    sample = sample_frames_uniform(video.num_frames, frames)
    visual = encode_and_project(video, sample, weights)
    per_path = split_paths(visual, segment)
    paths = [build_path_sequence(weights, prompt, v, i) for i, v in enumerate(per_path)]
    paths, table = self_reflect(paths, weights, layer, execution)

    n_visual = table.n_visual
    keep = n_visual if keep is None else keep
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        selected = select_salient(table, keep)
    plan = ConvergencePlan(tuple(selected), len(selected), mode, position_strategy, execution)

    retained = [p.retained_bytes(mode) for p in paths]
    peaks = [p.counters.peak_live_activation_bytes for p in paths]
    if execution is Execution.BATCH:
        reflect_peak = sum(peaks)
    else:
        reflect_peak = max(sum(retained[:i]) + peaks[i] for i in range(len(paths)))

    ctx = converge(paths, plan, weights)
    converge_peak = sum(retained) + ctx.inputs.nbytes + ctx.cache.nbytes()

    final = WorkCounters()
    final.alloc(ctx.cache.nbytes())
    logits, cache = forward_range(weights, ctx.inputs, ctx.positions, ctx.start_layer,
                                  cfg.num_layers + 1, ctx.cache, final)
    decode = WorkCounters(live_bytes=final.live_bytes,
                          peak_live_activation_bytes=final.live_bytes)
    next_pos = int(ctx.positions.max()) + 1 if len(ctx) else 0
    out_ids = greedy_decode(weights, logits[-1], cache, next_pos, max_new, decode)

    reflection = _sum_counters(p.counters for p in paths)
    reflection.peak_live_activation_bytes = reflect_peak
    total = _sum_counters([reflection, final])
    total.peak_live_activation_bytes = max(reflect_peak, converge_peak,
                                           final.peak_live_activation_bytes,
                                           decode.peak_live_activation_bytes)
    return PipelineResult(
        output_ids=out_ids, counters=total, table=table, plan=plan, context=ctx,
        paths=paths, reflection_counters=reflection, final_counters=final,
        decode_counters=decode, final_logits=logits,
    )
