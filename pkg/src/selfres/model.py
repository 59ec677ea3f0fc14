"""Toy pre-norm decoder-only transformer with ranged forward passes.

Layers are numbered from 1. ``forward_range(..., a, b)`` runs layers
``a .. b-1`` and returns the hidden state entering layer ``b``; passing
``b = num_layers + 1`` also applies the final norm and unembedding, so the
result is logits.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import DTYPE, apply_rope, as_matrix, gelu, rms_normalize, row_softmax

BYTES = np.dtype(DTYPE).itemsize
MLP_RATIO = 4
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_heads: int = 4
    model_dim: int = 64
    head_dim: int = 16
    vocab_size: int = 64
    vision_dim: int = 64
    default_context: int = 72
    reflection_layer: int = 5
    rope_base: float = 10000.0
    weight_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "head_dim",
                     "vocab_size", "vision_dim", "default_context"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"model_dim {self.model_dim} != num_heads {self.num_heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        if not 1 <= self.reflection_layer <= self.num_layers:
            raise ConfigError(
                f"reflection_layer {self.reflection_layer} outside [1, {self.num_layers}]"
            )
        if self.weight_scale < 0:
            raise ConfigError("weight_scale must be non-negative")

    def replace(self, **changes):
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class Weights:
    config: ModelConfig
    embed: np.ndarray           # vocab x d
    vision_proj: np.ndarray     # d_V x d
    layers: tuple               # LayerWeights, index 0 is layer 1
    final_norm: np.ndarray
    unembed: np.ndarray         # d x vocab

    def layer(self, index):
        """Weights of 1-based layer ``index``."""
        return self.layers[index - 1]

    def arrays(self):
        yield self.embed
        yield self.vision_proj
        for lw in self.layers:
            yield from (lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo,
                        lw.mlp_norm, lw.w_in, lw.w_out)
        yield self.final_norm
        yield self.unembed

    def checksum(self):
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init_weights(config):
    """Deterministic weights for ``config``.

    Block projections and the unembedding are uniform in
    ``[-weight_scale, weight_scale]`` so that the residual stream dominates.
    The token embedding table is uniform in ``[-1, 1]`` and the vision
    projection uniform in ``[-1/sqrt(d_V), 1/sqrt(d_V)]``, which puts text
    and projected visual tokens at the same magnitude. Norm gains are 1.
    """
    rng = np.random.default_rng(config.seed)
    d, s = config.model_dim, config.weight_scale

    def uniform(shape, bound):
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)

    embed = uniform((config.vocab_size, d), 1.0)
    vision_proj = uniform((config.vision_dim, d), 1.0 / np.sqrt(config.vision_dim))
    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(d, dtype=DTYPE),
            wq=uniform((d, d), s),
            wk=uniform((d, d), s),
            wv=uniform((d, d), s),
            wo=uniform((d, d), s),
            mlp_norm=np.ones(d, dtype=DTYPE),
            w_in=uniform((d, MLP_RATIO * d), s),
            w_out=uniform((MLP_RATIO * d, d), s),
        ))
    return Weights(
        config=config,
        embed=embed,
        vision_proj=vision_proj,
        layers=tuple(layers),
        final_norm=np.ones(d, dtype=DTYPE),
        unembed=uniform((d, config.vocab_size), s),
    )


def embed_tokens(weights, token_ids):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.config.vocab_size):
        raise DimensionError(f"token id out of range [0, {weights.config.vocab_size})")
    return weights.embed[ids].astype(DTYPE)


@dataclass
class WorkCounters:
    """Exact work and memory counters for one execution.

    ``live_bytes`` tracks activations currently held; its running maximum is
    ``peak_live_activation_bytes``.
    """

    attention_macs: int = 0
    layer_invocations: int = 0
    peak_live_activation_bytes: int = 0
    sra_macs: int = 0
    live_bytes: int = 0

    def alloc(self, nbytes):
        self.live_bytes += int(nbytes)
        if self.live_bytes > self.peak_live_activation_bytes:
            self.peak_live_activation_bytes = self.live_bytes

    def free(self, nbytes):
        self.live_bytes -= int(nbytes)

    def reset(self):
        self.attention_macs = 0
        self.layer_invocations = 0
        self.peak_live_activation_bytes = 0
        self.sra_macs = 0
        self.live_bytes = 0


@dataclass
class KVCache:
    """Per-layer cached keys (before rotation), values and key positions.

    Keys are stored unrotated and rotated at attention time, so a cache
    whose positions are rewritten stays valid.
    """

    num_layers: int
    keys: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    positions: dict = field(default_factory=dict)

    def append(self, layer, k, v, pos):
        if layer in self.keys:
            self.keys[layer] = np.concatenate([self.keys[layer], k])
            self.values[layer] = np.concatenate([self.values[layer], v])
            self.positions[layer] = np.concatenate([self.positions[layer], pos])
        else:
            self.keys[layer] = k
            self.values[layer] = v
            self.positions[layer] = np.asarray(pos, dtype=np.int64)

    def get(self, layer):
        return self.keys[layer], self.values[layer], self.positions[layer]

    def length(self, layer):
        return 0 if layer not in self.keys else self.keys[layer].shape[0]

    def nbytes(self):
        return sum(self.keys[i].nbytes + self.values[i].nbytes for i in self.keys)

    def gather(self, rows_per_layer, positions):
        """New cache holding ``rows`` of each layer with ``positions`` assigned."""
        out = KVCache(self.num_layers)
        for layer, rows in rows_per_layer.items():
            k, v, _ = self.get(layer)
            out.append(layer, k[rows], v[rows], positions)
        return out


def _split_heads(x, config):
    return x.reshape(x.shape[0], config.num_heads, config.head_dim)


def layer_queries_keys(weights, layer, hidden, positions):
    """Rotated per-head queries and keys that layer ``layer`` would compute."""
    cfg = weights.config
    lw = weights.layer(layer)
    x = rms_normalize(hidden, lw.attn_norm, NORM_EPS)
    q = apply_rope(_split_heads(x @ lw.wq, cfg), positions, cfg.rope_base)
    k = apply_rope(_split_heads(x @ lw.wk, cfg), positions, cfg.rope_base)
    return q, k


def _attention_block(weights, layer, h, positions, cache, counters):
    cfg = weights.config
    lw = weights.layer(layer)
    n, d = h.shape
    x = rms_normalize(h, lw.attn_norm, NORM_EPS)
    q = _split_heads(x @ lw.wq, cfg)
    k = _split_heads(x @ lw.wk, cfg)
    v = _split_heads(x @ lw.wv, cfg)
    n_cached = cache.length(layer)
    cache.append(layer, k, v, positions)
    counters.alloc(2 * n * d * BYTES)  # cache growth stays live
    k_all, v_all, p_all = cache.get(layer)
    m = k_all.shape[0]

    transient = (5 * n * d + m * d + 2 * cfg.num_heads * n * m) * BYTES
    counters.alloc(transient)
    qr = apply_rope(q, positions, cfg.rope_base).transpose(1, 0, 2)       # H n dk
    kr = apply_rope(k_all, p_all, cfg.rope_base).transpose(1, 2, 0)       # H dk m
    scores = (qr @ kr) * DTYPE(1.0 / np.sqrt(cfg.head_dim))               # H n m
    # causal over sequence order, independent of position values
    allowed = np.arange(m)[None, :] <= (n_cached + np.arange(n))[:, None]
    scores = np.where(allowed[None], scores, DTYPE(-np.inf))
    probs = row_softmax(scores)
    ctx = (probs @ v_all.transpose(1, 0, 2)).transpose(1, 0, 2).reshape(n, d)
    out = as_matrix(ctx @ lw.wo)
    counters.free(transient)
    counters.attention_macs += 2 * n * m * d
    return out


def _mlp_block(weights, layer, h, counters):
    lw = weights.layer(layer)
    n, d = h.shape
    transient = (d + 2 * MLP_RATIO * d + d) * n * BYTES
    counters.alloc(transient)
    x = rms_normalize(h, lw.mlp_norm, NORM_EPS)
    out = as_matrix(gelu(x @ lw.w_in) @ lw.w_out)
    counters.free(transient)
    return out


def forward_range(weights, hidden, positions, from_layer, to_layer, cache=None, counters=None):
    """Run layers ``from_layer .. to_layer - 1`` over ``hidden``.

    Attention is causal within ``hidden`` and sees everything already in
    ``cache`` for that layer. New keys and values are appended to the cache.
    Returns ``(output, cache)`` where output is the hidden state entering
    ``to_layer``, or logits when ``to_layer == num_layers + 1``.
    """
    cfg = weights.config
    h = as_matrix(hidden)
    positions = np.asarray(positions, dtype=np.int64)
    if h.ndim != 2 or h.shape[1] != cfg.model_dim:
        raise DimensionError(f"hidden must be (n, {cfg.model_dim}), got {h.shape}")
    if positions.shape != (h.shape[0],):
        raise DimensionError(f"{positions.shape[0]} positions for {h.shape[0]} tokens")
    if not 1 <= from_layer <= to_layer <= cfg.num_layers + 1:
        raise ConfigError(
            f"layer range {from_layer}..{to_layer} outside 1..{cfg.num_layers + 1}"
        )
    if cache is None:
        cache = KVCache(cfg.num_layers)
    if counters is None:
        counters = WorkCounters()

    n, d = h.shape
    counters.alloc(n * d * BYTES)
    for layer in range(from_layer, min(to_layer, cfg.num_layers + 1)):
        h = h + _attention_block(weights, layer, h, positions, cache, counters)
        h = h + _mlp_block(weights, layer, h, counters)
        counters.layer_invocations += 1
    if to_layer == cfg.num_layers + 1:
        counters.alloc(n * cfg.vocab_size * BYTES)
        h = as_matrix(rms_normalize(h, weights.final_norm, NORM_EPS) @ weights.unembed)
        counters.free(n * cfg.vocab_size * BYTES)
    counters.free(n * d * BYTES)
    return h, cache


def argmax_lowest(logits):
    """Index of the maximum, lowest index on ties."""
    return int(np.argmax(logits))


def greedy_decode(weights, last_logits, cache, next_position, max_new, counters=None):
    """Greedy continuation after a completed prefill.

    ``last_logits`` are the prefill's final-row logits and ``cache`` its full
    KV cache; each emitted token is fed back at ``next_position``,
    ``next_position + 1``, ... and appended to the cache.
    """
    if max_new <= 0:
        return []
    cfg = weights.config
    logits = np.asarray(last_logits)
    out = []
    pos = int(next_position)
    while True:
        tok = argmax_lowest(logits)
        out.append(tok)
        if len(out) == max_new:
            return out
        x = embed_tokens(weights, [tok])
        step, cache = forward_range(weights, x, [pos], 1, cfg.num_layers + 1, cache, counters)
        logits = step[-1]
        pos += 1
