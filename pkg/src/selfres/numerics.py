"""Dense float32 kernels shared by the model, the pipeline and the oracles.

Every kernel takes and returns ``float32`` arrays. Summation happens along
fixed axes with fixed shapes, so the same call on the same data is
bit-reproducible regardless of which worker thread runs it.
"""

import numpy as np

from .errors import DimensionError

DTYPE = np.float32


def as_matrix(values):
    """Return ``values`` as a C-contiguous float32 array (no copy if possible)."""
    return np.ascontiguousarray(values, dtype=DTYPE)


def row_softmax(logits):
    """Softmax over the last axis, with max subtraction.

    Entries equal to ``-inf`` are treated as masked and receive exactly zero
    probability; every row needs at least one finite entry.
    """
    logits = as_matrix(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rope_angles(positions, d_head, base):
    """Rotation angles, shape (n, d_head // 2), computed in float64."""
    positions = np.asarray(positions, dtype=np.float64)
    j = np.arange(d_head // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * j / d_head)
    return positions[:, None] * inv_freq[None, :]


def apply_rope(vectors, positions, base=10000.0):
    """Rotate consecutive value pairs of each row by its position.

    ``vectors`` has shape (n, d_head) or (n, heads, d_head); pair ``j`` of
    row ``i`` is rotated by ``positions[i] * base ** (-2j / d_head)``.
    """
    x = as_matrix(vectors)
    d_head = x.shape[-1]
    if d_head % 2:
        raise DimensionError(f"rotary width must be even, got {d_head}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or len(positions) != x.shape[0]:
        raise DimensionError(
            f"{len(positions)} positions for {x.shape[0]} rows"
        )
    ang = rope_angles(positions, d_head, base)
    cos = np.cos(ang).astype(DTYPE)
    sin = np.sin(ang).astype(DTYPE)
    # broadcast over any head axes between rows and width
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (d_head // 2,)
    cos = cos.reshape(shape)
    sin = sin.reshape(shape)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_normalize(x, gain, epsilon=1e-5):
    """``gain * x / sqrt(mean(x**2) + epsilon)`` along the last axis."""
    x = as_matrix(x)
    if x.shape[-1] == 0:
        raise DimensionError("cannot normalize an empty row")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    denom = np.sqrt(ms + DTYPE(epsilon))
    # zero input with zero epsilon stays zero instead of becoming NaN
    denom = np.where(denom == 0, DTYPE(1), denom)
    return (as_matrix(gain) * (x / denom)).astype(DTYPE, copy=False)


def gelu(x):
    x = as_matrix(x)
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))
