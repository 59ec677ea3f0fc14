"""Synthetic videos with a planted spatiotemporal event.

A video is a ``frames x patches x d_V`` grid of unit Gaussian features. The
event adds ``bias * direction`` to every cell inside an inclusive frame range
and patch range. The vision encoder is the identity on these features; the
only learned map is the model's ``vision_proj``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, RangeError
from .numerics import DTYPE, as_matrix


@dataclass(frozen=True)
class EventSpec:
    frame_range: tuple
    patch_range: tuple
    direction: tuple
    bias: float = 0.0

    def __post_init__(self):
        a, b = self.frame_range
        c, e = self.patch_range
        if a > b or c > e:
            raise RangeError(f"empty event range {self.frame_range} x {self.patch_range}")
        u = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(u)
        if u.ndim != 1 or norm == 0:
            raise RangeError("event direction must be a nonzero vector")
        object.__setattr__(self, "frame_range", (int(a), int(b)))
        object.__setattr__(self, "patch_range", (int(c), int(e)))
        object.__setattr__(self, "direction", tuple(float(x) for x in u / norm))
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def cell_count(self):
        a, b = self.frame_range
        c, e = self.patch_range
        return (b - a + 1) * (e - c + 1)

    def contains(self, frame, patch):
        a, b = self.frame_range
        c, e = self.patch_range
        return (a <= frame) & (frame <= b) & (c <= patch) & (patch <= e)

    def with_bias(self, bias):
        return EventSpec(self.frame_range, self.patch_range, self.direction, bias)

    def to_dict(self):
        return {
            "frame_range": list(self.frame_range),
            "patch_range": list(self.patch_range),
            "direction": list(self.direction),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["frame_range"]), tuple(data["patch_range"]),
                   tuple(data["direction"]), data.get("bias", 0.0))


@dataclass(frozen=True)
class SyntheticVideo:
    num_frames: int
    patches_per_frame: int
    vision_dim: int
    event: EventSpec
    seed: int
    features: np.ndarray = field(repr=False, compare=False)

    def event_mask(self):
        f = np.arange(self.num_frames)[:, None]
        p = np.arange(self.patches_per_frame)[None, :]
        return self.event.contains(f, p)

    def to_spec_dict(self):
        """JSON-ready description; features are regenerated from the seed."""
        return {
            "num_frames": self.num_frames,
            "patches_per_frame": self.patches_per_frame,
            "vision_dim": self.vision_dim,
            "event": self.event.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_spec_dict(cls, data):
        return generate_planted_video(
            data["seed"], data["num_frames"], data["patches_per_frame"],
            data["vision_dim"], EventSpec.from_dict(data["event"]),
        )


@dataclass(frozen=True)
class FrameSample:
    indices: tuple

    def __len__(self):
        return len(self.indices)


def sample_frames_uniform(video_len, T):
    """Linear sampling: ``floor(i * video_len / T)`` for ``i < T``."""
    if not 1 <= T <= video_len:
        raise RangeError(f"cannot sample {T} frames from a video of {video_len}")
    return FrameSample(tuple((i * video_len) // T for i in range(T)))


def generate_planted_video(seed, num_frames, patches, vision_dim, event):
    a, b = event.frame_range
    c, e = event.patch_range
    if not (0 <= a and b < num_frames and 0 <= c and e < patches):
        raise RangeError(
            f"event {event.frame_range} x {event.patch_range} outside "
            f"{num_frames} frames x {patches} patches"
        )
    if len(event.direction) != vision_dim:
        raise DimensionError(f"direction has {len(event.direction)} dims, expected {vision_dim}")
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((num_frames, patches, vision_dim)).astype(DTYPE)
    if event.bias != 0.0:
        shift = (event.bias * np.asarray(event.direction)).astype(DTYPE)
        feats[a:b + 1, c:e + 1] += shift
    feats.setflags(write=False)
    return SyntheticVideo(num_frames, patches, vision_dim, event, int(seed), feats)


@dataclass(frozen=True)
class VisualTokens:
    """Projected visual tokens in frame-major order with their origin."""

    embeddings: np.ndarray   # (T * patches) x d
    frames: np.ndarray       # source video frame of each token
    slots: np.ndarray        # index of the frame within the sample, 0..T-1
    patches: np.ndarray

    def __len__(self):
        return self.embeddings.shape[0]

    def take(self, rows):
        return VisualTokens(self.embeddings[rows], self.frames[rows],
                            self.slots[rows], self.patches[rows])


def encode_and_project(video, sample, weights):
    idx = np.asarray(sample.indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= video.num_frames:
        raise RangeError("frame sample does not fit the video")
    if np.any(np.diff(idx) <= 0):
        raise RangeError("frame sample must be strictly increasing")
    P = video.patches_per_frame
    feats = video.features[idx].reshape(len(idx) * P, video.vision_dim)
    emb = as_matrix(feats @ weights.vision_proj)
    return VisualTokens(
        embeddings=emb,
        frames=np.repeat(idx, P),
        slots=np.repeat(np.arange(len(idx)), P),
        patches=np.tile(np.arange(P), len(idx)),
    )
