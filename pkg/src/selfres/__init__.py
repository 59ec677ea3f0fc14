"""Self-reflective spatiotemporal token sampling on a toy decoder-only transformer."""

from .errors import (CalibrationError, ConfigError, ContractError, DimensionError,
                     DivisibilityError, RangeError, RequestError, SelfResError)
from .model import (KVCache, ModelConfig, Weights, WorkCounters, embed_tokens,
                    forward_range, greedy_decode, init_weights)
from .numerics import apply_rope, rms_normalize, row_softmax
from .pipeline import (ConvergencePlan, Execution, Mode, PositionStrategy, Prompt,
                       ReflectionPath, SaliencyTable, SegmentedSequence, assign_positions,
                       build_path_sequence, converge, run_pipeline, select_salient,
                       self_reflect, split_paths)
from .vision import (EventSpec, FrameSample, SyntheticVideo, encode_and_project,
                     generate_planted_video, sample_frames_uniform)

__version__ = "0.1.0"
