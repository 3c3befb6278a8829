"""Shared data model: model configuration, procedure samples, seeding."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyTargetSet,
    InvalidConfig,
    NonFiniteValue,
    SequenceTooLong,
)

ATTENTION_MODES = ("joint", "self", "cross")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden_dim: int = 64
    attn_heads: int = 4
    head_dim: int = 16
    max_len: int = 9
    rope_base: float = 10000.0
    token_dim: int = 32
    tokens_per_clip: int = 1
    freq_dim: int = 256
    attention: str = "joint"

    def __post_init__(self):
        if self.layers < 1:
            raise InvalidConfig(f"layers must be >= 1, got {self.layers}")
        if self.attn_heads * self.head_dim != self.hidden_dim:
            raise InvalidConfig(
                f"attn_heads*head_dim ({self.attn_heads}*{self.head_dim}) != hidden_dim ({self.hidden_dim})"
            )
        if self.head_dim % 2:
            raise InvalidConfig(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.token_dim < 2 or self.token_dim % 2:
            raise InvalidConfig(f"token_dim must be even and >= 2, got {self.token_dim}")
        if self.tokens_per_clip < 1:
            raise InvalidConfig("tokens_per_clip must be >= 1")
        if self.max_len < 1:
            raise InvalidConfig("max_len must be >= 1")
        if self.freq_dim < 2 or self.freq_dim % 2:
            raise InvalidConfig("freq_dim must be even")
        if self.attention not in ATTENTION_MODES:
            raise InvalidConfig(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# Architecture table used for the scaling runs: name -> (layers, hidden, heads, head_dim).
SCALES = {
    "single-1280": (1, 1280, 20, 64),
    "tiny-1280": (3, 1280, 20, 64),
    "small-1280": (6, 1280, 20, 64),
    "large-1280": (12, 1280, 20, 64),
    "xl-1280": (18, 1280, 20, 64),
    "single-2048": (1, 2048, 32, 64),
    "tiny-2048": (3, 2048, 32, 64),
    "small-2048": (6, 2048, 32, 64),
    "medium-2048": (9, 2048, 32, 64),
    "large-2048": (12, 2048, 32, 64),
}


@dataclass(frozen=True, eq=False)
class ProcedureSample:
    """One procedural video as a sequence of clip embeddings.

    ``clips`` holds N arrays of shape (k, D); ``target_mask[i]`` is True for
    clips the model must predict and False for observed ones.
    """

    clips: tuple
    step_labels: tuple
    task_label: int
    target_mask: tuple

    def __post_init__(self):
        clips = []
        for c in self.clips:
            a = np.array(c, dtype=np.float32)
            a.setflags(write=False)
            clips.append(a)
        object.__setattr__(self, "clips", tuple(clips))
        object.__setattr__(self, "step_labels", tuple(int(x) for x in self.step_labels))
        object.__setattr__(self, "task_label", int(self.task_label))
        object.__setattr__(self, "target_mask", tuple(bool(x) for x in self.target_mask))

    def __len__(self):
        return len(self.clips)

    def __eq__(self, other):
        if not isinstance(other, ProcedureSample):
            return NotImplemented
        return (
            self.step_labels == other.step_labels
            and self.task_label == other.task_label
            and self.target_mask == other.target_mask
            and len(self.clips) == len(other.clips)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.clips, other.clips))
        )

    __hash__ = None

    def array(self) -> np.ndarray:
        """Stack the clips into an (N, k, D) array."""
        return np.stack(self.clips)

    @property
    def seen_indices(self) -> tuple:
        return tuple(i for i, m in enumerate(self.target_mask) if not m)

    @property
    def target_indices(self) -> tuple:
        return tuple(i for i, m in enumerate(self.target_mask) if m)


def validate_sample(s: ProcedureSample, c: ModelConfig, require_target: bool = True) -> None:
    n = len(s.clips)
    if n == 0:
        raise EmptyTargetSet("sample has no clips")
    if len(s.step_labels) != n or len(s.target_mask) != n:
        raise DimensionMismatch(
            f"{n} clips but {len(s.step_labels)} step labels and {len(s.target_mask)} mask entries"
        )
    want = (c.tokens_per_clip, c.token_dim)
    for i, clip in enumerate(s.clips):
        if clip.shape != want:
            raise DimensionMismatch(f"clip {i} has shape {clip.shape}, expected {want}")
        if not np.isfinite(clip).all():
            raise NonFiniteValue(f"clip {i} contains NaN or Inf")
    if require_target:
        if not any(s.target_mask):
            raise EmptyTargetSet("no target clips to denoise")
        if all(s.target_mask):
            raise EmptyTargetSet("no observed clips to condition on")
    if n > c.max_len:
        raise SequenceTooLong(f"sequence of {n} clips exceeds max_len={c.max_len}")


def split_positions(target_mask: Sequence[bool]) -> tuple[np.ndarray, np.ndarray]:
    """Clip indices of (target, seen) clips, each in temporal order."""
    m = np.asarray(target_mask, dtype=bool)
    idx = np.arange(m.size)
    return idx[m], idx[~m]


def token_positions(clip_positions, tokens_per_clip: int) -> np.ndarray:
    """Every token of a clip carries that clip's index."""
    return np.repeat(np.asarray(clip_positions), tokens_per_clip, axis=-1)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed, giving an independent 63-bit stream id."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, *keys: int):
    import torch

    return torch.Generator().manual_seed(derive_seed(seed, *keys))
