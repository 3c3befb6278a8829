"""Attentive-pooler classifiers: one learned query cross-attends to a token set."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import InvalidConfig, ShapeMismatch

PREFIX_DEPTH = 3


@dataclass(frozen=True)
class HeadConfig:
    dim: int
    num_classes: int
    heads: int = 1
    deep: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise InvalidConfig(f"pooler dim {self.dim} not divisible by {self.heads} heads")
        if self.num_classes < 1:
            raise InvalidConfig("num_classes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class AttentivePooler(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.config = cfg
        dim = cfg.dim
        self.heads = cfg.heads
        self.blocks = nn.ModuleList(
            [SelfAttentionBlock(dim, cfg.heads) for _ in range(PREFIX_DEPTH if cfg.deep else 0)]
        )
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.linear = nn.Linear(dim, cfg.num_classes)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        """(B, tokens, dim) -> (B, dim)."""
        if x.dim() != 3 or x.shape[-1] != self.config.dim or x.shape[1] < 1:
            raise ShapeMismatch(f"expected (B, tokens>=1, {self.config.dim}), got {tuple(x.shape)}")
        for blk in self.blocks:
            x = blk(x)
        b, n, d = x.shape
        h, hd = self.heads, d // self.heads
        q = self.q(self.query).expand(b, 1, d).view(b, 1, h, hd).transpose(1, 2)
        k = self.k(x).view(b, n, h, hd).transpose(1, 2)
        v = self.v(x).view(b, n, h, hd).transpose(1, 2)
        # explicit softmax: with a single token the weight is exactly 1, so the
        # query path gets an exactly-zero gradient instead of kernel roundoff
        attn = torch.softmax(q @ k.transpose(-2, -1) / hd**0.5, dim=-1)
        pooled = (attn @ v).transpose(1, 2).reshape(b, d)
        return self.out(pooled)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(self.pool(x))


def attentive_pool(x: torch.Tensor, pooler: AttentivePooler) -> torch.Tensor:
    """Logits for a single (tokens, D) input."""
    return pooler(x[None])[0]


def pool_multi(clips, pooler: AttentivePooler) -> torch.Tensor:
    """Pool the tokens of several (k, D) clips as one set."""
    if len(clips) == 0:
        raise ShapeMismatch("pool_multi needs at least one clip")
    return attentive_pool(torch.cat(list(clips), dim=0), pooler)
