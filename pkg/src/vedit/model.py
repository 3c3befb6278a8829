"""Dual-branch diffusion transformer over clip embeddings.

Observed ("seen") clips and noisy target clips run through separate
branches that share nothing but the attention call: queries, keys and
values from both branches are concatenated (target tokens first), rotated
by clip-index RoPE, attended jointly and split back.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .errors import OddHeadDim, PositionOutOfRange, ShapeMismatch, SigmaOutOfRange

LN_EPS = 1e-6


def timestep_features(sigma: torch.Tensor, freq_dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * sigma``, laid out as [cos | sin]."""
    half = freq_dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(sigma.dtype)
    args = (sigma * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        if sigma.numel() and (sigma.min() < 0 or sigma.max() > 1):
            raise SigmaOutOfRange(f"sigma outside [0, 1]: {sigma.tolist()}")
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_features(sigma.to(dtype), self.freq_dim))


class AdaLayerNormZero(nn.Module):
    """Layernorm modulated by the timestep embedding; six chunks, zero-initialised."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=LN_EPS)
        self.linear = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor):
        if x.shape[-1] != self.norm.normalized_shape[0] or emb.shape[-1] != x.shape[-1]:
            raise ShapeMismatch(f"x {tuple(x.shape)} / emb {tuple(emb.shape)}")
        mod = self.linear(F.silu(emb))[:, None, :]
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = mod.chunk(6, dim=-1)
        x = self.norm(x) * (1 + scale_msa) + shift_msa
        return x, gate_msa, shift_mlp, scale_mlp, gate_mlp


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved channel pairs of ``x`` (..., L, head_dim).

    Pair j of a token at position p turns by ``p * base**(-2j/head_dim)``.
    ``positions`` must broadcast against ``x.shape[:-1]``.
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise OddHeadDim(f"head_dim must be even, got {head_dim}")
    positions = torch.as_tensor(positions)
    if positions.numel() and positions.min() < 0:
        raise PositionOutOfRange("negative position")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64)[..., None] * inv_freq
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return out.flatten(-2)


class JointAttention(nn.Module):
    """Attention over [target tokens, seen tokens].

    ``mode`` selects the ablation variants: ``joint`` (separate projections,
    full attention), ``self`` (one shared projection set), ``cross`` (each
    branch attends only to the other branch).
    """

    def __init__(self, cfg: ModelConfig, mode: str = "joint"):
        super().__init__()
        self.heads, self.head_dim = cfg.attn_heads, cfg.head_dim
        self.max_len = cfg.max_len
        self.rope_base = cfg.rope_base
        self.mode = mode
        dim, inner = cfg.hidden_dim, cfg.attn_heads * cfg.head_dim
        self.to_q = nn.Linear(dim, inner)
        self.to_k = nn.Linear(dim, inner)
        self.to_v = nn.Linear(dim, inner)
        self.to_out = nn.Linear(inner, dim)
        if mode != "self":
            self.add_q = nn.Linear(dim, inner)
            self.add_k = nn.Linear(dim, inner)
            self.add_v = nn.Linear(dim, inner)
            self.add_out = nn.Linear(inner, dim)
        else:
            self.add_q, self.add_k, self.add_v, self.add_out = self.to_q, self.to_k, self.to_v, self.to_out

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, target_h, seen_h, target_pos, seen_pos):
        """Returns ``(seen_out, target_out)``; positions are per token, shape (B, L)."""
        if target_h.shape[0] != seen_h.shape[0] or target_h.shape[-1] != seen_h.shape[-1]:
            raise ShapeMismatch(f"target {tuple(target_h.shape)} vs seen {tuple(seen_h.shape)}")
        if target_pos.shape != target_h.shape[:2] or seen_pos.shape != seen_h.shape[:2]:
            raise ShapeMismatch("positions must be given per token")
        pos = torch.cat([target_pos, seen_pos], dim=1)
        if pos.numel() and pos.max() >= self.max_len:
            raise PositionOutOfRange(f"position {int(pos.max())} >= max_len={self.max_len}")

        n_target = target_h.shape[1]
        q = torch.cat([self.to_q(target_h), self.add_q(seen_h)], dim=1)
        k = torch.cat([self.to_k(target_h), self.add_k(seen_h)], dim=1)
        v = torch.cat([self.to_v(target_h), self.add_v(seen_h)], dim=1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        q = rope_rotate(q, pos[:, None, :], self.rope_base)
        k = rope_rotate(k, pos[:, None, :], self.rope_base)

        mask = None
        if self.mode == "cross":
            is_target = torch.arange(pos.shape[1]) < n_target
            mask = is_target[:, None] != is_target[None, :]
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        h = h.transpose(1, 2).flatten(2)
        target_out, seen_out = h[:, :n_target], h[:, n_target:]
        return self.add_out(seen_out), self.to_out(target_out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class VEDiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.norm1_target = AdaLayerNormZero(dim)
        self.norm2_target = nn.LayerNorm(dim, elementwise_affine=False, eps=LN_EPS)
        self.ff_target = FeedForward(dim)
        if cfg.attention == "self":
            self.norm1_seen, self.norm2_seen, self.ff_seen = self.norm1_target, self.norm2_target, self.ff_target
        else:
            self.norm1_seen = AdaLayerNormZero(dim)
            self.norm2_seen = nn.LayerNorm(dim, elementwise_affine=False, eps=LN_EPS)
            self.ff_seen = FeedForward(dim)
        self.attn = JointAttention(cfg, cfg.attention)

    def forward(self, target, seen, temb, target_pos, seen_pos):
        norm_target, t_gate_msa, t_shift_mlp, t_scale_mlp, t_gate_mlp = self.norm1_target(target, temb)
        norm_seen, s_gate_msa, s_shift_mlp, s_scale_mlp, s_gate_mlp = self.norm1_seen(seen, temb)

        seen_attn, target_attn = self.attn(norm_target, norm_seen, target_pos, seen_pos)

        target = target + t_gate_msa * target_attn
        h = self.norm2_target(target) * (1 + t_scale_mlp) + t_shift_mlp
        target = target + t_gate_mlp * self.ff_target(h)

        seen = seen + s_gate_msa * seen_attn
        h = self.norm2_seen(seen) * (1 + s_scale_mlp) + s_shift_mlp
        seen = seen + s_gate_mlp * self.ff_seen(h)
        return seen, target


class FinalLayer(nn.Module):
    def __init__(self, hidden_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=LN_EPS)
        self.modulation = nn.Linear(hidden_dim, 2 * hidden_dim)
        self.linear = nn.Linear(hidden_dim, out_dim)
        for layer in (self.modulation, self.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, temb):
        shift, scale = self.modulation(F.silu(temb))[:, None, :].chunk(2, dim=-1)
        return self.linear(self.norm(x) * (1 + scale) + shift)


class VEDiT(nn.Module):
    """Predicts the flow velocity ``eps - z0`` of every target clip."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.target_in = nn.Linear(cfg.token_dim, cfg.hidden_dim)
        self.seen_in = nn.Linear(cfg.token_dim, cfg.hidden_dim)
        self.t_embedder = TimestepEmbedder(cfg.hidden_dim, cfg.freq_dim)
        self.blocks = nn.ModuleList([VEDiTBlock(cfg) for _ in range(cfg.layers)])
        self.null_seen = nn.Parameter(torch.zeros(cfg.tokens_per_clip, cfg.token_dim))
        self.final = FinalLayer(cfg.hidden_dim, cfg.token_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for name, m in self.named_modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for blk in self.blocks:
            for m in (blk.norm1_target, blk.norm1_seen):
                nn.init.zeros_(m.linear.weight)
                nn.init.zeros_(m.linear.bias)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        nn.init.normal_(self.null_seen, std=0.02)
        for layer in (self.final.modulation, self.final.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def checkpoint_config(self) -> dict:
        return {"kind": "vedit", "model": self.config.to_dict()}

    def forward(self, target, seen, sigma, target_pos, seen_pos, drop=None):
        """
        target: (B, Nt, k, D) current noisy targets
        seen: (B, Ns, k, D) observed clips
        sigma: float or (B,) noise level
        target_pos, seen_pos: (B, Nt) / (B, Ns) clip indices
        drop: optional (B,) bool; True replaces every seen clip with the null embedding
        """
        cfg = self.config
        b, nt, k, d = target.shape
        ns = seen.shape[1]
        if (k, d) != (cfg.tokens_per_clip, cfg.token_dim) or seen.shape[2:] != (k, d) or seen.shape[0] != b:
            raise ShapeMismatch(f"target {tuple(target.shape)} / seen {tuple(seen.shape)} vs config (k={cfg.tokens_per_clip}, D={cfg.token_dim})")
        if drop is not None:
            seen = torch.where(drop[:, None, None, None], self.null_seen.expand_as(seen), seen)

        if not torch.is_tensor(sigma):
            sigma = torch.tensor(float(sigma), dtype=target.dtype)
        sigma = sigma.to(target.dtype).expand(b) if sigma.dim() == 0 else sigma.to(target.dtype)
        temb = self.t_embedder(sigma)

        tpos = torch.as_tensor(target_pos).repeat_interleave(k, dim=1)
        spos = torch.as_tensor(seen_pos).repeat_interleave(k, dim=1)
        t = self.target_in(target.reshape(b, nt * k, d))
        s = self.seen_in(seen.reshape(b, ns * k, d))
        for blk in self.blocks:
            s, t = blk(t, s, temb, tpos, spos)
        return self.final(t, temb).reshape(b, nt, k, d)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> VEDiT:
    """Deterministically initialised model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VEDiT(cfg)
    return model.to(dtype)
