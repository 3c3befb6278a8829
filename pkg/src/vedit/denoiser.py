"""Iterative Euler denoising of target clips with classifier-free guidance."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch

from .core import ProcedureSample, split_positions, validate_sample
from .errors import EmptyTargetSet, InvalidConfig, NonFiniteValue
from .scheduler import euler_step, make_schedule

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class DenoiseConfig:
    steps: int = 24
    cfg_scale: float = 7.0
    track_gradients: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise InvalidConfig(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def _guard(x: torch.Tensor, step: int) -> None:
    if not bool(torch.isfinite(x).all()) or float(x.detach().abs().max()) > DIVERGENCE_LIMIT:
        raise NonFiniteValue(f"denoising diverged at step {step}")


def guided_velocity(model, current, seen, sigma, target_pos, seen_pos, scale, drop=None):
    """``v_uncond + scale * (v_cond - v_uncond)``; the unconditional pass is skipped at scale 1."""
    if scale == 1.0:
        return model(current, seen, sigma, target_pos, seen_pos, drop=drop)
    b = current.shape[0]
    cond_drop = torch.zeros(b, dtype=torch.bool) if drop is None else drop
    v = model(
        torch.cat([current, current]),
        torch.cat([seen, seen]),
        sigma,
        torch.cat([target_pos, target_pos]),
        torch.cat([seen_pos, seen_pos]),
        drop=torch.cat([cond_drop, torch.ones(b, dtype=torch.bool)]),
    )
    v_cond, v_uncond = v[:b], v[b:]
    return v_uncond + scale * (v_cond - v_uncond)


def denoise(model, seen, target_pos, seen_pos, dcfg: DenoiseConfig, generator=None, *, noise=None, drop=None):
    """Run ``dcfg.steps`` Euler steps from Gaussian noise to predicted target clips.

    ``model`` is any callable with the :class:`~vedit.model.VEDiT` signature.
    ``seen`` is (B, Ns, k, D) and is fed unchanged at every step. Returns
    (B, Nt, k, D).
    """
    target_pos = torch.as_tensor(target_pos)
    seen_pos = torch.as_tensor(seen_pos)
    if target_pos.shape[1] == 0:
        raise EmptyTargetSet("nothing to denoise")
    b, nt = target_pos.shape
    if noise is None:
        noise = torch.randn((b, nt) + tuple(seen.shape[2:]), generator=generator, dtype=seen.dtype)
    schedule = make_schedule(dcfg.steps)
    ctx = contextlib.nullcontext() if dcfg.track_gradients else torch.no_grad()
    current = noise
    with ctx:
        for i, (s_from, s_to) in enumerate(schedule.pairs()):
            v = guided_velocity(model, current, seen, s_from, target_pos, seen_pos, dcfg.cfg_scale, drop)
            current = euler_step(current, v, s_from, s_to)
            _guard(current, i)
    return current


def denoise_k(model, seen, target_pos, seen_pos, dcfg: DenoiseConfig, k: int, generator=None):
    """``k`` independent denoising runs; returns (k, B, Nt, kt, D)."""
    if k < 1:
        raise InvalidConfig(f"K must be >= 1, got {k}")
    return torch.stack([denoise(model, seen, target_pos, seen_pos, dcfg, generator) for _ in range(k)])


def _sample_inputs(sample: ProcedureSample, dtype):
    clips = torch.as_tensor(sample.array(), dtype=dtype)
    tpos, spos = split_positions(sample.target_mask)
    seen = clips[torch.as_tensor(spos)][None]
    return seen, torch.as_tensor(tpos)[None], torch.as_tensor(spos)[None]


def denoise_sample(sample: ProcedureSample, model, dcfg: DenoiseConfig, generator=None):
    """Denoise the target clips of a single sample; returns a list of (k, D) tensors."""
    validate_sample(sample, model.config)
    dtype = next(model.parameters()).dtype
    seen, tpos, spos = _sample_inputs(sample, dtype)
    out = denoise(model, seen, tpos, spos, dcfg, generator)
    return list(out[0])


def denoise_sample_k(sample: ProcedureSample, model, dcfg: DenoiseConfig, k: int, generator=None):
    validate_sample(sample, model.config)
    dtype = next(model.parameters()).dtype
    seen, tpos, spos = _sample_inputs(sample, dtype)
    out = denoise_k(model, seen, tpos, spos, dcfg, k, generator)
    return [list(c[0]) for c in out]
