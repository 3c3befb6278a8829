"""Rectified-flow noising and the Euler sampler over a discrete sigma grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfig, InvalidSteps, NonDecreasingSigma, ShapeMismatch, SigmaOutOfRange


@dataclass(frozen=True)
class SchedulerConfig:
    steps: int = 24
    spacing: str = "linear"
    shift: float = 1.0

    def __post_init__(self):
        if self.spacing != "linear":
            raise InvalidConfig(f"unsupported spacing {self.spacing!r}")
        if self.shift != 1.0:
            raise InvalidConfig("only shift=1.0 is supported")


@dataclass(frozen=True)
class SigmaSchedule:
    steps: int
    sigmas: tuple

    def __len__(self):
        return len(self.sigmas)

    def pairs(self):
        """(sigma_from, sigma_to) for each denoising step."""
        return list(zip(self.sigmas[:-1], self.sigmas[1:]))


def make_schedule(cfg: SchedulerConfig | int) -> SigmaSchedule:
    steps = cfg if isinstance(cfg, int) else cfg.steps
    if steps < 1:
        raise InvalidSteps(f"need at least one denoising step, got {steps}")
    sigmas = tuple(1.0 - i / steps for i in range(steps))
    return SigmaSchedule(steps, sigmas + (0.0,))


def _check_sigma(sigma: float) -> None:
    if not 0.0 <= sigma <= 1.0:
        raise SigmaOutOfRange(f"sigma={sigma} outside [0, 1]")


def forward_interpolate(z0: torch.Tensor, eps: torch.Tensor, sigma: float) -> torch.Tensor:
    """Point on the straight path from data ``z0`` (sigma=0) to noise ``eps`` (sigma=1)."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    _check_sigma(sigma)
    return (1.0 - sigma) * z0 + sigma * eps


def euler_step(sample: torch.Tensor, velocity: torch.Tensor, sigma_from: float, sigma_to: float) -> torch.Tensor:
    if sample.shape != velocity.shape:
        raise ShapeMismatch(f"sample {tuple(sample.shape)} vs velocity {tuple(velocity.shape)}")
    if not sigma_to < sigma_from:
        raise NonDecreasingSigma(f"sigma must decrease, got {sigma_from} -> {sigma_to}")
    return sample + (sigma_to - sigma_from) * velocity


def sample_training_sigma(schedule: SigmaSchedule, rng: np.random.Generator) -> float:
    """Uniform draw from the T grid points that precede the final zero."""
    return schedule.sigmas[int(rng.integers(schedule.steps))]
