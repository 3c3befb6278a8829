"""Training objectives, learning-rate schedule, and a finite-difference gradient check."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import derive_seed, torch_generator
from .data import ProcedureDataset
from .denoiser import DenoiseConfig, denoise
from .errors import InvalidConfig, NonFiniteLoss
from .pipeline import Batch, Predictor, TaskSpec, make_batch, make_recon_batch

SCHEDULES = ("warmup-cosine", "warmup-constant")
OBJECTIVES = ("cross-entropy", "masked-reconstruction")


@dataclass(frozen=True)
class TrainConfig:
    # desk-scale defaults; the full-size recipes are the coin() / pretrain() presets
    epochs: int = 30
    batch_size: int = 32
    lr_warmup_start: float = 2e-4
    lr_peak: float = 2e-3
    lr_final: float = 1e-5
    warmup_epochs: float = 1.0
    schedule: str = "warmup-cosine"
    objective: str = "cross-entropy"
    cfg_drop_prob: float = 0.1
    steps: int = 24
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0 < self.lr_warmup_start <= self.lr_peak:
            raise InvalidConfig("need 0 < lr_warmup_start <= lr_peak")
        if self.lr_final > self.lr_peak:
            raise InvalidConfig("lr_final must not exceed lr_peak")
        if self.schedule not in SCHEDULES:
            raise InvalidConfig(f"schedule must be one of {SCHEDULES}")
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}")
        if self.epochs < 1 or self.batch_size < 1 or self.steps < 1:
            raise InvalidConfig("epochs, batch_size and steps must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise InvalidConfig("warmup_epochs must lie in [0, epochs]")
        if not 0 <= self.cfg_drop_prob <= 1:
            raise InvalidConfig("cfg_drop_prob must lie in [0, 1]")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def coin(cls, **kw) -> "TrainConfig":
        """Downstream recipe: 5e-6 -> 5e-5 over 3 epochs, cosine to 5e-7, 30 epochs."""
        base = dict(epochs=30, lr_warmup_start=5e-6, lr_peak=5e-5, lr_final=5e-7, warmup_epochs=3.0)
        return cls(**{**base, **kw})

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        """Masked-clip pretraining: 1e-5 -> 1e-4 over half an epoch, then constant."""
        base = dict(
            epochs=30,
            lr_warmup_start=1e-5,
            lr_peak=1e-4,
            lr_final=1e-4,
            warmup_epochs=0.5,
            schedule="warmup-constant",
            objective="masked-reconstruction",
        )
        return cls(**{**base, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    warmup = total_steps * cfg.warmup_epochs / cfg.epochs
    if step < warmup:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * step / warmup
    if cfg.schedule == "warmup-constant" or total_steps <= warmup:
        return cfg.lr_peak
    progress = min((step - warmup) / (total_steps - warmup), 1.0)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(module: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        module.parameters(), lr=cfg.lr_warmup_start, betas=cfg.betas, weight_decay=cfg.weight_decay
    )


def _apply(optimizer, module, loss, lr, grad_clip):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(module.parameters(), grad_clip)
    optimizer.step()


def ce_loss(predictor: Predictor, batch: Batch, dcfg: DenoiseConfig, generator=None, drop_prob: float = 0.0, noise=None):
    """Mean cross-entropy over target slots, differentiated through every denoising step."""
    dcfg = replace(dcfg, track_gradients=True)
    logits = predictor(batch, dcfg, generator, drop_prob=drop_prob, noise=noise)
    return F.cross_entropy(logits.flatten(0, 1), batch.labels.flatten())


def recon_loss(model, batch: Batch, dcfg: DenoiseConfig, generator=None, drop_prob: float = 0.0):
    dcfg = replace(dcfg, track_gradients=True)
    drop = None
    if drop_prob > 0:
        drop = torch.rand(len(batch), generator=generator) < drop_prob
    z = denoise(model, batch.seen, batch.target_pos, batch.seen_pos, dcfg, generator, drop=drop)
    return F.mse_loss(z, batch.target)


def ce_train_step(predictor, optimizer, batch, tcfg: TrainConfig, dcfg: DenoiseConfig, generator, lr: float) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = ce_loss(predictor, batch, dcfg, generator, tcfg.cfg_drop_prob)
    _apply(optimizer, predictor, loss, lr, tcfg.grad_clip)
    return float(loss.detach())


def masked_recon_step(model, optimizer, batch, tcfg: TrainConfig, dcfg: DenoiseConfig, generator, lr: float) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = recon_loss(model, batch, dcfg, generator, tcfg.cfg_drop_prob)
    _apply(optimizer, model, loss, lr, tcfg.grad_clip)
    return float(loss.detach())


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    last_loss: float
    seconds: float
    extra: dict = field(default_factory=dict)


def fit(
    module: nn.Module,
    train: ProcedureDataset,
    tcfg: TrainConfig,
    dcfg: DenoiseConfig,
    seed: int = 0,
    task: TaskSpec | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 0,
    log_path=None,
    on_epoch: Callable[[EpochStats], bool] | None = None,
) -> list[EpochStats]:
    """Train ``module`` (a Predictor for CE, a VEDiT for masked reconstruction).

    Batch order and noise depend only on (seed, epoch, batch index), so a run
    resumed at an epoch boundary continues exactly as the uninterrupted run
    would. ``on_epoch`` may return True to stop early.
    """
    if optimizer is None:
        optimizer = make_optimizer(module, tcfg)
    dtype = next(module.parameters()).dtype
    dcfg = DenoiseConfig(tcfg.steps, dcfg.cfg_scale, track_gradients=True)
    per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total = per_epoch * tcfg.epochs
    recon = tcfg.objective == "masked-reconstruction"
    if not recon and task is None:
        task = module.task

    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if log_file.tell() == 0:
            writer.writerow(["step", "lr", "loss", "wallclock_ms"])

    history = []
    t0 = time.perf_counter()
    module.train()
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            order = np.random.default_rng(derive_seed(seed, 1, epoch)).permutation(len(train))
            losses = []
            e0 = time.perf_counter()
            for b in range(per_epoch):
                idx = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
                step = epoch * per_epoch + b
                lr = lr_at(step, total, tcfg)
                gen = torch_generator(seed, 2, epoch, b)
                if recon:
                    pick = np.random.default_rng(derive_seed(seed, 3, epoch, b)).integers(train.seq_len, size=len(idx))
                    batch = make_recon_batch(train, idx, pick, dtype)
                    loss = masked_recon_step(module, optimizer, batch, tcfg, dcfg, gen, lr)
                else:
                    batch = make_batch(train, idx, task, dtype)
                    loss = ce_train_step(module, optimizer, batch, tcfg, dcfg, gen, lr)
                losses.append(loss)
                if writer:
                    writer.writerow([step, f"{lr:.6e}", f"{loss:.6f}", int((time.perf_counter() - t0) * 1000)])
            stats = EpochStats(epoch, float(np.mean(losses)), losses[-1], time.perf_counter() - e0)
            history.append(stats)
            if log_file:
                log_file.flush()
            if on_epoch is not None and on_epoch(stats):
                break
    finally:
        if log_file:
            log_file.close()
    return history


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error over checked entries
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self) -> dict:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}


def grad_check(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float,
    step: float | None = None,
    max_entries: int = 12,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central differences for every parameter tensor.

    ``loss_fn`` must be deterministic (fixed noise). Tensors with more than
    ``max_entries`` elements are probed at a random subset of entries.
    """
    dtype = next(module.parameters()).dtype
    if step is None:
        step = 1e-3 if dtype == torch.float64 else 1e-2
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            flat = p.view(-1)
            n = flat.numel()
            picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
            worst = 0.0
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                a = analytic.view(-1)[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            errors[name] = worst
    return GradCheckReport(errors, tolerance)


@torch.no_grad()
def randomize_(module: nn.Module, std: float = 0.3, seed: int = 0) -> nn.Module:
    """Overwrite every parameter with N(0, std^2); breaks the zero-init identity for testing."""
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return module
