"""Paired-seed sweeps over attention variant, denoising steps and depth."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ModelConfig
from .data import SyntheticConfig, gen_synthetic
from .denoiser import DenoiseConfig
from .errors import UnknownSweepAxis
from .heads import HeadConfig
from .pipeline import TaskSpec, build_predictor, evaluate
from .training import TrainConfig, fit

AXES = {
    "attention": ("joint", "self", "cross"),
    "steps": (1, 4, 12, 20, 24, 36, 44),
    "layers": (1, 3, 6, 12),
}

FIELDS = (
    "axis",
    "value",
    "seeds",
    "val_top1_mean",
    "val_top1_per_seed",
    "final_train_loss_mean",
    "wallclock_s_mean",
)


def _ablation_data() -> SyntheticConfig:
    return SyntheticConfig(train_samples=1000, val_samples=200)


def _ablation_train() -> TrainConfig:
    return TrainConfig(epochs=5, batch_size=32, warmup_epochs=1.0)


@dataclass(frozen=True)
class AblationConfig:
    axis: str
    values: tuple = ()  # empty: every value of the axis
    seeds: tuple = (0, 1, 2)
    data: SyntheticConfig = field(default_factory=_ablation_data)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=_ablation_train)
    cfg_scale: float = 7.0
    task: TaskSpec = field(default_factory=TaskSpec)

    def __post_init__(self):
        if self.axis not in AXES:
            raise UnknownSweepAxis(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        values = tuple(self.values) or AXES[self.axis]
        bad = [v for v in values if v not in AXES[self.axis]]
        if bad:
            raise UnknownSweepAxis(f"values {bad} not in the {self.axis} sweep {AXES[self.axis]}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "seeds", tuple(self.seeds))


def _variant(cfg: AblationConfig, value):
    model, train = cfg.model, cfg.train
    if cfg.axis == "attention":
        model = replace(model, attention=value)
    elif cfg.axis == "layers":
        model = replace(model, layers=value)
    else:
        train = replace(train, steps=value)
    return model, train


def run_ablation(cfg: AblationConfig, out_csv=None, progress=None) -> list[dict]:
    """Train and evaluate every sweep value under each seed; one row per value.

    Seeds are paired: value A and value B under seed s share data, batch
    order and noise draws, so differences come from the swept setting.
    """
    train_ds, val_ds = gen_synthetic(cfg.data)
    model0 = replace(cfg.model, token_dim=cfg.data.dim, tokens_per_clip=cfg.data.tokens_per_clip)
    cfg = replace(cfg, model=model0)
    head = HeadConfig(cfg.data.dim, cfg.task.num_classes(train_ds))
    rows = []
    for value in cfg.values:
        mcfg, tcfg = _variant(cfg, value)
        dcfg = DenoiseConfig(tcfg.steps, cfg.cfg_scale)
        accs, losses, secs = [], [], []
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            predictor = build_predictor(mcfg, head, cfg.task, seed=seed)
            hist = fit(predictor, train_ds, tcfg, dcfg, seed=seed)
            secs.append(time.perf_counter() - t0)
            accs.append(evaluate(predictor, val_ds, dcfg, seed=seed)["top1"])
            losses.append(hist[-1].mean_loss)
            if progress:
                progress(f"{cfg.axis}={value} seed={seed} top1={accs[-1]:.4f} loss={losses[-1]:.4f} {secs[-1]:.1f}s")
        rows.append(
            {
                "axis": cfg.axis,
                "value": value,
                "seeds": ";".join(map(str, cfg.seeds)),
                "val_top1_mean": float(np.mean(accs)),
                "val_top1_per_seed": ";".join(f"{a:.4f}" for a in accs),
                "final_train_loss_mean": float(np.mean(losses)),
                "wallclock_s_mean": float(np.mean(secs)),
            }
        )
    if out_csv is not None:
        write_rows(rows, out_csv)
    return rows


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
