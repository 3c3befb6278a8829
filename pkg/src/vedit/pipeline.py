"""Task wiring: which clips are targets, batching, and denoise-then-classify."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .core import ModelConfig, derive_seed, torch_generator
from .data import ProcedureDataset
from .denoiser import DenoiseConfig, denoise
from .errors import InvalidConfig, SequenceTooLong, TaskHeadMismatch
from .heads import AttentivePooler, HeadConfig
from .model import VEDiT

TASKS = ("forecast", "plan", "task-classify", "anticipate")


@dataclass(frozen=True)
class TaskSpec:
    """``horizon`` applies to planning, ``future`` (Z) to anticipation."""

    task: str = "forecast"
    horizon: int = 3
    future: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfig(f"task must be one of {TASKS}, got {self.task!r}")
        if self.horizon < 1 or self.future < 1:
            raise InvalidConfig("horizon and future must be >= 1")

    def window(self, n: int) -> int:
        """Number of dataset clips a sample contributes."""
        if self.task == "plan":
            if self.horizon + 2 > n:
                raise SequenceTooLong(f"planning horizon {self.horizon} needs {self.horizon + 2} clips, samples have {n}")
            return self.horizon + 2
        if self.task == "anticipate" and self.future >= n:
            raise SequenceTooLong(f"cannot anticipate Z={self.future} of {n} clips with at least one observed")
        if self.task == "forecast" and n < 2:
            raise SequenceTooLong("forecasting needs at least two clips")
        return n

    def target_mask(self, n: int) -> np.ndarray:
        """Mask over slot positions; task classification adds one slot after the sequence."""
        w = self.window(n)
        if self.task == "task-classify":
            return np.array([False] * n + [True])
        mask = np.zeros(w, dtype=bool)
        if self.task == "forecast":
            mask[-1] = True
        elif self.task == "anticipate":
            mask[-self.future :] = True
        else:
            mask[1:-1] = True
        return mask

    def slots(self, n: int) -> int:
        return len(self.target_mask(n))

    def num_classes(self, ds: ProcedureDataset) -> int:
        return ds.num_tasks if self.task == "task-classify" else ds.num_steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    seen: torch.Tensor  # (B, Ns, k, D)
    target: torch.Tensor  # (B, Nt, k, D) ground truth; zeros for the task slot
    seen_pos: torch.Tensor  # (B, Ns)
    target_pos: torch.Tensor  # (B, Nt)
    labels: torch.Tensor  # (B, Nt)

    def __len__(self):
        return self.seen.shape[0]


def make_batch(ds: ProcedureDataset, idx, spec: TaskSpec, dtype=torch.float32, seen_from=None) -> Batch:
    """Gather samples ``idx``; ``seen_from`` optionally supplies observed clips from other samples."""
    idx = np.asarray(idx)
    src = idx if seen_from is None else np.asarray(seen_from)
    n = ds.seq_len
    mask = spec.target_mask(n)
    b = len(idx)
    if spec.task == "task-classify":
        seen = ds.clips[src]
        target = np.zeros((b, 1) + ds.clips.shape[2:], dtype=np.float32)
        labels = ds.task_labels[idx][:, None]
    else:
        w = len(mask)
        seen = ds.clips[src, :w][:, ~mask]
        target = ds.clips[idx, :w][:, mask]
        labels = ds.step_labels[idx, :w][:, mask]
    pos = np.arange(len(mask))
    return Batch(
        seen=torch.from_numpy(np.ascontiguousarray(seen)).to(dtype),
        target=torch.from_numpy(np.ascontiguousarray(target)).to(dtype),
        seen_pos=torch.from_numpy(np.tile(pos[~mask], (b, 1))),
        target_pos=torch.from_numpy(np.tile(pos[mask], (b, 1))),
        labels=torch.from_numpy(np.ascontiguousarray(labels)),
    )


def make_recon_batch(ds: ProcedureDataset, idx, target_clip, dtype=torch.float32) -> Batch:
    """Masked-clip batch: clip ``target_clip[i]`` of sample ``idx[i]`` is hidden."""
    idx, target_clip = np.asarray(idx), np.asarray(target_clip)
    b, n = len(idx), ds.seq_len
    mask = np.zeros((b, n), dtype=bool)
    mask[np.arange(b), target_clip] = True
    clips = ds.clips[idx]
    pos = np.tile(np.arange(n), (b, 1))
    return Batch(
        seen=torch.from_numpy(clips[~mask].reshape((b, n - 1) + clips.shape[2:])).to(dtype),
        target=torch.from_numpy(clips[mask].reshape((b, 1) + clips.shape[2:])).to(dtype),
        seen_pos=torch.from_numpy(pos[~mask].reshape(b, n - 1)),
        target_pos=torch.from_numpy(pos[mask].reshape(b, 1)),
        labels=torch.from_numpy(ds.step_labels[idx][mask].reshape(b, 1)),
    )


class Predictor(nn.Module):
    """VEDiT plus an attentive classifier applied to every denoised target clip."""

    def __init__(self, model_cfg: ModelConfig, head_cfg: HeadConfig, task: TaskSpec):
        super().__init__()
        if head_cfg.dim != model_cfg.token_dim:
            raise InvalidConfig("classifier width must equal the embedding dim")
        self.task = task
        self.vedit = VEDiT(model_cfg)
        self.head = AttentivePooler(head_cfg)

    @property
    def config(self) -> ModelConfig:
        return self.vedit.config

    def checkpoint_config(self) -> dict:
        return {
            "kind": "predictor",
            "model": self.vedit.config.to_dict(),
            "head": self.head.config.to_dict(),
            "task": self.task.to_dict(),
        }

    @classmethod
    def from_config(cls, config: dict) -> "Predictor":
        return cls(
            ModelConfig.from_dict(config["model"]),
            HeadConfig(**config["head"]),
            TaskSpec(**config["task"]),
        )

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        """(B, Nt, k, D) embeddings -> (B, Nt, C) logits."""
        b, nt = z.shape[:2]
        return self.head(z.flatten(0, 1)).view(b, nt, -1)

    def forward(self, batch: Batch, dcfg: DenoiseConfig, generator=None, drop_prob: float = 0.0, noise=None):
        drop = None
        if drop_prob > 0:
            drop = torch.rand(len(batch), generator=generator) < drop_prob
        z = denoise(self.vedit, batch.seen, batch.target_pos, batch.seen_pos, dcfg, generator, noise=noise, drop=drop)
        return self.classify(z)


def build_predictor(model_cfg: ModelConfig, head_cfg: HeadConfig, task: TaskSpec, seed: int = 0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        p = Predictor(model_cfg, head_cfg, task)
    return p.to(dtype)


def check_compatible(predictor: Predictor, ds: ProcedureDataset, spec: TaskSpec) -> None:
    cfg = predictor.config
    if (ds.tokens_per_clip, ds.dim) != (cfg.tokens_per_clip, cfg.token_dim):
        raise TaskHeadMismatch(
            f"data has k={ds.tokens_per_clip}, D={ds.dim}; model expects k={cfg.tokens_per_clip}, D={cfg.token_dim}"
        )
    if spec.slots(ds.seq_len) > cfg.max_len:
        raise SequenceTooLong(f"task needs {spec.slots(ds.seq_len)} positions, max_len={cfg.max_len}")
    if predictor.head.config.num_classes != spec.num_classes(ds):
        raise TaskHeadMismatch(
            f"head has {predictor.head.config.num_classes} classes, task {spec.task!r} needs {spec.num_classes(ds)}"
        )


def shuffled_sources(n: int, seed: int) -> np.ndarray:
    """A permutation with no fixed points: sample i borrows observed clips from another sample."""
    order = np.random.default_rng(derive_seed(seed, 7)).permutation(n)
    src = np.empty(n, dtype=np.int64)
    src[order] = np.roll(order, 1)
    return src


@torch.no_grad()
def predict_labels(
    predictor: Predictor,
    ds: ProcedureDataset,
    dcfg: DenoiseConfig,
    seed: int = 0,
    k: int = 1,
    batch_size: int = 250,
    spec: TaskSpec | None = None,
    seen_from=None,
):
    """Predicted labels, shape (S, K, Nt); ground truth, shape (S, Nt)."""
    spec = spec or predictor.task
    check_compatible(predictor, ds, spec)
    dtype = next(predictor.parameters()).dtype
    dcfg = DenoiseConfig(dcfg.steps, dcfg.cfg_scale, track_gradients=False)
    was_training = predictor.training
    predictor.eval()
    preds, gts = [], []
    for bi, start in enumerate(range(0, len(ds), batch_size)):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        src = None if seen_from is None else np.asarray(seen_from)[idx]
        batch = make_batch(ds, idx, spec, dtype, seen_from=src)
        gen = torch_generator(seed, 11, bi)
        cands = [predictor(batch, dcfg, gen).argmax(-1) for _ in range(k)]
        preds.append(torch.stack(cands, dim=1).numpy())
        gts.append(batch.labels.numpy())
    predictor.train(was_training)
    return np.concatenate(preds), np.concatenate(gts)


def evaluate(
    predictor: Predictor,
    ds: ProcedureDataset,
    dcfg: DenoiseConfig,
    seed: int = 0,
    k: int = 5,
    spec: TaskSpec | None = None,
    shuffle_conditioning: bool = False,
    batch_size: int = 250,
) -> dict:
    """Task-appropriate metrics; ``k`` candidates are drawn only for anticipation."""
    spec = spec or predictor.task
    seen_from = shuffled_sources(len(ds), seed) if shuffle_conditioning else None
    kk = k if spec.task == "anticipate" else 1
    preds, gts = predict_labels(predictor, ds, dcfg, seed, kk, batch_size, spec, seen_from)
    first = preds[:, 0]
    report = {"task": spec.task, "samples": int(len(ds))}
    report["top1"] = metrics.top1_accuracy(first.ravel().tolist(), gts.ravel().tolist())
    if spec.task == "plan":
        sr, macc, miou = metrics.planning_metrics(first.tolist(), gts.tolist())
        report.update(horizon=spec.horizon, SR=sr, mAcc=macc, mIoU=miou)
    elif spec.task == "anticipate":
        eds = [
            metrics.ed_at_z(metrics.PredictionRecord(tuple(g), tuple(map(tuple, c))))
            for c, g in zip(preds.tolist(), gts.tolist())
        ]
        report.update(Z=spec.future, K=kk, ED=float(np.mean(eds)))
    return report
