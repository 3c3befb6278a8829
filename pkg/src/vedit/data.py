"""Synthetic procedural datasets and the manifest + blob file format.

A dataset lives in two files: ``<stem>.json`` (UTF-8 manifest) and
``<stem>.bin`` (raw little-endian float32). Each sample occupies one
contiguous span of the blob laid out clip-major, then token, then channel.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ProcedureSample
from .errors import CorruptManifest, InvalidConfig, OffsetOutOfRange, ShapeMismatch

MANIFEST_VERSION = 1
TRANSITIONS = ("markov", "deterministic-cycle")


@dataclass(frozen=True)
class SyntheticConfig:
    num_tasks: int = 4
    vocab: int = 12
    seq_len: int = 9
    transition: str = "deterministic-cycle"
    tokens_per_clip: int = 1
    dim: int = 32
    noise_std: float = 0.05
    train_samples: int = 2000
    val_samples: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise InvalidConfig("vocab must be >= 2")
        if self.num_tasks < 1 or self.seq_len < 1:
            raise InvalidConfig("num_tasks and seq_len must be >= 1")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be >= 0")
        if self.transition not in TRANSITIONS:
            raise InvalidConfig(f"transition must be one of {TRANSITIONS}")
        if self.tokens_per_clip < 1 or self.dim < 2 or self.dim % 2:
            raise InvalidConfig("need tokens_per_clip >= 1 and an even dim >= 2")
        if self.train_samples < 0 or self.val_samples < 0:
            raise InvalidConfig("sample counts must be >= 0")


@dataclass
class ProcedureDataset:
    """Columnar storage of same-length samples."""

    clips: np.ndarray  # (S, N, k, D) float32
    step_labels: np.ndarray  # (S, N) int64
    task_labels: np.ndarray  # (S,) int64
    target_masks: np.ndarray  # (S, N) bool
    num_steps: int
    num_tasks: int
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clips = np.ascontiguousarray(self.clips, dtype=np.float32)
        self.step_labels = np.asarray(self.step_labels, dtype=np.int64)
        self.task_labels = np.asarray(self.task_labels, dtype=np.int64)
        self.target_masks = np.asarray(self.target_masks, dtype=bool)
        s = self.clips.shape[0]
        if self.clips.ndim != 4:
            raise ShapeMismatch(f"clips must be (S, N, k, D), got {self.clips.shape}")
        if self.step_labels.shape != self.clips.shape[:2] or self.target_masks.shape != self.clips.shape[:2]:
            raise ShapeMismatch("labels / masks do not match clips")
        if self.task_labels.shape != (s,):
            raise ShapeMismatch("one task label per sample")

    def __len__(self):
        return self.clips.shape[0]

    def __getitem__(self, i) -> ProcedureSample:
        return ProcedureSample(
            clips=tuple(self.clips[i]),
            step_labels=tuple(self.step_labels[i]),
            task_label=int(self.task_labels[i]),
            target_mask=tuple(self.target_masks[i]),
        )

    @property
    def seq_len(self) -> int:
        return self.clips.shape[1]

    @property
    def tokens_per_clip(self) -> int:
        return self.clips.shape[2]

    @property
    def dim(self) -> int:
        return self.clips.shape[3]

    @classmethod
    def from_samples(cls, samples, num_steps: int, num_tasks: int, stats=None) -> "ProcedureDataset":
        samples = list(samples)
        return cls(
            clips=np.stack([s.array() for s in samples]),
            step_labels=np.array([s.step_labels for s in samples]),
            task_labels=np.array([s.task_label for s in samples]),
            target_masks=np.array([s.target_mask for s in samples]),
            num_steps=num_steps,
            num_tasks=num_tasks,
            stats=dict(stats or {}),
        )


def _transition_tables(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """(G, V, V) row-stochastic matrices, one per task."""
    g, v = cfg.num_tasks, cfg.vocab
    tables = np.zeros((g, v, v))
    for t in range(g):
        if cfg.transition == "deterministic-cycle":
            perm = rng.permutation(v)
            tables[t, perm, np.roll(perm, -1)] = 1.0
        else:
            tables[t] = rng.dirichlet(np.full(v, 0.3), size=v)
    return tables


def _roll_sequences(tables, count, length, rng):
    g, v, _ = tables.shape
    tasks = rng.integers(g, size=count)
    seqs = np.empty((count, length), dtype=np.int64)
    seqs[:, 0] = rng.integers(v, size=count)
    for i in range(1, length):
        u = rng.random(count)
        cdf = np.cumsum(tables[tasks, seqs[:, i - 1]], axis=-1)
        seqs[:, i] = np.minimum((u[:, None] >= cdf).sum(-1), v - 1)
    return tasks, seqs


def gen_synthetic(cfg: SyntheticConfig) -> tuple[ProcedureDataset, ProcedureDataset]:
    """Generate (train, val) splits; a pure function of ``cfg``.

    Every step id owns a fixed prototype with unit-norm token rows; a clip
    is its step's prototype plus Gaussian noise. Both splits are
    standardised per channel with train-split statistics.
    """
    structure_ss, train_ss, val_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    structure_rng = np.random.default_rng(structure_ss)
    protos = structure_rng.standard_normal((cfg.vocab, cfg.tokens_per_clip, cfg.dim))
    protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
    tables = _transition_tables(cfg, structure_rng)

    splits = []
    seen_seqs: set = set()
    for ss, count in ((train_ss, cfg.train_samples), (val_ss, cfg.val_samples)):
        rng = np.random.default_rng(ss)
        tasks, seqs = _roll_sequences(tables, count, cfg.seq_len, rng)
        if cfg.transition == "markov" and seen_seqs:
            # keep val label sequences out of train where the chain allows it
            for i in range(count):
                for _ in range(32):
                    if (tasks[i], *seqs[i]) not in seen_seqs:
                        break
                    t, s = _roll_sequences(tables, 1, cfg.seq_len, rng)
                    tasks[i], seqs[i] = t[0], s[0]
        seen_seqs.update((t, *s) for t, s in zip(tasks.tolist(), seqs.tolist()))
        noise = rng.standard_normal((count, cfg.seq_len, cfg.tokens_per_clip, cfg.dim))
        clips = protos[seqs] + cfg.noise_std * noise
        splits.append((clips, seqs, tasks))

    train_clips = splits[0][0]
    if len(train_clips):
        mean = train_clips.reshape(-1, cfg.dim).mean(0)
        std = train_clips.reshape(-1, cfg.dim).std(0)
    else:
        mean, std = np.zeros(cfg.dim), np.ones(cfg.dim)
    std = np.where(std > 0, std, 1.0)
    mean32, std32 = mean.astype(np.float32), std.astype(np.float32)
    stats = {"mean": mean32.tolist(), "std": std32.tolist()}

    out = []
    for clips, seqs, tasks in splits:
        masks = np.zeros(seqs.shape, dtype=bool)
        masks[:, -1] = True
        out.append(
            ProcedureDataset(
                clips=((clips - mean32) / std32).astype(np.float32),
                step_labels=seqs,
                task_labels=tasks,
                target_masks=masks,
                num_steps=cfg.vocab,
                num_tasks=cfg.num_tasks,
                stats=stats,
            )
        )
    return out[0], out[1]


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = str(p.with_suffix("") if p.suffix in (".json", ".bin") else p)
    return Path(stem + ".json"), Path(stem + ".bin")


def write_dataset(splits, path) -> Path:
    """Write ``{name: ProcedureDataset}`` (or a single dataset as ``train``).

    Returns the manifest path.
    """
    if isinstance(splits, ProcedureDataset):
        splits = {"train": splits}
    if not splits:
        raise ShapeMismatch("no splits to write")
    first = next(iter(splits.values()))
    n, k, d = first.clips.shape[1:]
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "blob": blob_path.name,
        "dtype": "float32",
        "byte_order": "little",
        "k": int(k),
        "D": int(d),
        "N": int(n),
        "num_steps": int(first.num_steps),
        "num_tasks": int(first.num_tasks),
        "stats": first.stats,
        "splits": {},
    }
    offset = 0
    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    with open(tmp_blob, "wb") as f:
        for name, ds in splits.items():
            if ds.clips.shape[1:] != (n, k, d):
                raise ShapeMismatch(f"split {name!r} has shape {ds.clips.shape[1:]}, expected {(n, k, d)}")
            records = []
            for i in range(len(ds)):
                raw = ds.clips[i].astype("<f4").tobytes()
                f.write(raw)
                records.append(
                    {
                        "offset": offset,
                        "length": len(raw),
                        "step_labels": ds.step_labels[i].tolist(),
                        "task_label": int(ds.task_labels[i]),
                        "target_mask": ds.target_masks[i].tolist(),
                    }
                )
                offset += len(raw)
            manifest["splits"][name] = records
    os.replace(tmp_blob, blob_path)
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest_path


def read_dataset(path) -> dict[str, ProcedureDataset]:
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        if manifest["version"] != MANIFEST_VERSION:
            raise CorruptManifest(f"unsupported manifest version {manifest['version']}")
        n, k, d = int(manifest["N"]), int(manifest["k"]), int(manifest["D"])
        blob_path = Path(manifest_path).parent / manifest["blob"]
        split_records = manifest["splits"]
        num_steps, num_tasks = int(manifest["num_steps"]), int(manifest["num_tasks"])
        stats = manifest.get("stats") or {}
    except (OSError, ValueError, KeyError, TypeError) as e:
        if isinstance(e, CorruptManifest):
            raise
        raise CorruptManifest(f"cannot read manifest {manifest_path}: {e}") from e

    expected = n * k * d * 4
    blob_size = blob_path.stat().st_size if blob_path.exists() else 0
    blob = np.memmap(blob_path, dtype="<f4", mode="r", shape=(blob_size // 4,)) if blob_size >= 4 else np.zeros(0, dtype="<f4")
    out = {}
    spans = []
    for name, records in split_records.items():
        clips = np.empty((len(records), n, k, d), dtype=np.float32)
        steps, tasks, masks = [], [], []
        for i, r in enumerate(records):
            try:
                off, length = int(r["offset"]), int(r["length"])
                steps.append(r["step_labels"])
                tasks.append(r["task_label"])
                masks.append(r["target_mask"])
            except (KeyError, TypeError, ValueError) as e:
                raise CorruptManifest(f"bad record {i} in split {name!r}: {e}") from e
            if length != expected:
                raise ShapeMismatch(f"record {i} has {length} bytes, N*k*D*4 = {expected}")
            if off < 0 or off % 4 or off + length > blob_size:
                raise OffsetOutOfRange(f"record {i} spans [{off}, {off + length}) beyond blob of {blob_size} bytes")
            spans.append((off, off + length))
            clips[i] = np.asarray(blob[off // 4 : (off + length) // 4]).reshape(n, k, d)
        if records and (np.shape(steps) != (len(records), n) or np.shape(masks) != (len(records), n)):
            raise ShapeMismatch(f"labels or masks in split {name!r} do not have length N={n}")
        out[name] = ProcedureDataset(
            clips=clips,
            step_labels=np.array(steps, dtype=np.int64).reshape(len(records), n),
            task_labels=np.array(tasks, dtype=np.int64),
            target_masks=np.array(masks, dtype=bool).reshape(len(records), n),
            num_steps=num_steps,
            num_tasks=num_tasks,
            stats=stats,
        )
    spans.sort()
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptManifest("sample byte ranges overlap")
    del blob
    return out
