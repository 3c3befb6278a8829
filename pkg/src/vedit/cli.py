"""Command line: gen-data, train, eval, ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch

from . import metrics
from .ablation import AXES, AblationConfig, run_ablation
from .checkpoint import load_checkpoint, read_checkpoint, restore_parameters, save_checkpoint
from .core import ModelConfig
from .data import SyntheticConfig, gen_synthetic, read_dataset, write_dataset
from .denoiser import DenoiseConfig
from .errors import CorruptManifest, DataError, InvalidConfig, UnknownSweepAxis, VeditError
from .heads import HeadConfig
from .model import build_model
from .pipeline import TASKS, Predictor, TaskSpec, build_predictor, check_compatible, evaluate
from .training import TrainConfig, fit, make_optimizer

OBJECTIVE_ALIASES = {"cross-entropy": "cross-entropy", "ce": "cross-entropy", "masked-recon": "masked-reconstruction", "masked-reconstruction": "masked-reconstruction"}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise InvalidConfig(f"config file not found: {path}") from e
    except ValueError as e:
        raise InvalidConfig(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise InvalidConfig("config file must hold a JSON object")
    return cfg


def _merge(cls, section: dict, overrides: dict):
    """Build ``cls`` from a config section, then apply non-None flag values."""
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _task(args, cfg, fallback: TaskSpec | None = None) -> TaskSpec:
    base = dict(cfg.get("task", {}))
    if fallback is not None and not base:
        base = fallback.to_dict()
    return _merge(TaskSpec, base, {"task": args.task, "horizon": args.horizon, "future": args.Z})


def _read_split(path, split):
    splits = read_dataset(path)
    if split not in splits:
        raise CorruptManifest(f"dataset has no split {split!r}; available: {sorted(splits)}")
    return splits[split]


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    syn = _merge(
        SyntheticConfig,
        cfg.get("data", {}),
        {
            "num_tasks": args.tasks,
            "vocab": args.vocab,
            "seq_len": args.len,
            "transition": args.transition,
            "tokens_per_clip": args.k,
            "dim": args.dim,
            "noise_std": args.noise_std,
            "train_samples": args.train_samples,
            "val_samples": args.val_samples,
            "seed": _seed(args, cfg),
        },
    )
    train, val = gen_synthetic(syn)
    print(write_dataset({"train": train, "val": val}, args.out))
    return 0


def _state_path(ckpt) -> Path:
    return Path(str(ckpt) + ".state")


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    train_ds = _read_split(args.data, "train")
    objective = OBJECTIVE_ALIASES.get(args.objective) if args.objective else None
    tcfg = _merge(
        TrainConfig,
        cfg.get("train", {}),
        {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr_warmup_start": args.lr_start,
            "lr_peak": args.lr_peak,
            "lr_final": args.lr_final,
            "warmup_epochs": args.warmup_epochs,
            "schedule": args.schedule,
            "objective": objective,
            "cfg_drop_prob": args.cfg_drop,
            "steps": args.steps,
        },
    )
    section = dict(cfg.get("model", {}))
    hidden = args.hidden if args.hidden is not None else section.get("hidden_dim", ModelConfig.hidden_dim)
    heads = args.heads if args.heads is not None else section.get("attn_heads")
    head_dim = args.head_dim
    if head_dim is None and (args.hidden is not None or args.heads is not None):
        # derive the per-head width so that heads * head_dim == hidden
        if heads is None:
            heads = ModelConfig.attn_heads if hidden % ModelConfig.attn_heads == 0 else 1
        if hidden % heads:
            raise InvalidConfig(f"--hidden {hidden} is not divisible by {heads} heads")
        head_dim = hidden // heads
    mcfg = _merge(
        ModelConfig,
        section,
        {
            "layers": args.layers,
            "hidden_dim": args.hidden,
            "attn_heads": heads,
            "head_dim": head_dim,
            "max_len": args.max_len,
            "attention": args.attention,
            "token_dim": train_ds.dim,
            "tokens_per_clip": train_ds.tokens_per_clip,
        },
    )
    dcfg = DenoiseConfig(tcfg.steps, args.cfg_scale if args.cfg_scale is not None else cfg.get("denoise", {}).get("cfg_scale", 7.0))
    recon = tcfg.objective == "masked-reconstruction"

    task = _task(args, cfg)
    if recon:
        mcfg = replace(mcfg, max_len=max(mcfg.max_len, train_ds.seq_len))
        module = build_model(mcfg, seed=seed)
    else:
        slots = task.slots(train_ds.seq_len)
        if args.max_len is None and "max_len" not in cfg.get("model", {}):
            mcfg = replace(mcfg, max_len=max(mcfg.max_len, slots))
        head = HeadConfig(train_ds.dim, task.num_classes(train_ds), heads=args.pool_heads or 1, deep=bool(args.deep_head))
        module = build_predictor(mcfg, head, task, seed=seed)
        check_compatible(module, train_ds, task)

    optimizer = make_optimizer(module, tcfg)
    start = 0
    out = Path(args.out)
    if args.resume:
        state_file = _state_path(out)
        if not out.exists() or not state_file.exists():
            raise CorruptManifest(f"cannot resume: {out} or {state_file} is missing")
        ckpt = read_checkpoint(out)
        restore_parameters(module, ckpt.tensors)
        state = torch.load(state_file, weights_only=True)
        optimizer.load_state_dict(state["optimizer"])
        start = int(state["epoch"]) + 1

    meta = {"train": tcfg.to_dict(), "seed": seed}

    def on_epoch(stats):
        save_checkpoint(module, out, meta={**meta, "epoch": stats.epoch})
        torch.save({"epoch": stats.epoch, "optimizer": optimizer.state_dict()}, _state_path(out))
        print(f"epoch {stats.epoch} loss {stats.mean_loss:.6f} ({stats.seconds:.1f}s)", flush=True)
        return False

    log = args.log if args.log else str(out) + ".log.csv"
    fit(module, train_ds, tcfg, dcfg, seed=seed, optimizer=optimizer, start_epoch=start, log_path=log, on_epoch=on_epoch)
    if start >= tcfg.epochs:
        save_checkpoint(module, out, meta={**meta, "epoch": tcfg.epochs - 1})
    print(out)
    return 0


def _eval_predictions(path, task: TaskSpec) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        records = [metrics.PredictionRecord(tuple(r["ground_truth"]), tuple(map(tuple, r["candidates"]))) for r in raw]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CorruptManifest(f"cannot read predictions file {path}: {e}") from e
    for r in records:
        r.validate()
    first = [list(r.candidates[0]) for r in records]
    gts = [list(r.ground_truth) for r in records]
    report = {"task": task.task, "samples": len(records)}
    report["top1"] = metrics.top1_accuracy([x for s in first for x in s], [x for s in gts for x in s])
    if task.task == "plan":
        sr, macc, miou = metrics.planning_metrics(first, gts)
        report.update(SR=sr, mAcc=macc, mIoU=miou)
    elif task.task == "anticipate":
        eds = [metrics.ed_at_z(r) for r in records]
        report.update(K=max(len(r.candidates) for r in records), ED=sum(eds) / len(eds))
    return report


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    if args.predictions:
        report = _eval_predictions(args.predictions, _task(args, cfg, TaskSpec("forecast")))
    else:
        if not args.checkpoint or not args.data:
            raise InvalidConfig("eval needs --checkpoint and --data (or --predictions)")
        module = load_checkpoint(args.checkpoint)
        if not isinstance(module, Predictor):
            raise InvalidConfig("checkpoint holds a bare model; train with a classification objective to evaluate")
        task = _task(args, cfg, module.task)
        ds = _read_split(args.data, args.split)
        steps = args.steps if args.steps is not None else cfg.get("denoise", {}).get("steps", 24)
        scale = args.cfg_scale if args.cfg_scale is not None else cfg.get("denoise", {}).get("cfg_scale", 7.0)
        report = evaluate(module, ds, DenoiseConfig(steps, scale), seed=seed, k=args.K, spec=task)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    seed_list = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else tuple(cfg.get("seeds", (0, 1, 2)))
    if args.axis not in AXES:
        raise UnknownSweepAxis(f"unknown sweep axis {args.axis!r}; choose from {sorted(AXES)}")
    values = ()
    if args.values:
        conv = str if args.axis == "attention" else int
        try:
            values = tuple(conv(v) for v in args.values.split(","))
        except ValueError as e:
            raise InvalidConfig(f"bad --values: {e}") from e
    base = AblationConfig(args.axis)
    data = _merge(SyntheticConfig, {**base.data.__dict__, **cfg.get("data", {})}, {"train_samples": args.train_samples, "val_samples": args.val_samples})
    train = _merge(TrainConfig, {**base.train.to_dict(), **cfg.get("train", {})}, {"epochs": args.epochs})
    model = _merge(ModelConfig, cfg.get("model", {}), {})
    acfg = AblationConfig(args.axis, values, seed_list, data=data, model=model, train=train)
    rows = run_ablation(acfg, out_csv=args.out, progress=lambda m: print(m, file=sys.stderr, flush=True))
    for r in rows:
        print(f"{r['axis']}={r['value']}: top1 {r['val_top1_mean']:.4f} loss {r['final_train_loss_mean']:.4f} {r['wallclock_s_mean']:.1f}s")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vedit", description="Diffusion transformer over procedural clip embeddings.")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--seed", type=int)

    def task_flags(p):
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--horizon", type=int, help="planning horizon (targets between first and last clip)")
        p.add_argument("--Z", type=int, help="anticipation: number of future clips to predict")

    g = sub.add_parser("gen-data", help="generate a synthetic procedural dataset")
    common(g)
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--vocab", type=int, required=True)
    g.add_argument("--len", type=int, required=True)
    g.add_argument("--transition", choices=("markov", "deterministic-cycle"))
    g.add_argument("--k", type=int, help="tokens per clip")
    g.add_argument("--dim", type=int)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--train-samples", type=int)
    g.add_argument("--val-samples", type=int)
    g.add_argument("--out", default="synthetic", help="output stem; writes <stem>.json and <stem>.bin")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    task_flags(t)
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--out", default="model.ckpt", help="checkpoint path (rewritten every epoch)")
    t.add_argument("--log", help="CSV log path (default <out>.log.csv)")
    t.add_argument("--resume", action="store_true", help="continue from --out and its .state file")
    t.add_argument("--objective", choices=sorted(OBJECTIVE_ALIASES))
    t.add_argument("--layers", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--head-dim", type=int)
    t.add_argument("--max-len", type=int)
    t.add_argument("--attention", choices=("joint", "self", "cross"))
    t.add_argument("--pool-heads", type=int)
    t.add_argument("--deep-head", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-peak", type=float)
    t.add_argument("--lr-final", type=float)
    t.add_argument("--warmup-epochs", type=float)
    t.add_argument("--schedule", choices=("warmup-cosine", "warmup-constant"))
    t.add_argument("--steps", type=int, help="denoising steps T")
    t.add_argument("--cfg-scale", type=float)
    t.add_argument("--cfg-drop", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    common(e)
    task_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", default="val")
    e.add_argument("--predictions", help="JSON list of {ground_truth, candidates}; scored without a model")
    e.add_argument("--K", type=int, default=5, help="anticipation candidates")
    e.add_argument("--steps", type=int)
    e.add_argument("--cfg-scale", type=float)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="paired-seed sweep; one CSV row per value")
    common(a)
    a.add_argument("--axis", required=True, help=f"one of {sorted(AXES)}")
    a.add_argument("--values", help="comma-separated subset of the axis values")
    a.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    a.add_argument("--epochs", type=int)
    a.add_argument("--train-samples", type=int)
    a.add_argument("--val-samples", type=int)
    a.add_argument("--out", default="ablation.csv")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on bad flags
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except VeditError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
