import csv
import json
import subprocess
import sys
import time

import pytest

from vedit.checkpoint import read_checkpoint
from vedit.cli import main

GEN = ["gen-data", "--tasks", "2", "--vocab", "3", "--len", "4", "--dim", "4", "--train-samples", "32", "--val-samples", "8"]
TINY = ["--layers", "1", "--hidden", "8", "--heads", "2", "--epochs", "2", "--steps", "2", "--batch-size", "16"]


@pytest.fixture
def data(tmp_path):
    assert main(GEN + ["--seed", "7", "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d.json"


def test_gen_data_deterministic(tmp_path, capsys):
    assert main(GEN + ["--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(GEN + ["--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out.strip().endswith("b.json")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    ma = json.loads((tmp_path / "a.json").read_text())
    mb = json.loads((tmp_path / "b.json").read_text())
    assert ma["blob"] == "a.bin" and {**ma, "blob": None} == {**mb, "blob": None}
    assert set(ma["splits"]) == {"train", "val"}


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--tasks", "4", "--vocab", "12"])
    assert e.value.code == 2


def test_invalid_config_exits_2(tmp_path):
    assert main(["gen-data", "--tasks", "2", "--vocab", "1", "--len", "4", "--out", str(tmp_path / "x")]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"bogus": 1}}))
    assert main(GEN + ["--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "data": {"dim": 6, "train_samples": 5}}))
    assert main(GEN + ["--config", str(cfg), "--out", str(tmp_path / "x")]) == 0
    m = json.loads((tmp_path / "x.json").read_text())
    assert m["D"] == 4 and len(m["splits"]["train"]) == 32  # flags win over the file


def test_train_eval_and_resume(tmp_path, data, capsys):
    full = tmp_path / "full.ckpt"
    assert main(["train", "--data", str(data), "--out", str(full), "--seed", "1"] + TINY) == 0
    rows = list(csv.DictReader(open(str(full) + ".log.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"step", "lr", "loss", "wallclock_ms"}
    assert read_checkpoint(full).config["meta"]["epoch"] == 1

    # same flags -> byte-identical checkpoint
    again = tmp_path / "again.ckpt"
    assert main(["train", "--data", str(data), "--out", str(again), "--seed", "1"] + TINY) == 0
    assert full.read_bytes() == again.read_bytes()

    # stop after one epoch, then resume: same later losses, same final bytes
    part = tmp_path / "part.ckpt"
    one = [a if a != "2" or TINY[i - 1] != "--epochs" else "1" for i, a in enumerate(TINY)]
    assert main(["train", "--data", str(data), "--out", str(part), "--seed", "1"] + one) == 0
    assert main(["train", "--data", str(data), "--out", str(part), "--seed", "1", "--resume"] + TINY) == 0
    resumed = list(csv.DictReader(open(str(part) + ".log.csv")))
    assert [r["loss"] for r in resumed] == [r["loss"] for r in rows]
    assert part.read_bytes() == full.read_bytes()

    capsys.readouterr()
    report = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(full), "--data", str(data), "--steps", "2", "--out", str(report)]) == 0
    out = json.loads(report.read_text())
    assert out["task"] == "forecast" and 0 <= out["top1"] <= 1 and out["samples"] == 8


def test_masked_recon_objective(tmp_path, data):
    ck = tmp_path / "r.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ck), "--objective", "masked-recon"] + TINY) == 0
    assert read_checkpoint(ck).config["kind"] == "vedit"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data)]) == 2


def test_plan_and_anticipate(tmp_path):
    assert main(["gen-data", "--tasks", "2", "--vocab", "3", "--len", "6", "--dim", "4", "--train-samples", "16", "--val-samples", "4", "--out", str(tmp_path / "d")]) == 0
    d = str(tmp_path / "d.json")
    ck = tmp_path / "p.ckpt"
    assert main(["train", "--data", d, "--out", str(ck), "--task", "plan", "--horizon", "3"] + TINY) == 0
    assert main(["eval", "--checkpoint", str(ck), "--data", d, "--steps", "2", "--out", str(tmp_path / "p.json")]) == 0
    rep = json.loads((tmp_path / "p.json").read_text())
    assert rep["horizon"] == 3 and {"SR", "mAcc", "mIoU"} <= set(rep)
    # a planning head evaluated as task classification has the wrong class count
    assert main(["eval", "--checkpoint", str(ck), "--data", d, "--task", "task-classify"]) == 3
    assert main(["eval", "--checkpoint", str(ck), "--data", d, "--task", "anticipate", "--Z", "2", "--K", "3", "--steps", "2", "--out", str(tmp_path / "a.json")]) == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["Z"] == 2 and rep["K"] == 3 and 0 <= rep["ED"] <= 1
    assert main(["eval", "--checkpoint", str(ck), "--data", d, "--task", "anticipate", "--Z", "20"]) == 3


def test_predictions_file(tmp_path):
    preds = [{"ground_truth": [1, 2, 3], "candidates": [[1, 2, 3]]}, {"ground_truth": [0, 4, 1], "candidates": [[0, 4, 1]]}]
    (tmp_path / "p.json").write_text(json.dumps(preds))
    assert main(["eval", "--predictions", str(tmp_path / "p.json"), "--task", "plan", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert (rep["SR"], rep["mAcc"], rep["mIoU"]) == (100.0, 100.0, 100.0)
    (tmp_path / "bad.json").write_text("[{}]")
    assert main(["eval", "--predictions", str(tmp_path / "bad.json")]) == 3


def test_data_errors_exit_3(tmp_path, data):
    assert main(["train", "--data", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.ckpt")]) == 3
    blob = tmp_path / "d.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "x.ckpt")] + TINY) == 3
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(data)]) == 3


def test_nonfinite_loss_exits_4(tmp_path, data):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "x.ckpt"), "--lr-start", "1e30", "--lr-peak", "1e30", "--lr-final", "1e30"] + TINY) == 4


def test_unknown_sweep_axis(tmp_path):
    assert main(["ablate", "--axis", "width", "--out", str(tmp_path / "a.csv")]) == 2
    assert main(["ablate", "--axis", "steps", "--values", "5", "--out", str(tmp_path / "a.csv")]) == 2


def test_ablate_attention_rows(tmp_path):
    out = tmp_path / "a.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"vocab": 3, "num_tasks": 2, "seq_len": 4, "dim": 4},
                               "model": {"layers": 1, "hidden_dim": 8, "attn_heads": 2, "head_dim": 4},
                               "train": {"batch_size": 8, "steps": 2}}))
    args = ["ablate", "--config", str(cfg), "--axis", "attention", "--seeds", "0", "--epochs", "1", "--train-samples", "16", "--val-samples", "4", "--out", str(out)]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["value"] for r in rows] == ["joint", "self", "cross"]
    assert set(rows[0]) == {"axis", "value", "seeds", "val_top1_mean", "val_top1_per_seed", "final_train_loss_mean", "wallclock_s_mean"}


def test_ablate_steps_wallclock_monotone(tmp_path):
    out = tmp_path / "s.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"vocab": 3, "num_tasks": 2, "seq_len": 4, "dim": 4},
                               "model": {"layers": 1, "hidden_dim": 8, "attn_heads": 2, "head_dim": 4},
                               "train": {"batch_size": 8}}))
    args = ["ablate", "--config", str(cfg), "--axis", "steps", "--values", "1,12,44", "--seeds", "0", "--epochs", "1", "--train-samples", "32", "--val-samples", "4", "--out", str(out)]
    assert main(args) == 0
    secs = [float(r["wallclock_s_mean"]) for r in csv.DictReader(open(out))]
    assert secs == sorted(secs)


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vedit.cli", "ablate", "--axis", "nope"], capture_output=True, text=True)
    assert r.returncode == 2 and "unknown sweep axis" in r.stderr


def test_tiny_train_on_default_dataset_is_quick(tmp_path):
    """Reference smoke benchmark: one epoch, L=1, hidden 32, default data (observed ~20 s)."""
    assert main(["gen-data", "--tasks", "4", "--vocab", "12", "--len", "9", "--out", str(tmp_path / "d")]) == 0
    t0 = time.process_time()
    assert main(["train", "--data", str(tmp_path / "d.json"), "--out", str(tmp_path / "m.ckpt"), "--layers", "1", "--hidden", "32", "--epochs", "1"]) == 0
    assert time.process_time() - t0 < 60
