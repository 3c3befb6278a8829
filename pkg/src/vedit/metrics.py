"""Evaluation metrics: top-1, edit distance at Z, and planning SR / mAcc / mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyInput, InvariantViolation, LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class PredictionRecord:
    ground_truth: tuple
    candidates: tuple

    def __post_init__(self):
        object.__setattr__(self, "ground_truth", tuple(_label(x) for x in self.ground_truth))
        object.__setattr__(self, "candidates", tuple(tuple(_label(x) for x in c) for c in self.candidates))

    def validate(self) -> None:
        if not self.candidates:
            raise InvariantViolation("record needs at least one candidate")
        z = len(self.ground_truth)
        if z == 0:
            raise InvariantViolation("empty ground truth")
        for c in self.candidates:
            if len(c) != z:
                raise InvariantViolation(f"candidate length {len(c)} != Z={z}")


def _label(x):
    # (verb, noun) pairs arrive from JSON as lists
    return tuple(x) if isinstance(x, list) else x


def top1_accuracy(preds: Sequence, gts: Sequence) -> float:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} labels")
    if not gts:
        raise EmptyInput("no labels")
    return sum(p == g for p, g in zip(preds, gts)) / len(gts)


def damerau_levenshtein(a: Sequence, b: Sequence) -> int:
    """Unrestricted Damerau-Levenshtein distance (Lowrance-Wagner).

    Unlike the optimal-string-alignment variant, substrings may be edited
    after a transposition, so ``dl("CA", "ABC") == 2``.
    """
    n, m = len(a), len(b)
    inf = n + m
    # d is offset by one row/column holding the sentinel ``inf``
    d = [[inf] * (m + 2) for _ in range(n + 2)]
    for i in range(n + 1):
        d[i + 1][0] = inf
        d[i + 1][1] = i
    for j in range(m + 1):
        d[0][j + 1] = inf
        d[1][j + 1] = j
    last_row = {}
    for i in range(1, n + 1):
        last_col = 0
        for j in range(1, m + 1):
            i1 = last_row.get(b[j - 1], 0)
            j1 = last_col
            if a[i - 1] == b[j - 1]:
                cost = 0
                last_col = j
            else:
                cost = 1
            d[i + 1][j + 1] = min(
                d[i][j] + cost,
                d[i + 1][j] + 1,
                d[i][j + 1] + 1,
                d[i1][j1] + (i - i1 - 1) + 1 + (j - j1 - 1),
            )
        last_row[a[i - 1]] = i
    return d[n + 1][m + 1]


def ed_at_z(record: PredictionRecord) -> float:
    """Smallest edit distance over the candidates, divided by Z."""
    record.validate()
    z = len(record.ground_truth)
    return min(damerau_levenshtein(c, record.ground_truth) for c in record.candidates) / z


def planning_metrics(preds: Sequence[Sequence], gts: Sequence[Sequence]) -> tuple[float, float, float]:
    """(SR, mAcc, mIoU) in percent.

    mAcc pools positions over all samples; mIoU is averaged per sample.
    """
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} predicted plans vs {len(gts)} ground truths")
    if not gts:
        raise EmptyInput("no plans")
    horizon = len(gts[0])
    if horizon == 0:
        raise ShapeMismatch("plans must have horizon >= 1")
    success = correct = 0
    iou_sum = 0.0
    for p, g in zip(preds, gts):
        if len(p) != horizon or len(g) != horizon:
            raise ShapeMismatch(f"all plans must share horizon {horizon}")
        success += tuple(p) == tuple(g)
        correct += sum(x == y for x, y in zip(p, g))
        ps, gs = set(p), set(g)
        iou_sum += len(ps & gs) / len(ps | gs)
    n = len(gts)
    return 100.0 * success / n, 100.0 * correct / (n * horizon), 100.0 * iou_sum / n
