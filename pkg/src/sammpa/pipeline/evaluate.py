"""Dice scoring of a prediction directory against ground truth."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..core import dice, load_mask


@dataclass
class EvalRow:
    id: str
    dice: float
    missing: bool = False


@dataclass
class MetricsTable:
    rows: list

    @property
    def mean(self) -> float:
        return math.fsum(r.dice for r in self.rows) / len(self.rows)

    @property
    def std(self) -> float:
        m = self.mean
        return math.sqrt(math.fsum((r.dice - m) ** 2 for r in self.rows) / len(self.rows))

    @property
    def n_missing(self) -> int:
        return sum(r.missing for r in self.rows)

    def to_json(self) -> str:
        doc = {"rows": [{"id": r.id, "dice": r.dice, "missing": r.missing} for r in self.rows],
               "mean": self.mean, "std": self.std, "n_missing": self.n_missing}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "dice", "missing"])
        for r in self.rows:
            w.writerow([r.id, repr(r.dice), int(r.missing)])
        return buf.getvalue()


def evaluate(predictions_dir, ground_truth_dir, target_size: Optional[int] = None) -> MetricsTable:
    """Per-id Dice over every ground-truth mask; missing predictions score 0.

    ``target_size`` resizes both sides first, for predictions written at a
    different resolution than the annotations.
    """
    pred_dir = Path(predictions_dir)
    gt_dir = Path(ground_truth_dir)
    gt = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    pred = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    if not set(gt) & set(pred):
        raise ValueError(f"no common ids between {pred_dir} and {gt_dir}")
    rows = []
    for sid, path in gt.items():
        truth = load_mask(path, target_size)
        if sid not in pred:
            rows.append(EvalRow(sid, 0.0, True))
            continue
        rows.append(EvalRow(sid, dice(load_mask(pred[sid], target_size), truth)))
    return MetricsTable(rows)
