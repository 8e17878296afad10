"""Per-query records, aggregates and their JSON / CSV forms."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

CSV_COLUMNS = ["query_id", "support_id", "coarse_dice", "final_dice", "fallback_flag",
               "rounds", "t_register", "t_prompt", "t_segment", "error", "warning"]


@dataclass
class QueryRecord:
    query_id: str
    support_id: str
    coarse_dice: Optional[float] = None
    final_dice: Optional[float] = None
    fallback_flag: bool = False
    rounds: int = 0
    timings: dict = field(default_factory=dict)
    error: Optional[str] = None
    warning: Optional[str] = None


def _mean_std(values):
    if not values:
        return None, None
    m = math.fsum(values) / len(values)
    var = math.fsum((v - m) ** 2 for v in values) / len(values)
    return m, math.sqrt(var)


def aggregate(records: list[QueryRecord], stage_seconds: Optional[dict] = None) -> dict:
    coarse = [r.coarse_dice for r in records if r.coarse_dice is not None]
    final = [r.final_dice for r in records if r.final_dice is not None]
    cm, cs = _mean_std(coarse)
    fm, fs = _mean_std(final)
    return {
        "n_queries": len(records),
        "n_failed": sum(1 for r in records if r.error),
        "n_fallback": sum(1 for r in records if r.fallback_flag),
        "coarse_dice_mean": cm,
        "coarse_dice_std": cs,
        "final_dice_mean": fm,
        "final_dice_std": fs,
        "stage_seconds": dict(stage_seconds or {}),
    }


@dataclass
class RunReport:
    records: list
    aggregates: dict
    manifest: dict

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates,
            "manifest": self.manifest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        return cls([QueryRecord(**r) for r in doc["records"]], doc["aggregates"], doc["manifest"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([
                r.query_id, r.support_id,
                "" if r.coarse_dice is None else repr(r.coarse_dice),
                "" if r.final_dice is None else repr(r.final_dice),
                int(r.fallback_flag), r.rounds,
                repr(r.timings.get("register", 0.0)),
                repr(r.timings.get("prompt", 0.0)),
                repr(r.timings.get("segment", 0.0)),
                r.error or "", r.warning or "",
            ])
        return buf.getvalue()

    def without_timings(self) -> dict:
        """Report content with every wall-clock field removed."""
        d = self.to_dict()
        for r in d["records"]:
            r.pop("timings", None)
        d["aggregates"].pop("stage_seconds", None)
        return d

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_json(Path(path).read_text())
