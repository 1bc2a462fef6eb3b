"""Delimited result reports with a deterministic byte layout."""

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError, ParseError

REPORT_COLUMNS = ("arm", "meta_task", "p_at_1", "seeds", "config_hash")
AGGREGATE_TASK = "aggregate"


def config_fingerprint(obj) -> str:
    """Short stable hash of any JSON-representable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Report:
    arm: str
    task_scores: dict           # meta_task -> median P@1
    seeds: tuple
    config_hash: str

    def __post_init__(self):
        if not self.task_scores:
            raise DataError("report with no task scores")
        for task, score in self.task_scores.items():
            if not 0.0 <= score <= 1.0:
                raise DataError(f"P@1 {score} for {task!r} outside [0, 1]")
        if not self.seeds:
            raise DataError("report with no seeds")

    @property
    def aggregate(self) -> float:
        """Unweighted mean over whichever meta-tasks are present."""
        return sum(self.task_scores.values()) / len(self.task_scores)

    def rows(self) -> list:
        seeds = ",".join(str(s) for s in self.seeds)
        out = [{"arm": self.arm, "meta_task": t,
                "p_at_1": repr(float(self.task_scores[t])),
                "seeds": seeds, "config_hash": self.config_hash}
               for t in sorted(self.task_scores)]
        out.append({"arm": self.arm, "meta_task": AGGREGATE_TASK,
                    "p_at_1": repr(float(self.aggregate)),
                    "seeds": seeds, "config_hash": self.config_hash})
        return out


def write_report(path, reports) -> None:
    """Same reports, same bytes: fixed column order, repr floats, \\n ends."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.rows():
            w.writerow(row)
    Path(path).write_bytes(buf.getvalue().encode())


def read_report(path) -> list:
    """Rows as dicts with p_at_1 parsed back to float."""
    text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for i, row in enumerate(rows):
        if row.get("arm") is None or row.get("p_at_1") in (None, ""):
            raise ParseError(f"row {i + 1}: missing report fields")
        try:
            score = float(row["p_at_1"])
        except ValueError as e:
            raise ParseError(f"row {i + 1}: bad p_at_1 {row['p_at_1']!r}") \
                from e
        out.append({**row, "p_at_1": score})
    return out


def reports_from_results(results: dict, seeds, config_hash: str) -> list:
    """Ablation/sweep result mapping -> one Report per arm, sorted by arm
    label for stable output order."""
    return [Report(arm=str(arm), task_scores=dict(scores),
                   seeds=tuple(seeds), config_hash=config_hash)
            for arm, scores in sorted(results.items(), key=lambda kv:
                                      str(kv[0]))]
