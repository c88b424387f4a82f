"""Experiment report: a metric table, named checks and hash-pinned artifacts."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import InputError
from ..imaging import file_sha256


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    artifacts: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0
    notes: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add_artifact(self, name: str, path) -> Path:
        path = Path(path)
        self.artifacts[name] = {"path": str(path), "sha256": file_sha256(path)}
        return path

    def row(self, name: str, metrics) -> dict:
        rec = {"condition": name, **(metrics.to_dict() if hasattr(metrics, "to_dict") else dict(metrics))}
        self.rows.append(rec)
        return rec

    def by_condition(self) -> dict[str, dict]:
        return {r["condition"]: r for r in self.rows}

    def to_dict(self) -> dict:
        return {"experiment_id": self.experiment_id, "config": self.config, "rows": self.rows,
                "checks": self.checks, "artifacts": self.artifacts, "wall_clock": self.wall_clock,
                "notes": self.notes}

    def write(self, out_dir) -> Path:
        """Write ``table.tsv`` and ``report.json`` (the report lists the table as an artifact)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.rows:
            cols = []
            for r in self.rows:
                cols += [c for c in r if c not in cols and not isinstance(r[c], (dict, list))]
            with open(out_dir / "table.tsv", "w", newline="") as fh:
                w = csv.DictWriter(fh, cols, delimiter="\t", extrasaction="ignore", lineterminator="\n")
                w.writeheader()
                for r in self.rows:
                    w.writerow({c: _fmt(r.get(c, "")) for c in cols})
            self.add_artifact("table", out_dir / "table.tsv")
        self.wall_clock = time.perf_counter() - self._t0
        path = out_dir / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=str))
        return path

    def verify(self) -> None:
        for name, art in self.artifacts.items():
            p = Path(art["path"])
            if not p.exists():
                raise InputError(f"artifact {name} missing: {p}")
            if file_sha256(p) != art["sha256"]:
                raise InputError(f"artifact {name} changed since the report was written: {p}")

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        d = json.loads(Path(path).read_text())
        return cls(d["experiment_id"], d["config"], d["rows"], d["checks"], d["artifacts"], d["wall_clock"],
                   d.get("notes", {}))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v
