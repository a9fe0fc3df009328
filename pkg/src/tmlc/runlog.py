"""Per-epoch run logs shared by every training method."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

LOG_COLUMNS = ("epoch", "split", "loss_base", "loss_meta", "acc_train_noisy", "acc_train_true",
               "acc_test", "corrected_label_acc", "kl_meta")


@dataclass
class RunLog:
    method: str
    metadata: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    # wall-clock seconds of the training work in each epoch; kept out of the CSV
    epoch_seconds: list = field(default_factory=list)
    model: object = None

    def append(self, **values) -> None:
        unknown = set(values) - set(LOG_COLUMNS)
        if unknown:
            raise KeyError(f"unknown log columns {sorted(unknown)}")
        self.rows.append({k: values.get(k) for k in LOG_COLUMNS})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def last(self, name: str):
        return self.rows[-1][name] if self.rows else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        """CSV log plus a ``<name>.meta.json`` method-metadata header."""
        path = Path(path)
        path.write_text(self.to_csv())
        meta = {"method": self.method, **self.metadata}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            if k == "split":
                parsed[k] = v
            elif k == "epoch":
                parsed[k] = int(v)
            else:
                parsed[k] = float(v) if v != "" else None
        out.append(parsed)
    return out
