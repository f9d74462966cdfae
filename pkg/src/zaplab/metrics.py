"""Metrics records and the newline-delimited stream format.

A metrics file is one JSON object per line: a header row carrying the config
snapshot hash and seeds, measurement rows, and event rows (e.g. zap events).
Measurement rows are deterministic given the run manifest; wall_clock is the
one observational field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict


@dataclass
class MetricsRecord:
    step: int
    phase: str  # pretrain | transfer_sequential | transfer_iid
    classes_seen: int
    train_acc: float
    test_acc: float
    loss: float
    wall_clock: float

    def to_row(self):
        d = asdict(self)
        d["record"] = "metrics"
        return d


def zap_event(step, mode, classes):
    return {"record": "event", "event": "zap", "step": int(step), "mode": mode,
            "classes": sorted(int(c) for c in classes)}


def header_row(config_hash, seeds):
    return {"record": "header", "config_hash": config_hash, "seeds": seeds}


def dump_rows(rows):
    """Canonical ndjson serialization (stable key order)."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def write_metrics(path, rows):
    with open(path, "w") as fh:
        fh.write(dump_rows(rows))


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_volatile(rows):
    """Rows minus observational timing fields, for replay comparison."""
    out = []
    for r in rows:
        r = dict(r)
        r.pop("wall_clock", None)
        out.append(r)
    return out
