"""Append-only JSONL run ledger and replay.

Records carry a logical timestamp (a per-ledger sequence number) instead of
wall-clock time so identical runs write byte-identical ledgers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator


def _clean(v: Any) -> Any:
    # JSON has no inf/nan; keep them as strings so lines stay valid JSON
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _restore(v: Any) -> Any:
    if v in ("inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, dict):
        return {k: _restore(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_restore(x) for x in v]
    return v


class Ledger:
    """Single-writer append-only ledger."""

    def __init__(self, path, truncate: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate and self.path.exists():
            self.path.unlink()
        self.seq = sum(1 for _ in read_ledger(self.path)[0]) if self.path.exists() else 0

    def append(self, stage: str, event: str, **payload) -> dict:
        rec = {"timestamp": self.seq, "stage": stage, "event": event, **_clean(payload)}
        line = json.dumps(rec, sort_keys=True, separators=(",", ":"))
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
        self.seq += 1
        return rec


@dataclass
class LedgerIssue:
    line: int
    message: str


def read_ledger(path) -> tuple[list[dict], list[LedgerIssue]]:
    """Parse every line; corrupt lines are reported, not fatal."""
    records, issues = [], []
    path = Path(path)
    if not path.exists():
        return records, issues
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "stage" not in rec or "event" not in rec:
                    raise ValueError("record lacks stage/event")
            except (json.JSONDecodeError, ValueError) as exc:
                issues.append(LedgerIssue(n, str(exc)))
                continue
            records.append(_restore(rec))
    return records, issues


def iter_stage(records, stage: str, event: str | None = None) -> Iterator[dict]:
    for r in records:
        if r["stage"] == stage and (event is None or r["event"] == event):
            yield r


@dataclass
class ReplayState:
    """Search state reconstructed from ledger records alone."""

    evaluated: dict[str, dict] = field(default_factory=dict)  # arch_id -> observation record
    fronts: dict[int, list[str]] = field(default_factory=dict)  # iteration -> front ids
    hv_history: list[float] = field(default_factory=list)
    iteration: int = -1
    best: dict[str, str] = field(default_factory=dict)
    status: str | None = None
    predictor_sample_count: int | None = None

    @property
    def front(self) -> list[str]:
        return self.fronts.get(self.iteration, [])


def replay_search(records: list[dict]) -> ReplayState:
    st = ReplayState()
    for r in records:
        if r["stage"] != "search":
            continue
        ev = r["event"]
        if ev == "measured":
            st.evaluated[r["arch_id"]] = r["metrics"]
        elif ev == "iteration":
            st.iteration = r["iteration"]
            st.fronts[r["iteration"]] = list(r["front"])
            st.hv_history.append(r["hypervolume"])
        elif ev == "reprofile":
            st.predictor_sample_count = r["sample_count"]
        elif ev == "best":
            st.best = dict(r["selections"])
        elif ev == "finished":
            st.status = r["status"]
    return st
