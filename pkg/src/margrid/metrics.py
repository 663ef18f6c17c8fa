"""Line-delimited JSON metrics with a versioned schema.

The metrics stream must be byte-identical across runs with the same seed,
so wall-clock timings are kept out of it: they go to a sibling timings
file with the same iteration keys. Records are serialized with sorted keys
and written as a single append per line.
"""

from __future__ import annotations

import json
import os

SCHEMA_VERSION = 1


def _encode(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class MetricsWriter:
    """Appends one JSON record per line; flushed on every write."""

    def __init__(self, path: str, timings_path: str | None = None):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")
        self._timings = open(timings_path, "a", encoding="utf-8") if timings_path else None
        self._last_iteration: int | None = None

    def write(self, record: dict, wall_time_s: float | None = None):
        record = dict(record)
        record["schema"] = SCHEMA_VERSION
        it = record.get("iteration")
        if it is not None and self._last_iteration is not None and it <= self._last_iteration:
            raise ValueError(f"iteration {it} not increasing (last {self._last_iteration})")
        if it is not None:
            self._last_iteration = it
        self._fh.write(_encode(record) + "\n")
        self._fh.flush()
        if self._timings is not None and wall_time_s is not None:
            self._timings.write(_encode({"iteration": it, "wall_time_s": wall_time_s}) + "\n")
            self._timings.flush()

    def close(self):
        self._fh.close()
        if self._timings is not None:
            self._timings.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path: str) -> tuple[list[dict], int]:
    """Parse a metrics file; returns (records, count of malformed lines)."""
    records: list[dict] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if not isinstance(rec, dict):
                skipped += 1
                continue
            records.append(rec)
    return records, skipped
