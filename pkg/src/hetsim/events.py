"""Line-delimited JSON event stream (one record per line)."""

from __future__ import annotations

import json
from typing import Iterator, List, Optional


class EventLog:
    """Keeps records in memory; ``write`` dumps them as JSON lines.

    Records keep insertion order and keys are written sorted, so equal runs
    produce byte-identical files.
    """

    def __init__(self, keep_rounds: bool = True):
        self.records: List[dict] = []
        self.keep_rounds = keep_rounds

    def emit(self, kind: str, **fields) -> None:
        if not self.keep_rounds and kind in ("round", "update"):
            return
        rec = {"kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def of_kind(self, kind: str) -> Iterator[dict]:
        return (r for r in self.records if r["kind"] == kind)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")

    @staticmethod
    def read(path) -> List[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
