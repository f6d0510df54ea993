"""Metrics CSV persistence with byte-stable formatting.

One row per outer iteration.  Floats are written with ``repr``, which
round-trips exactly, so a re-run with the same seed produces a
byte-identical file and a resumed run can truncate back to its checkpoint
row and continue writing the same bytes an uninterrupted run would have.
The first line is a comment carrying the config hash.
"""

from __future__ import annotations

import os

from .engine import MetricsRecord
from .exceptions import FormatError

FIELDS = ("iteration", "step", "expert", "match_loss", "overlap_loss", "mmd",
          "student_lr")
_INT_FIELDS = {"iteration", "step", "expert"}


def format_row(rec: MetricsRecord) -> str:
    vals = []
    for name in FIELDS:
        v = getattr(rec, name)
        vals.append(str(int(v)) if name in _INT_FIELDS else repr(float(v)))
    return ",".join(vals) + "\n"


class MetricsWriter:
    """Append-only CSV writer that can rewind to a known row count."""

    def __init__(self, path, config_hash: str, resume_rows: int | None = None):
        self.path = path
        if resume_rows is None:
            with open(path, "w", newline="") as f:
                f.write(f"# config_hash={config_hash}\n")
                f.write(",".join(FIELDS) + "\n")
        else:
            self._truncate(resume_rows)

    def _truncate(self, rows: int) -> None:
        with open(self.path, "r", newline="") as f:
            lines = f.readlines()
        keep = 2 + rows  # comment + header + data rows
        if len(lines) < keep:
            raise FormatError(
                f"{self.path}: has {max(len(lines) - 2, 0)} rows, cannot resume at {rows}"
            )
        with open(self.path, "w", newline="") as f:
            f.writelines(lines[:keep])

    def write(self, rec: MetricsRecord) -> None:
        with open(self.path, "a", newline="") as f:
            f.write(format_row(rec))


def read_metrics(path):
    """Returns (config_hash, field names, rows as list of dicts with typed
    values)."""
    if not os.path.exists(path):
        raise FormatError(f"{path}: no such metrics file")
    with open(path, "r", newline="") as f:
        lines = f.read().splitlines()
    config_hash = ""
    idx = 0
    if lines and lines[0].startswith("#"):
        head = lines[0][1:].strip()
        if head.startswith("config_hash="):
            config_hash = head.split("=", 1)[1]
        idx = 1
    if idx >= len(lines):
        raise FormatError(f"{path}: missing header row")
    fields = tuple(lines[idx].split(","))
    rows = []
    for lineno, line in enumerate(lines[idx + 1:], start=idx + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(fields):
            raise FormatError(
                f"{path}: line {lineno} has {len(parts)} fields, header has "
                f"{len(fields)}"
            )
        row = {}
        for name, val in zip(fields, parts):
            row[name] = int(val) if name in _INT_FIELDS else float(val)
        rows.append(row)
    return config_hash, fields, rows
