"""Per-epoch, per-head metric rows and their on-disk formats.

The CSV has a fixed column order and is append-only; every row is mirrored
as one JSON object per line in a ``.jsonl`` file next to it. Wall-clock
times are deliberately absent from both so that reruns are byte-identical;
they go to the run manifest instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

COLUMNS = ("epoch", "phase", "head", "lr", "top1_error", "top5_error", "ce", "kl", "total")
_INT_COLS = {"epoch"}
_STR_COLS = {"phase", "head"}


@dataclass
class MetricsRecord:
    epoch: int
    phase: str           # "train" | "test"
    head: str            # branch0.., teacher, net, member0.., ensemble
    lr: float
    top1_error: float    # percent
    top5_error: float    # percent
    ce: float
    kl: float = 0.0
    total: float = 0.0
    wall_time: float = field(default=0.0, compare=False)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in COLUMNS}


def topk_errors(scores: np.ndarray, labels: np.ndarray, ks=(1, 5)) -> dict[int, float]:
    """Top-k error in percent.

    A label's rank counts strictly higher scores plus equal scores at lower
    class indices, so top-1 agrees with an argmax that breaks ties low.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        return {k: 0.0 for k in ks}
    true = scores[np.arange(n), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    rank = (scores > true).sum(axis=1) + ((scores == true) & (idx < labels[:, None])).sum(axis=1)
    return {k: 100.0 * float((rank >= k).sum()) / n for k in ks}


def error_counts(scores: np.ndarray, labels: np.ndarray, ks=(1, 5)) -> dict[int, int]:
    errs = topk_errors(scores, labels, ks)
    n = len(labels)
    return {k: int(round(errs[k] * n / 100.0)) for k in ks}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Appends records to ``<stem>.csv`` and ``<stem>.jsonl``."""

    def __init__(self, csv_path, truncate: bool = True):
        self.csv_path = Path(csv_path)
        self.json_path = self.csv_path.with_suffix(".jsonl")
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)
        if truncate or not self.csv_path.exists():
            with self.csv_path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(COLUMNS)
            self.json_path.write_text("")

    def write(self, records) -> None:
        with self.csv_path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in records:
                row = r.row()
                w.writerow([_fmt(row[c]) for c in COLUMNS])
        with self.json_path.open("a") as fh:
            for r in records:
                fh.write(json.dumps(r.row()) + "\n")

    def truncate_after(self, epoch: int) -> None:
        """Drop rows with ``epoch >= epoch`` (used when resuming)."""
        rows = [r for r in read_csv(self.csv_path) if r["epoch"] < epoch]
        recs = [MetricsRecord(**r) for r in rows]
        MetricsWriter(self.csv_path, truncate=True).write(recs)


def _parse(col: str, text: str):
    if col in _INT_COLS:
        return int(text)
    if col in _STR_COLS:
        return text
    return float(text)


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        if tuple(header) != COLUMNS:
            raise ParseError(f"{path}: unexpected columns {header}", 0)
        rows = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
            try:
                rows.append({c: _parse(c, v) for c, v in zip(header, row)})
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
        return rows


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def to_records(rows: list[dict]) -> list[MetricsRecord]:
    return [MetricsRecord(**{k: r[k] for k in COLUMNS}) for r in rows]
