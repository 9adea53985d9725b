"""Weak supervision signals derived from departure time.

Two label sources:

* peak-of-day (POP): morning peak, afternoon peak, off-peak, from fixed
  weekday rush-hour windows;
* traffic condition index (TCI): a per-(day, slot) congestion level in
  {0..3} read from a 2016-row CSV ``day,slot,level``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path as FilePath
from typing import Callable

import numpy as np

from .errors import IntegrityError, ParseError
from .fileio import numbered_rows
from .temporal_graph import N_DAYS, N_TEMPORAL_NODES, SLOTS_PER_DAY, departure_to_node

MOR_PEAK, AFT_PEAK, OFF_PEAK = 0, 1, 2
POP_CLASSES = 3
TCI_CLASSES = 4

# half-open minute-of-day windows, weekdays only
MOR_PEAK_WINDOW = (7 * 60, 9 * 60)
AFT_PEAK_WINDOW = (16 * 60, 19 * 60)

TCI_FILE_HEADER = ["day", "slot", "level"]


def pop_label(departure: datetime) -> int:
    """0 = morning peak, 1 = afternoon peak, 2 = off-peak (all weekend)."""
    if departure.weekday() >= 5:
        return OFF_PEAK
    minute = departure.hour * 60 + departure.minute
    if MOR_PEAK_WINDOW[0] <= minute < MOR_PEAK_WINDOW[1]:
        return MOR_PEAK
    if AFT_PEAK_WINDOW[0] <= minute < AFT_PEAK_WINDOW[1]:
        return AFT_PEAK
    return OFF_PEAK


def load_tci(path: str | FilePath) -> np.ndarray:
    """Read a TCI table; exactly one row per (day, slot) is required."""
    table = np.full(N_TEMPORAL_NODES, -1, dtype=np.int64)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = numbered_rows(csv.reader(fh))
        first = next(rows, None)
        if first is None or [h.strip() for h in first[1]] != TCI_FILE_HEADER:
            line_no = first[0] if first else 1
            raise ParseError(f"line {line_no}: expected header {','.join(TCI_FILE_HEADER)}")
        for line_no, row in rows:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"line {line_no}: expected 3 fields, got {len(row)}")
            try:
                day, slot, level = (int(tok) for tok in row)
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if not 0 <= day < N_DAYS or not 0 <= slot < SLOTS_PER_DAY:
                raise ParseError(f"line {line_no}: (day={day}, slot={slot}) out of range")
            if not 0 <= level < TCI_CLASSES:
                raise ParseError(f"line {line_no}: level must be in [0, {TCI_CLASSES}), got {level}")
            node = day * SLOTS_PER_DAY + slot
            if table[node] != -1:
                raise IntegrityError(f"line {line_no}: duplicate entry for day {day} slot {slot}")
            table[node] = level
    missing = int(np.sum(table == -1))
    if missing:
        raise IntegrityError(f"TCI table incomplete: {missing} of {N_TEMPORAL_NODES} slots missing")
    return table


def write_tci(path: str | FilePath, table: np.ndarray) -> None:
    if table.shape != (N_TEMPORAL_NODES,):
        raise ValueError(f"TCI table must have shape ({N_TEMPORAL_NODES},), got {table.shape}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TCI_FILE_HEADER)
        for node in range(N_TEMPORAL_NODES):
            day, slot = divmod(node, SLOTS_PER_DAY)
            writer.writerow([day, slot, int(table[node])])


def tci_label(table: np.ndarray, departure: datetime) -> int:
    return int(table[departure_to_node(departure)])


@dataclass(frozen=True)
class WeakLabeler:
    """A named departure-time labeler with a fixed class count."""

    name: str
    n_classes: int
    fn: Callable[[datetime], int]

    def __call__(self, departure: datetime) -> int:
        label = self.fn(departure)
        if not 0 <= label < self.n_classes:
            raise IntegrityError(f"labeler {self.name!r} produced {label} outside [0, {self.n_classes})")
        return label


def make_labeler(kind: str, tci_path: str | FilePath | None = None) -> WeakLabeler:
    """Labeler factory for the CLI; ``kind`` is ``pop`` or ``tci``."""
    if kind == "pop":
        return WeakLabeler("pop", POP_CLASSES, pop_label)
    if kind == "tci":
        if tci_path is None:
            raise ValueError("tci labeler needs a table file")
        table = load_tci(tci_path)
        return WeakLabeler("tci", TCI_CLASSES, lambda dep: tci_label(table, dep))
    raise ValueError(f"unknown weak label source {kind!r}")
