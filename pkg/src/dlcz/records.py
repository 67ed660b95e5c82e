"""Per-event click records and their CSV file format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

FIELDS = ("trial_index", "herald_signs", "swap_detector", "config_angle", "phase_deg", "d2c", "d2d")
ANGLES = ("0", "22.5")
# swap detector -> sign of the beamsplitter port it watches
SWAP_SIGNS = {"D2b": "+", "D2a": "-"}


@dataclass(frozen=True)
class ClickRecord:
    """Final-detector outcome of one event.

    ``herald_signs`` holds one character per heralded pair (Up then Down), and
    ``swap_detector`` is ``D2a``/``D2b`` for a connection click, ``none``,
    ``veto`` (double click) or ``-`` when there is no connection stage.
    """

    trial_index: int
    herald_signs: str
    swap_detector: str
    config_angle: str
    phase_deg: float
    d2c: bool
    d2d: bool

    @property
    def sign(self) -> str | None:
        """Combined parity of the herald and swap detectors, or None if undefined."""
        chars = list(self.herald_signs)
        if self.swap_detector in SWAP_SIGNS:
            chars.append(SWAP_SIGNS[self.swap_detector])
        elif self.swap_detector != "-":
            return None
        return "-" if chars.count("-") % 2 else "+"

    @property
    def outcome(self) -> tuple[int, int]:
        return int(self.d2c), int(self.d2d)


def write_records(records: Iterable[ClickRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_records(records))


def format_records(records: Iterable[ClickRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for r in records:
        writer.writerow(
            [r.trial_index, r.herald_signs, r.swap_detector, r.config_angle, repr(float(r.phase_deg)), int(r.d2c), int(r.d2d)]
        )
    return buf.getvalue()


def read_records(path: str | Path) -> list[ClickRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [
            ClickRecord(
                trial_index=int(row["trial_index"]),
                herald_signs=row["herald_signs"],
                swap_detector=row["swap_detector"],
                config_angle=row["config_angle"],
                phase_deg=float(row["phase_deg"]),
                d2c=row["d2c"] == "1",
                d2d=row["d2d"] == "1",
            )
            for row in reader
        ]
