"""Sampled simulation output and its CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TimeSeries:
    time: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    # run statistics (runtime, iteration counts); not part of the CSV form
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        for name, values in self.channels.items():
            values = np.asarray(values, dtype=float)
            if values.shape != self.time.shape:
                raise ValueError(f"channel {name!r} has {values.size} samples, time grid has {self.time.size}")
            self.channels[name] = values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def at(self, t: float) -> dict[str, float]:
        """Channel values at the sample closest to ``t``."""
        k = int(np.argmin(np.abs(self.time - t)))
        return {name: float(v[k]) for name, v in self.channels.items()}

    def window(self, t0: float, t1: float) -> np.ndarray:
        """Boolean mask of samples with ``t0 <= t < t1``."""
        return (self.time >= t0) & (self.time < t1)


def write_csv(series: TimeSeries, path) -> None:
    """Header ``time,<channels>``; values printed with ``repr`` so they round-trip."""
    path = Path(path)
    names = series.names
    cols = [series.time] + [series.channels[n] for n in names]
    with path.open("w", newline="") as fh:
        fh.write(",".join(["time", *names]) + "\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> TimeSeries:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if header[0] != "time":
        raise ValueError("first CSV column must be 'time'")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return TimeSeries(data[:, 0], {name: data[:, k] for k, name in enumerate(header[1:], start=1)})
