"""Time-series containers, windowing, normalization and hypotension labeling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

EPS = 1e-8
MAP_RANGE = (10.0, 250.0)
HYPO_THRESHOLD = 65.0
HYPO_MINUTES = 1.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VitalSeries:
    """One patient's uniformly sampled multivariate record.

    Channel 0 is always mean arterial pressure (mmHg). Quality control runs at
    construction: non-finite entries and MAP values outside 10-250 mmHg are
    marked unobserved and stored as NaN.
    """

    patient_id: str
    channel_names: tuple[str, ...]
    sampling_interval: float
    values: np.ndarray
    valid_mask: np.ndarray = None

    def __post_init__(self):
        names = tuple(self.channel_names)
        if not names or names[0] != "map":
            raise InputError(f"first channel must be 'map', got {names[:1]}")
        if not self.sampling_interval > 0:
            raise InputError("sampling_interval must be positive")
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[1] != len(names):
            raise InputError(
                f"values shape {values.shape} does not match {len(names)} channels"
            )
        if self.valid_mask is None:
            mask = np.ones(values.shape, dtype=bool)
        else:
            mask = np.array(self.valid_mask, dtype=bool)
            if mask.shape != values.shape:
                raise InputError("valid_mask shape must match values")
        mask &= np.isfinite(values)
        lo, hi = MAP_RANGE
        mask[:, 0] &= (values[:, 0] >= lo) & (values[:, 0] <= hi)
        values[~mask] = np.nan
        mask.setflags(write=False)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "sampling_interval", float(self.sampling_interval))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid_mask", mask)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def map(self) -> np.ndarray:
        return self.values[:, 0]


@dataclass(frozen=True)
class WindowSpec:
    lookback_steps: int
    horizon_steps: int
    stride: int = 1

    def __post_init__(self):
        for name in ("lookback_steps", "horizon_steps", "stride"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

    @property
    def length(self) -> int:
        """Fragment length lookback + horizon."""
        return self.lookback_steps + self.horizon_steps

    @classmethod
    def from_minutes(cls, lookback_min: float, horizon_min: float,
                     interval_s: float, stride: int | None = None) -> "WindowSpec":
        lookback = int(round(lookback_min * 60 / interval_s))
        horizon = int(round(horizon_min * 60 / interval_s))
        return cls(lookback, horizon, horizon if stride is None else stride)


@dataclass(frozen=True, eq=False)
class Sample:
    x: np.ndarray
    y: np.ndarray
    label: bool
    patient_id: str
    start_step: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=float).ravel()
        if not np.all(np.isfinite(y)):
            raise InputError("sample horizon must be finite")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "label", bool(self.label))
        object.__setattr__(self, "start_step", int(self.start_step))

    @property
    def provenance(self) -> tuple[str, int]:
        return (self.patient_id, self.start_step)

    @property
    def map_vector(self) -> np.ndarray:
        """MAP channel of the concatenated lookback and horizon."""
        return np.concatenate([self.x[:, 0], self.y])

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.provenance == other.provenance and self.label == other.label
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))

    def __hash__(self):
        return hash(self.provenance)


def required_run(sampling_interval: float, duration_minutes: float = HYPO_MINUTES) -> int:
    """Number of consecutive steps that span ``duration_minutes``."""
    # tolerance absorbs float noise such as 60/30 -> 2.0000000000000004
    return max(1, math.ceil(60.0 * duration_minutes / sampling_interval - 1e-9))


def longest_run_below(seq, threshold: float) -> int:
    best = run = 0
    for v in seq:
        run = run + 1 if v < threshold else 0
        best = max(best, run)
    return best


def label_hypotension(map_sequence, sampling_interval: float,
                      threshold: float = HYPO_THRESHOLD,
                      duration_minutes: float = HYPO_MINUTES) -> bool:
    """True iff MAP stays strictly below ``threshold`` for ``duration_minutes``."""
    seq = np.asarray(map_sequence, dtype=float).ravel()
    if seq.size == 0:
        raise InputError("empty MAP sequence")
    if not np.all(np.isfinite(seq)):
        raise InputError("MAP sequence contains non-finite values")
    if threshold <= 0 or duration_minutes <= 0 or sampling_interval <= 0:
        raise InputError("threshold, duration and interval must be positive")
    return longest_run_below(seq, threshold) >= required_run(sampling_interval, duration_minutes)


def znormalize(x) -> tuple[np.ndarray, float, float]:
    """Return (z-scored copy, mean, population std); constant input maps to zeros."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise InputError("cannot normalize an empty vector")
    mean = float(x.mean())
    std = float(x.std())
    if std < EPS:
        return np.zeros_like(x), mean, EPS
    return (x - mean) / std, mean, std


def segment_series(series: VitalSeries, spec: WindowSpec,
                   threshold: float = HYPO_THRESHOLD,
                   duration_minutes: float = HYPO_MINUTES) -> list[Sample]:
    L, H = spec.lookback_steps, spec.horizon_steps
    out: list[Sample] = []
    T = series.n_steps
    if T < L + H:
        return out
    valid = series.valid_mask
    for s in range(0, T - L - H + 1, spec.stride):
        if not valid[s:s + L].all() or not valid[s + L:s + L + H, 0].all():
            continue
        x = series.values[s:s + L]
        y = series.values[s + L:s + L + H, 0]
        label = label_hypotension(y, series.sampling_interval, threshold, duration_minutes)
        out.append(Sample(x, y, label, series.patient_id, s))
    return out


# --- CSV ingestion ---------------------------------------------------------

def read_series_csv(path, patient_id: str | None = None) -> VitalSeries:
    """Read ``time_s,map,<channel>...``; empty cells become unobserved."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "time_s" or header[1] != "map":
            raise InputError(f"{path}: header must start with 'time_s,map'")
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                times.append(float(row[0]))
                rows.append([float(c) if c.strip() else np.nan for c in row[1:]])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if len(times) < 2:
        raise InputError(f"{path}: need at least two rows to infer the sampling interval")
    t = np.asarray(times)
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise InputError(f"{path}: time_s must be strictly increasing")
    interval = float(np.median(dt))
    if not np.allclose(dt, interval, rtol=1e-6, atol=1e-9):
        raise InputError(f"{path}: samples are not uniformly spaced")
    values = np.asarray(rows, dtype=float)
    return VitalSeries(patient_id or path.stem, tuple(header[1:]), interval,
                       values, np.isfinite(values))


def write_series_csv(series: VitalSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", *series.channel_names])
        for i, row in enumerate(series.values):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            w.writerow([repr(i * series.sampling_interval), *cells])


def read_cohort(directory) -> list[VitalSeries]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"cohort directory not found: {directory}")
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise InputError(f"no .csv files in {directory}")
    return [read_series_csv(f) for f in files]
