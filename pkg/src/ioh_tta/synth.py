"""Seeded synthetic intraoperative cohorts with rare hypotensive episodes.

Each patient's MAP is a patient-specific mean plus AR(1) noise. ``shift_strength``
adds a patient-specific oscillation and changes the AR persistence, so a model
trained on one cohort meets unfamiliar dynamics on another. Hypotensive episodes
are smooth dips (slow decline, plateau below 65 mmHg, recovery) injected until
the window-level positive rate matches the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError
from .series import (HYPO_THRESHOLD, MAP_RANGE, VitalSeries, WindowSpec, required_run,
                     segment_series, write_series_csv)

log = logging.getLogger(__name__)

CHANNEL_NAMES = ("map", "hr", "sbp", "dbp", "spo2")
BASELINE_FLOOR = 68.0


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 50
    duration_steps: int = 300
    sampling_interval: float = 30.0
    hypo_rate: float = 0.125
    shift_strength: float = 0.0
    channels: int = 3
    seed: int = 0
    lookback_steps: int = 30
    horizon_steps: int = 10
    rate_tolerance: float = 0.02
    id_prefix: str = "p"

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0 < self.hypo_rate < 1:
            raise ConfigError("hypo_rate must lie in (0, 1)")
        if self.duration_steps <= self.lookback_steps + self.horizon_steps:
            raise ConfigError("duration_steps must exceed lookback + horizon")
        if self.shift_strength < 0:
            raise ConfigError("shift_strength must be >= 0")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if not self.sampling_interval > 0:
            raise ConfigError("sampling_interval must be positive")


def channel_names(c: int) -> tuple[str, ...]:
    return tuple(CHANNEL_NAMES[i] if i < len(CHANNEL_NAMES) else f"ch{i}" for i in range(c))


def _baseline(rng: np.random.Generator, spec: CohortSpec) -> np.ndarray:
    T = spec.duration_steps
    s = spec.shift_strength
    mean = rng.uniform(80.0, 100.0)
    phi = 0.95 - s * rng.uniform(0.0, 0.25)
    sigma = 1.0
    eps = rng.normal(0.0, sigma, T)
    dev = np.empty(T)
    dev[0] = eps[0] / np.sqrt(1 - phi ** 2)
    for t in range(1, T):
        dev[t] = phi * dev[t - 1] + eps[t]
    period = rng.uniform(8.0, 24.0)
    amp = s * rng.uniform(2.0, 5.0)
    osc = amp * np.sin(2 * np.pi * np.arange(T) / period + rng.uniform(0, 2 * np.pi))
    return np.maximum(mean + dev + osc, BASELINE_FLOOR)


def _dip(rng: np.random.Generator, T: int, onset: int, level_at_onset: float) -> tuple[np.ndarray, int]:
    """Non-positive dip profile and its end index."""
    decline = int(rng.integers(8, 16))
    plateau = int(rng.integers(3, 12))
    recovery = int(rng.integers(4, 10))
    nadir = rng.uniform(50.0, 61.0)
    depth = max(level_at_onset - nadir, 8.0)
    prof = np.concatenate([
        (1 - np.cos(np.linspace(0, np.pi, decline))) / 2,
        np.ones(plateau),
        (1 + np.cos(np.linspace(0, np.pi, recovery))) / 2,
    ]) * -depth
    end = min(T, onset + prof.size)
    out = np.zeros(T)
    out[onset:end] = prof[:end - onset]
    return out, end


def _positive_windows(map_seq: np.ndarray, L: int, H: int, need: int) -> np.ndarray:
    """Window-level labels (stride 1) via a run-length scan."""
    below = map_seq < HYPO_THRESHOLD
    run = np.zeros(map_seq.size, dtype=int)
    acc = 0
    for i, b in enumerate(below):
        acc = acc + 1 if b else 0
        run[i] = acc
    n_win = map_seq.size - L - H + 1
    labels = np.zeros(n_win, dtype=bool)
    for s in range(n_win):
        lo, hi = s + L, s + L + H
        # longest run inside [lo, hi): runs are clipped at the window start
        r = np.minimum(run[lo:hi], np.arange(1, H + 1))
        labels[s] = r.max() >= need
    return labels


def _secondary(rng: np.random.Generator, map_seq: np.ndarray, c: int) -> np.ndarray:
    T = map_seq.size
    out = np.empty((T, c))
    out[:, 0] = map_seq
    centered = map_seq - map_seq.mean()
    if c > 1:
        out[:, 1] = 70.0 - 0.4 * centered + rng.normal(0, 1.5, T)
    if c > 2:
        out[:, 2] = 1.45 * map_seq + 4.0 + rng.normal(0, 2.0, T)
    if c > 3:
        out[:, 3] = 0.78 * map_seq - 2.0 + rng.normal(0, 1.5, T)
    if c > 4:
        out[:, 4] = np.clip(98.0 + 0.03 * centered + rng.normal(0, 0.4, T), 80, 100)
    for j in range(5, c):
        out[:, j] = 0.5 * centered + rng.normal(0, 1.0, T)
    return out


def generate(spec: CohortSpec, max_attempts: int = 2000) -> list[VitalSeries]:
    """Deterministic cohort for ``spec``; raises GenerationError if the target rate is missed."""
    L, H, T = spec.lookback_steps, spec.horizon_steps, spec.duration_steps
    need = required_run(spec.sampling_interval)
    root = np.random.SeedSequence(spec.seed)
    patient_seqs = root.spawn(spec.n_patients)
    cohort_rng = np.random.default_rng([spec.seed, 7919])
    rngs = [np.random.default_rng(s) for s in patient_seqs]
    base = [_baseline(r, spec) for r in rngs]
    dips = [np.zeros(T) for _ in base]
    busy = [np.zeros(T, dtype=bool) for _ in base]
    counts = np.array([_positive_windows(b, L, H, need).sum() for b in base])
    n_windows = spec.n_patients * (T - L - H + 1)
    proneness = cohort_rng.gamma(0.6, 1.0, spec.n_patients) + 1e-3
    proneness /= proneness.sum()
    target = spec.hypo_rate
    tol = spec.rate_tolerance

    attempts = 0
    while counts.sum() / n_windows < target - tol / 4:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could not reach hypo_rate {target} (at {counts.sum() / n_windows:.4f})")
        p = int(cohort_rng.choice(spec.n_patients, p=proneness))
        onset = int(cohort_rng.integers(0, T - 10))
        span = slice(max(0, onset - 6), min(T, onset + 40))
        if busy[p][span].any():
            continue
        level = float(base[p][onset:onset + 5].mean())
        d, end = _dip(cohort_rng, T, onset, level)
        trial = dips[p] + d
        new_count = _positive_windows(np.maximum(base[p] + trial, MAP_RANGE[0] + 5), L, H, need).sum()
        new_total = counts.sum() - counts[p] + new_count
        if new_total / n_windows > target + tol:
            continue
        dips[p] = trial
        busy[p][onset:end] = True
        counts[p] = new_count

    cohort = []
    names = channel_names(spec.channels)
    for i, (r, b, d) in enumerate(zip(rngs, base, dips)):
        map_seq = np.maximum(b + d, MAP_RANGE[0] + 5)
        values = _secondary(r, map_seq, spec.channels)
        cohort.append(VitalSeries(f"{spec.id_prefix}{i:04d}", names,
                                  spec.sampling_interval, values))
    log.info("synth: %d patients, positive window rate %.4f",
             spec.n_patients, counts.sum() / n_windows)
    return cohort


def window_rate(cohort: list[VitalSeries], lookback: int, horizon: int) -> float:
    """Positive-window fraction over all stride-1 windows of a cohort."""
    spec = WindowSpec(lookback, horizon, 1)
    labels = [s.label for series in cohort for s in segment_series(series, spec)]
    return float(np.mean(labels)) if labels else 0.0


def write_cohort(cohort: list[VitalSeries], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for series in cohort:
        path = directory / f"{series.patient_id}.csv"
        write_series_csv(series, path)
        paths.append(path)
    return paths
