"""Cross-sample bank: labelled fragments from training patients plus K-Shape models."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kshape
from .binio import Reader, Writer, read_container, write_container
from .errors import ConfigError, InputError
from .series import (HYPO_MINUTES, HYPO_THRESHOLD, Sample, VitalSeries, WindowSpec,
                     segment_series)

log = logging.getLogger(__name__)

BANK_MAGIC = b"IOHBANK\x00"
BANK_VERSION = 1

SUBSETS = ("hypo", "nonhypo")


@dataclass(frozen=True, eq=False)
class SampleBank:
    spec: WindowSpec
    sampling_interval: float
    channel_names: tuple[str, ...]
    samples_hypo: tuple[Sample, ...]
    samples_nonhypo: tuple[Sample, ...]
    model_hypo: kshape.KShapeModel
    model_nonhypo: kshape.KShapeModel
    threshold: float = HYPO_THRESHOLD
    duration_minutes: float = HYPO_MINUTES

    def __post_init__(self):
        if any(not s.label for s in self.samples_hypo):
            raise InputError("hypo subset contains a non-hypotensive sample")
        if any(s.label for s in self.samples_nonhypo):
            raise InputError("non-hypo subset contains a hypotensive sample")
        for name in SUBSETS:
            model, samples = self.subset(name)
            if len(model.assignments) != len(samples):
                raise InputError(f"{name} model covers {len(model.assignments)} of {len(samples)} samples")
        vec = {}
        for name in SUBSETS:
            _, samples = self.subset(name)
            vec[name] = (np.array([s.map_vector for s in samples])
                         if samples else np.empty((0, self.spec.length)))
        object.__setattr__(self, "_vectors", vec)

    def subset(self, name: str) -> tuple[kshape.KShapeModel, tuple[Sample, ...]]:
        if name == "hypo":
            return self.model_hypo, self.samples_hypo
        if name == "nonhypo":
            return self.model_nonhypo, self.samples_nonhypo
        raise KeyError(name)

    def vectors(self, name: str) -> np.ndarray:
        """MAP vectors (lookback followed by horizon) of a subset, one row per sample."""
        return self._vectors[name]

    @property
    def cluster_members(self) -> dict[str, list[list[int]]]:
        out = {}
        for name in SUBSETS:
            model, _ = self.subset(name)
            out[name] = [model.members(j).tolist() for j in range(model.k)]
        return out

    @property
    def patient_ids(self) -> set[str]:
        return {s.patient_id for s in (*self.samples_hypo, *self.samples_nonhypo)}

    def __len__(self) -> int:
        return len(self.samples_hypo) + len(self.samples_nonhypo)

    def __eq__(self, other):
        if not isinstance(other, SampleBank):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def build_bank(cohort: list[VitalSeries], spec: WindowSpec, k_hypo: int = 8,
               k_nonhypo: int = 8, seed: int = 0, max_iters: int = 100) -> SampleBank:
    if not cohort:
        raise InputError("cohort is empty")
    interval = cohort[0].sampling_interval
    names = cohort[0].channel_names
    for s in cohort:
        if s.sampling_interval != interval or s.channel_names != names:
            raise InputError(f"patient {s.patient_id} differs in interval or channels")
    hypo: list[Sample] = []
    nonhypo: list[Sample] = []
    for series in cohort:
        for sample in segment_series(series, spec):
            (hypo if sample.label else nonhypo).append(sample)
    for name, subset, k in (("hypo", hypo, k_hypo), ("nonhypo", nonhypo, k_nonhypo)):
        if len(subset) < k:
            raise ConfigError(f"{name} subset has {len(subset)} samples, fewer than k={k}")
    log.info("bank: %d hypo / %d non-hypo samples", len(hypo), len(nonhypo))
    model_h = kshape.fit([s.map_vector for s in hypo], k_hypo, max_iters, seed)
    model_n = kshape.fit([s.map_vector for s in nonhypo], k_nonhypo, max_iters, seed + 1)
    return SampleBank(spec, interval, names, tuple(hypo), tuple(nonhypo), model_h, model_n)


# --- persistence -----------------------------------------------------------

def _write_model(w: Writer, m: kshape.KShapeModel) -> None:
    w.u64(m.k)
    w.array(m.centroids)
    w.int_array(m.assignments)
    w.u64(m.iterations_run)
    w.boolean(m.converged)
    w.array(np.asarray(m.cost_history, dtype=float))


def _read_model(r: Reader) -> kshape.KShapeModel:
    k = r.u64()
    centroids = r.array()
    assignments = r.int_array()
    iters = r.u64()
    converged = r.boolean()
    costs = tuple(float(c) for c in r.array())
    centroids.setflags(write=False)
    assignments.setflags(write=False)
    return kshape.KShapeModel(k, centroids, assignments, iters, converged, costs)


def _write_sample(w: Writer, s: Sample) -> None:
    w.text(s.patient_id)
    w.i64(s.start_step)
    w.boolean(s.label)
    w.array(s.x)
    w.array(s.y)


def _read_sample(r: Reader) -> Sample:
    pid = r.text()
    start = r.i64()
    label = r.boolean()
    x = r.array()
    y = r.array()
    return Sample(x, y, label, pid, start)


def to_bytes(bank: SampleBank) -> bytes:
    w = Writer()
    w.u64(bank.spec.lookback_steps)
    w.u64(bank.spec.horizon_steps)
    w.u64(bank.spec.stride)
    w.f64(bank.sampling_interval)
    w.f64(bank.threshold)
    w.f64(bank.duration_minutes)
    w.u64(len(bank.channel_names))
    for name in bank.channel_names:
        w.text(name)
    for name in SUBSETS:
        model, samples = bank.subset(name)
        w.u64(len(samples))
        for s in samples:
            _write_sample(w, s)
        _write_model(w, model)
    return w.payload()


def from_bytes(payload: bytes) -> SampleBank:
    r = Reader(payload)
    spec = WindowSpec(r.u64(), r.u64(), r.u64())
    interval = r.f64()
    threshold = r.f64()
    duration = r.f64()
    names = tuple(r.text() for _ in range(r.u64()))
    parts = {}
    for name in SUBSETS:
        samples = tuple(_read_sample(r) for _ in range(r.u64()))
        parts[name] = (samples, _read_model(r))
    r.done()
    return SampleBank(spec, interval, names, parts["hypo"][0], parts["nonhypo"][0],
                      parts["hypo"][1], parts["nonhypo"][1], threshold, duration)


def save_bank(bank: SampleBank, path) -> None:
    write_container(path, BANK_MAGIC, BANK_VERSION, to_bytes(bank))


def load_bank(path) -> SampleBank:
    return from_bytes(read_container(path, BANK_MAGIC, BANK_VERSION))
