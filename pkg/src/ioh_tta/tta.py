"""Streaming test-time adaptation: buffer history, build the adaptation set,
update the forecaster, then forecast the next horizon."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import forecaster as fc
from .bank import SampleBank
from .errors import ConfigError, InputError
from .retrieval import (RetrievalConfig, RetrievalLog, assemble, augment, make_queries,
                        own_samples, retrieve, sample_balance)
from .series import HYPO_MINUTES, HYPO_THRESHOLD, VitalSeries, WindowSpec

log = logging.getLogger(__name__)

STRATEGIES = ("frozen", "own_history_tta", "csa_tta")


@dataclass(frozen=True)
class TtaConfig:
    mode: Literal["fine_tuned", "zero_shot"] = "fine_tuned"
    strategy: Literal["frozen", "own_history_tta", "csa_tta"] = "csa_tta"
    epochs: int | None = None  # None -> 1 (fine_tuned) or 3 (zero_shot)
    lr: float = 1e-4
    batch_size: int = 64
    recon_weight: float | None = None  # None -> 1 (fine_tuned) or 0 (zero_shot)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mask: fc.MaskSpec = field(default_factory=fc.MaskSpec)
    update: fc.UpdateMask = field(default_factory=fc.UpdateMask)
    reset_per_patient: bool = True

    def __post_init__(self):
        if self.mode not in ("fine_tuned", "zero_shot"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1 if self.mode == "fine_tuned" else 3

    @property
    def w_recon(self) -> float:
        if self.recon_weight is not None:
            return self.recon_weight
        return 1.0 if self.mode == "fine_tuned" else 0.0


@dataclass
class StreamState:
    params: fc.ForecasterParams
    spec: WindowSpec
    patient_id: str
    sampling_interval: float
    capacity: int
    buffer: np.ndarray
    step_index: int = 0  # absolute index of the next row to arrive

    @classmethod
    def start(cls, params: fc.ForecasterParams, spec: WindowSpec, patient_id: str,
              sampling_interval: float, channels: int, cfg: TtaConfig) -> "StreamState":
        cap = cfg.retrieval.max_history_windows * spec.length
        return cls(params, spec, patient_id, sampling_interval, cap, np.empty((0, channels)))

    @property
    def buffer_origin(self) -> int:
        return self.step_index - len(self.buffer)


@dataclass
class StepInfo:
    window_start: int
    adapted: bool
    own_count: int = 0
    retrieved_count: int = 0
    retrieved_hypo: int = 0
    updates: int = 0
    epochs: int = 0
    own_provenance: list = field(default_factory=list)
    retrieved_patients: list = field(default_factory=list)
    latest_used_step: int = -1  # last absolute step whose value fed adaptation


def _adaptation_set(state: StreamState, bank: SampleBank | None, cfg: TtaConfig,
                    rlog: RetrievalLog | None):
    spec = state.spec
    k = cfg.retrieval.max_history_windows
    origin = state.buffer_origin
    own = own_samples(state.buffer, spec, state.patient_id, origin,
                      state.sampling_interval, k,
                      bank.threshold if bank else HYPO_THRESHOLD,
                      bank.duration_minutes if bank else HYPO_MINUTES)
    retrieved = []
    if cfg.strategy == "csa_tta" and bank is not None:
        queries = make_queries(state.buffer, spec, k)
        ids = [f"{state.patient_id}@{state.step_index - (i + 1) * spec.length}"
               for i in range(len(queries))]
        hits = retrieve(queries, bank, cfg.retrieval, rlog, ids)
        balanced = sample_balance(hits, cfg.retrieval.ratio_hypo, cfg.retrieval.ratio_nonhypo)
        retrieved = augment(balanced, cfg.retrieval.augment, state.sampling_interval,
                            salt=state.step_index, threshold=bank.threshold,
                            duration_minutes=bank.duration_minutes)
    return assemble(own, retrieved)


def adapt(params: fc.ForecasterParams, samples, cfg: TtaConfig, salt: int = 0):
    """Run ``cfg.n_epochs`` passes of masked SGD; returns (params, n_updates)."""
    X, Y = fc.stack_batch(samples)
    updates = 0
    for epoch in range(cfg.n_epochs):
        for start in range(0, len(X), cfg.batch_size):
            xb, yb = X[start:start + cfg.batch_size], Y[start:start + cfg.batch_size]
            masks = fc.make_masks(cfg.mask, len(xb), params.lookback, params.channels,
                                  params.horizon, salt * 1000 + updates)
            _, g = fc.grad_batch(params, xb, yb, masks, cfg.update, 1.0, cfg.w_recon)
            params = fc.sgd_step(params, g, cfg.lr, cfg.update)
            updates += 1
    return params, updates


def step(state: StreamState, new_rows, bank: SampleBank | None, cfg: TtaConfig,
         rlog: RetrievalLog | None = None):
    """Append observations, adapt on strictly past data, forecast the next H steps.

    Returns ``(prediction or None, state, StepInfo)``; the prediction is None
    when the latest lookback contains missing values.
    """
    rows = np.asarray(new_rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[1] != state.buffer.shape[1]:
        raise InputError("row width does not match the stream's channel count")
    state.buffer = np.concatenate([state.buffer, rows])[-state.capacity:]
    state.step_index += len(rows)
    spec = state.spec
    info = StepInfo(window_start=state.step_index, adapted=False)
    if len(state.buffer) < spec.lookback_steps:
        raise InputError("buffer holds fewer than L steps; cannot forecast")

    if cfg.strategy != "frozen":
        if len(state.buffer) < spec.length:
            log.debug("%s@%d: buffer too short to adapt", state.patient_id, state.step_index)
        else:
            aset = _adaptation_set(state, bank, cfg, rlog)
            info.own_count = len(aset.own_samples)
            info.retrieved_count = len(aset.retrieved_samples)
            info.retrieved_hypo = sum(s.label for s in aset.retrieved_samples)
            info.own_provenance = [s.provenance for s in aset.own_samples]
            info.retrieved_patients = sorted({s.patient_id for s in aset.retrieved_samples})
            if aset.own_samples:
                info.latest_used_step = max(s.start_step for s in aset.own_samples) + spec.length - 1
            if len(aset):
                state.params, info.updates = adapt(state.params, aset.samples, cfg,
                                                   salt=state.step_index)
                info.adapted = True
                info.epochs = cfg.n_epochs
                if not state.params.is_finite():
                    raise FloatingPointError("non-finite parameters after adaptation")
            else:
                log.debug("%s@%d: empty adaptation set", state.patient_id, state.step_index)

    lookback = state.buffer[-spec.lookback_steps:]
    if not np.all(np.isfinite(lookback)):
        return None, state, info
    pred, _ = fc.forward(state.params, lookback)
    return pred, state, info


@dataclass
class WindowRecord:
    patient_id: str
    window_start: int
    pred: np.ndarray
    truth: np.ndarray
    info: StepInfo

    def to_dict(self) -> dict:
        i = self.info
        return {"patient_id": self.patient_id, "window_start": self.window_start,
                "pred": [float(v) for v in self.pred],
                "truth": [float(v) for v in self.truth],
                "adaptation": {"adapted": i.adapted, "own": i.own_count,
                               "retrieved": i.retrieved_count,
                               "retrieved_hypo": i.retrieved_hypo,
                               "updates": i.updates, "epochs": i.epochs}}


@dataclass
class PatientRun:
    patient_id: str
    records: list[WindowRecord]
    final_params: fc.ForecasterParams
    param_drift: list[float]
    infos: list[StepInfo]


def run_patient(series: VitalSeries, init_params: fc.ForecasterParams,
                bank: SampleBank | None, cfg: TtaConfig, spec: WindowSpec,
                rlog: RetrievalLog | None = None) -> PatientRun:
    """Stream a patient with stride H: windows start at L, L+H, ... while they fit."""
    L, H = spec.lookback_steps, spec.horizon_steps
    T = series.n_steps
    if T < L + H:
        raise InputError(f"patient {series.patient_id}: {T} steps < L+H={L + H}")
    if bank is not None and bank.spec.length != spec.length and cfg.strategy == "csa_tta":
        raise ConfigError("bank fragment length differs from the window spec")
    params = init_params.copy()
    state = StreamState.start(params, spec, series.patient_id, series.sampling_interval,
                              series.n_channels, cfg)
    values = series.values
    records, drift, infos = [], [], []
    t, fed = L, 0
    while t + H <= T:
        pred, state, info = step(state, values[fed:t], bank, cfg, rlog)
        fed = t
        infos.append(info)
        truth = values[t:t + H, 0]
        if pred is not None and np.all(np.isfinite(truth)):
            records.append(WindowRecord(series.patient_id, t, pred, truth.copy(), info))
        drift.append(float(np.sqrt(sum(np.sum((state.params.blocks[k] - init_params.blocks[k]) ** 2)
                                       for k in init_params.blocks))))
        t += H
    return PatientRun(series.patient_id, records, state.params, drift, infos)
