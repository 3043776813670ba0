"""Glue between the configuration and the library: cohort evaluation, the
leakage audit and the shifted-cohort comparison of adaptation strategies."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import forecaster as fc
from . import synth
from .bank import SampleBank, build_bank
from .config import ExperimentConfig
from .detection import DetectorConfig, EventReport, detect
from .evaluation import MetricsReport, classification_metrics, evaluate
from .retrieval import AugmentConfig, RetrievalConfig, RetrievalLog
from .series import (HYPO_THRESHOLD, VitalSeries, WindowSpec, label_hypotension,
                     longest_run_below, required_run, segment_series)
from .shape import DtwConfig
from .tta import STRATEGIES, PatientRun, TtaConfig, run_patient

log = logging.getLogger(__name__)


# --- config -> library objects -----------------------------------------------

def window_spec(cfg: ExperimentConfig) -> WindowSpec:
    return WindowSpec.from_minutes(cfg.lookback_min, cfg.horizon_min, cfg.sampling_interval)


def cohort_spec(cfg: ExperimentConfig, seed: int | None = None) -> synth.CohortSpec:
    spec = window_spec(cfg)
    return synth.CohortSpec(
        n_patients=cfg.n_patients, duration_steps=cfg.duration_steps,
        sampling_interval=cfg.sampling_interval, hypo_rate=cfg.hypo_rate,
        shift_strength=cfg.shift_strength, channels=cfg.channels,
        seed=cfg.seeds[0] if seed is None else seed,
        lookback_steps=spec.lookback_steps, horizon_steps=spec.horizon_steps,
        id_prefix=cfg.id_prefix)


def tta_config(cfg: ExperimentConfig, seed: int = 0, strategy: str | None = None) -> TtaConfig:
    retrieval = RetrievalConfig(
        top_k=cfg.top_k, ratio_hypo=cfg.ratio_hypo, ratio_nonhypo=cfg.ratio_nonhypo,
        max_history_windows=cfg.max_history_windows,
        augment=AugmentConfig(cfg.augment, cfg.noise_std_fraction,
                              (cfg.time_scale_min, cfg.time_scale_max), seed),
        dtw=DtwConfig(cfg.band_radius, cfg.channel_mode))
    return TtaConfig(mode=cfg.mode, strategy=strategy or cfg.strategy, epochs=cfg.tta_epochs,
                     lr=cfg.tta_lr, batch_size=cfg.batch_size, recon_weight=cfg.recon_weight,
                     retrieval=retrieval,
                     mask=fc.MaskSpec(cfg.mask_ratio, cfg.patch_len, seed),
                     reset_per_patient=cfg.reset_per_patient)


def detector_config(cfg: ExperimentConfig) -> DetectorConfig:
    return DetectorConfig.for_interval(
        cfg.sampling_interval, tau_bp=cfg.tau_bp, tau_event=cfg.tau_event, beta=cfg.beta,
        delta=cfg.delta, tau_soft=cfg.tau_soft, lambda_hard=cfg.lambda_hard,
        lambda_soft=cfg.lambda_soft)


def make_bank(cohort: list[VitalSeries], cfg: ExperimentConfig, seed: int) -> SampleBank:
    return build_bank(cohort, window_spec(cfg), cfg.k_hypo, cfg.k_nonhypo, seed,
                      cfg.kshape_max_iters)


def train_model(cohort: list[VitalSeries], cfg: ExperimentConfig, seed: int):
    """Offline fine-tuning of every block on stride-1 windows of ``cohort``."""
    spec = window_spec(cfg)
    params = fc.init_params(spec.lookback_steps, cohort[0].n_channels, spec.horizon_steps,
                            cfg.hidden_dim, cfg.n_hidden, seed, scale_floor=cfg.scale_floor)
    samples = [s for series in cohort
               for s in segment_series(series, WindowSpec(spec.lookback_steps,
                                                          spec.horizon_steps, 1))]
    return fc.train(params, samples, epochs=cfg.train_epochs, lr=cfg.train_lr,
                    batch_size=cfg.batch_size, mask_spec=fc.MaskSpec(cfg.mask_ratio,
                                                                     cfg.patch_len, seed),
                    update=fc.UpdateMask.all(), seed=seed)


# --- evaluation ----------------------------------------------------------------

def is_novel(series: VitalSeries, window_start: int, truth, threshold: float = HYPO_THRESHOLD,
             duration_minutes: float = 1.0) -> bool:
    """Positive window whose hypotensive pattern never occurred earlier in the stream."""
    if not label_hypotension(truth, series.sampling_interval, threshold, duration_minutes):
        return False
    need = required_run(series.sampling_interval, duration_minutes)
    return longest_run_below(series.map[:window_start], threshold) < need


@dataclass
class CohortEval:
    strategy: str
    runs: list[PatientRun]
    events: list[EventReport]
    true_labels: np.ndarray
    pred_labels: np.ndarray
    novel: np.ndarray
    metrics: MetricsReport
    seconds: float = 0.0
    retrieval_log: RetrievalLog = field(default_factory=RetrievalLog)

    @property
    def records(self):
        return [r for run in self.runs for r in run.records]

    @property
    def novel_recall(self) -> float:
        return classification_metrics(self.pred_labels[self.novel],
                                      self.true_labels[self.novel])["recall"]

    def summary(self) -> dict:
        return {"strategy": self.strategy, **self.metrics.to_dict(),
                "novel_windows": int(self.novel.sum()), "novel_recall": self.novel_recall,
                "updates": int(sum(i.updates for run in self.runs for i in run.infos)),
                "seconds": self.seconds}


def evaluate_cohort(cohort: list[VitalSeries], params: fc.ForecasterParams,
                    bank: SampleBank | None, tta: TtaConfig, spec: WindowSpec,
                    detector: DetectorConfig, keep_log: bool = False) -> CohortEval:
    t0 = time.perf_counter()
    rlog = RetrievalLog()
    runs, events, truth_lab, pred_lab, novel = [], [], [], [], []
    threshold = bank.threshold if bank is not None else HYPO_THRESHOLD
    minutes = bank.duration_minutes if bank is not None else 1.0
    for series in cohort:
        run = run_patient(series, params, bank, tta, spec, rlog if keep_log else None)
        runs.append(run)
        for rec in run.records:
            ev = detect(rec.pred, detector)
            events.append(ev)
            pred_lab.append(ev.positive())
            truth_lab.append(label_hypotension(rec.truth, series.sampling_interval,
                                               threshold, minutes))
            novel.append(is_novel(series, rec.window_start, rec.truth, threshold, minutes))
    records = [r for run in runs for r in run.records]
    metrics = evaluate([r.pred for r in records], [r.truth for r in records],
                       pred_lab, truth_lab)
    return CohortEval(tta.strategy, runs, events, np.array(truth_lab, dtype=bool),
                      np.array(pred_lab, dtype=bool), np.array(novel, dtype=bool), metrics,
                      time.perf_counter() - t0, rlog)


def audit_leakage(runs: list[PatientRun], bank: SampleBank | None,
                  test_ids, spec: WindowSpec) -> list[str]:
    """Provenance scan; returns one message per violation (empty when clean)."""
    test_ids = set(test_ids)
    problems = []
    if bank is not None:
        for pid in sorted(bank.patient_ids & test_ids):
            problems.append(f"bank holds samples of test patient {pid}")
    for run in runs:
        for info in run.infos:
            t = info.window_start
            for pid, start in info.own_provenance:
                if pid != run.patient_id:
                    problems.append(f"{run.patient_id}@{t}: own sample from {pid}")
                if start + spec.length > t:
                    problems.append(f"{run.patient_id}@{t}: own sample {start} reaches step "
                                    f"{start + spec.length - 1}")
            if info.latest_used_step >= t:
                problems.append(f"{run.patient_id}@{t}: adaptation used step {info.latest_used_step}")
            for pid in info.retrieved_patients:
                if pid in test_ids:
                    problems.append(f"{run.patient_id}@{t}: retrieved sample from test patient {pid}")
    return problems


# --- shifted-cohort comparison ---------------------------------------------------

def directional_config(**changes) -> ExperimentConfig:
    """Settings for the shifted-cohort strategy comparison."""
    base = ExperimentConfig(scale_floor=3.0, tta_lr=1e-3, top_k=8, shift_strength=1.0)
    return base.replace(**changes)


def run_directional(cfg: ExperimentConfig, seed: int, train_shift: float = 0.0,
                    strategies=STRATEGIES) -> dict[str, CohortEval]:
    """Train and build the bank on an unshifted cohort, then stream a shifted one.

    The test cohort uses ``cfg.shift_strength``; both cohorts have
    ``cfg.n_patients`` patients and disjoint identifiers.
    """
    spec = window_spec(cfg)
    train_cohort = synth.generate(cohort_spec(cfg.replace(shift_strength=train_shift,
                                                          id_prefix="tr"), 10 * seed + 1))
    test_cohort = synth.generate(cohort_spec(cfg.replace(id_prefix="te"), 10 * seed + 2))
    bank = make_bank(train_cohort, cfg, seed)
    params, _ = train_model(train_cohort, cfg, seed)
    detector = detector_config(cfg)
    out = {}
    for strategy in strategies:
        out[strategy] = evaluate_cohort(test_cohort, params, bank,
                                        tta_config(cfg, seed, strategy), spec, detector)
        log.info("seed %d %s: %s", seed, strategy, out[strategy].summary())
    return out
