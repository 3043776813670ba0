"""Dual-trigger probabilistic hypotension detection on a forecast MAP sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .series import required_run


@dataclass(frozen=True)
class DetectorConfig:
    window_size: int = 2
    tau_bp: float = 65.0
    tau_event: float = 0.5
    beta: float = 1.0
    delta: float = 0.0
    tau_soft: float = 0.5
    lambda_hard: float = 1.0
    lambda_soft: float = 0.5

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if not 0 < self.tau_event < 1 or not 0 < self.tau_soft < 1:
            raise ConfigError("tau_event and tau_soft must lie in (0, 1)")
        if self.beta <= 0 or self.lambda_hard <= 0 or self.lambda_soft <= 0:
            raise ConfigError("beta and lambdas must be positive")

    @classmethod
    def for_interval(cls, sampling_interval: float, **kw) -> "DetectorConfig":
        """Window spanning one minute at the given sampling interval."""
        return cls(window_size=required_run(sampling_interval, 1.0), **kw)


@dataclass(frozen=True)
class EventReport:
    p_final: float
    p_hard: float
    p_soft: float
    hard_windows: int
    soft_windows: int
    risk: tuple[float, ...] = field(default=())
    hard_risks: tuple[float, ...] = field(default=())
    soft_risks: tuple[float, ...] = field(default=())

    def positive(self, threshold: float = 0.5) -> bool:
        return self.p_final >= threshold

    def to_dict(self) -> dict:
        return {"p_final": self.p_final, "p_hard": self.p_hard, "p_soft": self.p_soft,
                "hard_windows": self.hard_windows, "soft_windows": self.soft_windows,
                "risk": list(self.risk)}


def sigma(x, beta: float, tau: float, delta: float):
    """Point-wise risk ``1 / (1 + exp(beta * (x - tau - delta)))``; decreasing in x."""
    t = beta * (np.asarray(x, dtype=float) - tau - delta)
    # exp overflow -> inf -> risk 0, which is the correct limit
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(t))
    return float(out) if np.ndim(out) == 0 else out


def phi(risks, lam: float) -> float:
    """Aggregate ``1 - exp(-lam * sum(risks))``."""
    r = np.asarray(list(risks), dtype=float)
    if np.any(r < 0):
        raise InputError("risks must be non-negative")
    return float(-math.expm1(-lam * r.sum())) if r.size else 0.0


def detect(sequence, cfg: DetectorConfig) -> EventReport:
    s = np.asarray(sequence, dtype=float).ravel()
    n, w = s.size, cfg.window_size
    if n < w:
        raise InputError(f"sequence of length {n} shorter than window {w}")
    if not np.all(np.isfinite(s)):
        raise InputError("sequence contains non-finite values")
    risk_hard = sigma(s, cfg.beta, cfg.tau_bp, cfg.delta)
    risk_soft = sigma(s, cfg.beta, cfg.tau_bp, 0.0)
    hard: list[float] = []
    soft: list[float] = []
    for i in range(n - w + 1):
        win = slice(i, i + w)
        if np.all(s[win] < cfg.tau_bp):
            hard.append(float(np.sum(risk_hard[win]) / w))
        r_s = float(np.sum(risk_soft[win]) / w)
        if r_s >= cfg.tau_soft:
            soft.append(r_s)
    p_hard = phi(hard, cfg.lambda_hard)
    p_soft = phi(soft, cfg.lambda_soft)
    p_final = p_hard if p_hard >= cfg.tau_event else p_soft
    return EventReport(p_final, p_hard, p_soft, len(hard), len(soft),
                       tuple(float(v) for v in risk_soft), tuple(hard), tuple(soft))
