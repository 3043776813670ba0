"""Flat ``key = value`` experiment configuration.

Every knob the command-line tools use lives here with its default. Files may
contain ``#`` comments and any subset of keys; unknown keys are rejected.
``none`` spells an unset optional value and lists are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError

_SECTION = "experiment"


@dataclass(frozen=True)
class ExperimentConfig:
    # paths
    cohort_dir: str = ""
    test_dir: str = ""
    bank_file: str = ""
    checkpoint: str = ""
    out_dir: str = ""
    # synthetic cohort
    n_patients: int = 50
    duration_steps: int = 300
    sampling_interval: float = 30.0
    hypo_rate: float = 0.125
    shift_strength: float = 0.0
    channels: int = 3
    id_prefix: str = "p"
    # windows
    lookback_min: float = 15.0
    horizon_min: float = 5.0
    # forecaster and offline training
    hidden_dim: int = 64
    n_hidden: int = 1
    scale_floor: float = 0.0
    train_epochs: int = 10
    train_lr: float = 0.05
    batch_size: int = 64
    # bank
    k_hypo: int = 8
    k_nonhypo: int = 8
    kshape_max_iters: int = 100
    band_radius: int | None = None
    channel_mode: str = "map_only"
    # test-time adaptation
    mode: str = "fine_tuned"
    strategy: str = "csa_tta"
    tta_epochs: int | None = None
    tta_lr: float = 1e-4
    recon_weight: float | None = None
    mask_ratio: float = 0.25
    patch_len: int | None = None
    top_k: int = 3
    ratio_hypo: int = 3
    ratio_nonhypo: int = 4
    max_history_windows: int = 3
    augment: bool = True
    noise_std_fraction: float = 0.02
    time_scale_min: float = 0.9
    time_scale_max: float = 1.1
    reset_per_patient: bool = True
    # detection
    tau_bp: float = 65.0
    tau_event: float = 0.5
    beta: float = 1.0
    delta: float = 0.0
    tau_soft: float = 0.5
    lambda_hard: float = 1.0
    lambda_soft: float = 0.5
    # runs
    seeds: tuple[int, ...] = field(default=(0,))

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.lookback_min <= 0 or self.horizon_min <= 0:
            raise ConfigError("lookback_min and horizon_min must be positive")
        if self.time_scale_min > self.time_scale_max:
            raise ConfigError("time_scale_min exceeds time_scale_max")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply ``key=value`` strings (as given on the command line)."""
        raw = {}
        for item in pairs or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        return self.replace(**_convert(raw))


_HINTS = get_type_hints(ExperimentConfig)
_NAMES = [f.name for f in fields(ExperimentConfig)]


def _parse_value(name: str, text: str):
    hint = _HINTS[name]
    s = text.strip()
    optional = "None" in str(hint)
    if optional and s.lower() == "none":
        return None
    try:
        if hint is bool:
            low = s.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(s)
        if name == "seeds":
            return tuple(int(p) for p in s.split(",") if p.strip())
        if hint is int or hint == (int | None):
            return int(s)
        if hint is float or hint == (float | None):
            return float(s)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return s


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: dict) -> dict:
    unknown = sorted(set(raw) - set(_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _parse_value(k, v) for k, v in raw.items()}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return ExperimentConfig(**_convert(dict(cp[_SECTION])))


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in _NAMES)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))
