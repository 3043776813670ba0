"""Coarse-to-fine retrieval from the sample bank and adaptation-set assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kshape
from .bank import SUBSETS, SampleBank
from .errors import ConfigError, InputError
from .series import HYPO_MINUTES, HYPO_THRESHOLD, Sample, WindowSpec, label_hypotension
from .shape import DtwConfig, dtw_distance, dtw_many


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    noise_std_fraction: float = 0.02
    time_scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.time_scale_range
        if not (0 < lo <= 1 <= hi):
            raise ConfigError(f"time_scale_range must satisfy 0 < lo <= 1 <= hi, got {(lo, hi)}")
        if self.noise_std_fraction < 0:
            raise ConfigError("noise_std_fraction must be >= 0")
        object.__setattr__(self, "time_scale_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 3
    ratio_hypo: int = 3
    ratio_nonhypo: int = 4
    max_history_windows: int = 3
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dtw: DtwConfig = field(default_factory=DtwConfig)

    def __post_init__(self):
        for name in ("top_k", "ratio_hypo", "ratio_nonhypo", "max_history_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Hit:
    """One retrieved bank sample with the query that found it."""

    sample: Sample
    distance: float
    subset: str
    query_index: int
    cluster: int

    @property
    def sort_key(self):
        return (self.distance, self.sample.patient_id, self.sample.start_step)


@dataclass
class RetrievalLog:
    records: list[dict] = field(default_factory=list)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass(frozen=True)
class AdaptationSet:
    own_samples: tuple[Sample, ...]
    retrieved_samples: tuple[Sample, ...]

    @property
    def samples(self) -> list[Sample]:
        return [*self.own_samples, *self.retrieved_samples]

    @property
    def provenance_flags(self) -> list[str]:
        return ["own"] * len(self.own_samples) + ["retrieved"] * len(self.retrieved_samples)

    def __len__(self) -> int:
        return len(self.own_samples) + len(self.retrieved_samples)


# --- queries ----------------------------------------------------------------

def history_fragments(history, spec: WindowSpec, max_windows: int) -> list[tuple[int, np.ndarray]]:
    """Non-overlapping ``(offset, fragment)`` pairs of length L+H, newest first.

    ``offset`` is the fragment's first row within ``history``.
    """
    h = np.asarray(history, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    n = spec.length
    out = []
    end = h.shape[0]
    while end - n >= 0 and len(out) < max_windows:
        out.append((end - n, h[end - n:end]))
        end -= n
    return out


def make_queries(history, spec: WindowSpec, max_history_windows: int = 3) -> list[np.ndarray]:
    """MAP-channel query vectors cut from the most recent history backwards."""
    return [frag[:, 0].copy() for _, frag in history_fragments(history, spec, max_history_windows)]


def own_samples(history, spec: WindowSpec, patient_id: str, origin: int,
                sampling_interval: float, max_windows: int,
                threshold: float = HYPO_THRESHOLD,
                duration_minutes: float = HYPO_MINUTES) -> list[Sample]:
    """Split each history fragment into (lookback, horizon); ``origin`` is the
    absolute step of ``history[0]``. Fragments with missing values are skipped."""
    L = spec.lookback_steps
    out = []
    for offset, frag in history_fragments(history, spec, max_windows):
        if not np.all(np.isfinite(frag)):
            continue
        y = frag[L:, 0]
        label = label_hypotension(y, sampling_interval, threshold, duration_minutes)
        out.append(Sample(frag[:L], y, label, patient_id, origin + offset))
    return out


# --- retrieval --------------------------------------------------------------

def _distances(query: np.ndarray, bank: SampleBank, subset: str,
               members: np.ndarray, cfg: DtwConfig) -> np.ndarray:
    q_map = query[:, 0] if query.ndim == 2 else query
    d = dtw_many(q_map, bank.vectors(subset)[members], cfg)
    if cfg.channel_mode == "sum_per_channel" and query.ndim == 2 and query.shape[1] > 1:
        # non-MAP channels only exist over the lookback in bank samples
        _, samples = bank.subset(subset)
        L = bank.spec.lookback_steps
        extra = np.array([
            sum(dtw_distance(query[:L, c], samples[i].x[:, c], cfg)
                for c in range(1, query.shape[1]))
            for i in members
        ])
        d = d + extra
    return d


def retrieve(queries, bank: SampleBank, cfg: RetrievalConfig,
             log: RetrievalLog | None = None, query_ids=None) -> list[Hit]:
    """Top-k DTW neighbours inside each subset's nearest non-empty K-Shape cluster."""
    n = bank.spec.length
    best: dict[tuple[str, int], Hit] = {}
    for qi, query in enumerate(queries):
        q = np.asarray(query, dtype=float)
        q_map = q[:, 0] if q.ndim == 2 else q.ravel()
        if q_map.size != n:
            raise InputError(f"query length {q_map.size} != bank fragment length {n}")
        record = {"query": qi if query_ids is None else query_ids[qi]}
        for subset in SUBSETS:
            model, samples = bank.subset(subset)
            if not samples:
                record[subset] = {"cluster": None, "distances": []}
                continue
            chosen = None
            fallback = False
            for j, _ in kshape.rank_centroids(q_map, model):
                members = model.members(j)
                if members.size:
                    chosen = (j, members)
                    break
                fallback = True
            j, members = chosen
            dist = _distances(q, bank, subset, members, cfg.dtw)
            order = sorted(range(members.size),
                           key=lambda t: (dist[t], samples[members[t]].patient_id,
                                          samples[members[t]].start_step))
            top = order[:cfg.top_k]
            record[subset] = {"cluster": j, "fallback": fallback,
                              "distances": [float(dist[t]) for t in top]}
            for t in top:
                s = samples[members[t]]
                hit = Hit(s, float(dist[t]), subset, qi, j)
                prev = best.get(s.provenance)
                if prev is None or hit.distance < prev.distance:
                    best[s.provenance] = hit
        if log is not None:
            log.records.append(record)
    return sorted(best.values(), key=lambda h: (SUBSETS.index(h.subset), *h.sort_key))


def sample_balance(retrieved, ratio_hypo: int = 3, ratio_nonhypo: int = 4) -> list[Sample]:
    """Largest hypo:non-hypo selection at exactly the requested ratio, closest first.

    Accepts :class:`Hit` objects (ranked by distance) or bare samples (kept in
    the given order).
    """
    if ratio_hypo < 1 or ratio_nonhypo < 1:
        raise ConfigError("ratios must be positive")
    hypo, non = [], []
    for pos, item in enumerate(retrieved):
        if isinstance(item, Hit):
            key, sample = (item.distance, pos), item.sample
        else:
            key, sample = (0.0, pos), item
        (hypo if sample.label else non).append((key, sample))
    hypo.sort(key=lambda t: t[0])
    non.sort(key=lambda t: t[0])
    t = min(len(hypo) // ratio_hypo, len(non) // ratio_nonhypo)
    return [s for _, s in hypo[:t * ratio_hypo]] + [s for _, s in non[:t * ratio_nonhypo]]


# --- augmentation -----------------------------------------------------------

def _time_scale(v: np.ndarray, factor: float) -> np.ndarray:
    """Linear resampling to ``round(len * factor)`` points, then crop or edge-pad."""
    n = v.size
    if factor == 1.0 or n < 2:
        return v.copy()
    new_n = max(2, int(round(n * factor)))
    grid = np.linspace(0.0, n - 1, new_n)
    res = np.interp(grid, np.arange(n), v)
    if new_n >= n:
        return res[:n]
    return np.concatenate([res, np.full(n - new_n, res[-1])])


def augment(samples, cfg: AugmentConfig, sampling_interval: float, salt: int = 0,
            threshold: float = HYPO_THRESHOLD,
            duration_minutes: float = HYPO_MINUTES) -> list[Sample]:
    """Gaussian noise plus random time scaling; labels are recomputed."""
    samples = list(samples)
    if not cfg.enabled:
        return samples
    rng = np.random.default_rng([cfg.seed, salt])
    lo, hi = cfg.time_scale_range
    out = []
    for s in samples:
        L = s.x.shape[0]
        factor = rng.uniform(lo, hi)
        full_map = s.map_vector
        map_new = _time_scale(full_map, factor)
        map_new = map_new + rng.normal(0.0, 1.0, map_new.size) * cfg.noise_std_fraction * full_map.std()
        x = s.x.copy()
        x[:, 0] = map_new[:L]
        for c in range(1, x.shape[1]):
            ch = _time_scale(s.x[:, c], factor)
            x[:, c] = ch + rng.normal(0.0, 1.0, L) * cfg.noise_std_fraction * s.x[:, c].std()
        y = map_new[L:]
        label = label_hypotension(y, sampling_interval, threshold, duration_minutes)
        out.append(Sample(x, y, label, s.patient_id, s.start_step, {"augmented": True}))
    return out


def assemble(own, retrieved) -> AdaptationSet:
    """Union of own-history and retrieved samples, each provenance kept once."""
    seen: set = set()
    own_out, ret_out = [], []
    for bucket, src in ((own_out, own), (ret_out, retrieved)):
        for s in src:
            if s.provenance in seen:
                continue
            seen.add(s.provenance)
            bucket.append(s)
    return AdaptationSet(tuple(own_out), tuple(ret_out))
