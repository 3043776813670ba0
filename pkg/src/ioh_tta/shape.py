"""Distance primitives: exact DTW and shape-based distance (SBD)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numba as nb
import numpy as np

from .errors import ConfigError, InputError
from .series import EPS, znormalize


@dataclass(frozen=True)
class DtwConfig:
    """Sakoe-Chiba radius (``None`` = unconstrained) and channel handling."""

    band_radius: int | None = None
    channel_mode: Literal["map_only", "sum_per_channel"] = "map_only"

    def __post_init__(self):
        if self.band_radius is not None and self.band_radius < 0:
            raise ConfigError("band_radius must be >= 0")
        if self.channel_mode not in ("map_only", "sum_per_channel"):
            raise ConfigError(f"unknown channel_mode {self.channel_mode!r}")


@nb.njit(cache=True)
def _dtw_batch(query, candidates, radius):
    # radius < 0 means unconstrained
    n = query.shape[0]
    k, m = candidates.shape
    out = np.empty(k)
    prev = np.empty(m + 1)
    cur = np.empty(m + 1)
    for c in range(k):
        b = candidates[c]
        prev[:] = np.inf
        prev[0] = 0.0
        for i in range(1, n + 1):
            cur[:] = np.inf
            lo = 1
            hi = m
            if radius >= 0:
                lo = max(1, i - radius)
                hi = min(m, i + radius)
            ai = query[i - 1]
            for j in range(lo, hi + 1):
                d = ai - b[j - 1]
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = d * d + best
            for j in range(m + 1):
                prev[j] = cur[j]
            prev[0] = np.inf
        out[c] = prev[m]
    return out


def _as_vector(a, name):
    a = np.ascontiguousarray(a, dtype=float).ravel()
    if a.size == 0:
        raise InputError(f"{name} is empty")
    return a


def _radius(cfg: DtwConfig | None, n: int, m: int) -> int:
    r = None if cfg is None else cfg.band_radius
    if r is None:
        return -1
    if abs(n - m) > r:
        raise InputError(f"band radius {r} cannot align lengths {n} and {m}")
    return int(r)


def dtw_distance(a, b, cfg: DtwConfig | None = None) -> float:
    """Exact DTW with squared point cost."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    r = _radius(cfg, a.size, b.size)
    return float(_dtw_batch(a, b[None, :], r)[0])


def dtw_many(query, candidates, cfg: DtwConfig | None = None) -> np.ndarray:
    """DTW from one query to each row of an equal-length candidate matrix."""
    q = _as_vector(query, "query")
    c = np.ascontiguousarray(candidates, dtype=float)
    if c.ndim != 2 or c.shape[1] == 0:
        raise InputError("candidates must be a non-empty 2-D array")
    if c.shape[0] == 0:
        return np.empty(0)
    r = _radius(cfg, q.size, c.shape[1])
    return _dtw_batch(q, c, r)


def dtw_multichannel(a, b, cfg: DtwConfig | None = None) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise InputError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    mode = "map_only" if cfg is None else cfg.channel_mode
    if mode == "map_only":
        return dtw_distance(a[:, 0], b[:, 0], cfg)
    return float(sum(dtw_distance(a[:, c], b[:, c], cfg) for c in range(a.shape[1])))


# --- cross-correlation ------------------------------------------------------

_TIE_TOL = 1e-12


def _pick_shift(cc: np.ndarray, m: int) -> int:
    """Index of the maximum, ties to smallest |shift| then negative first."""
    top = cc.max()
    idx = np.flatnonzero(cc >= top - _TIE_TOL * max(1.0, abs(top)))
    shifts = idx - (m - 1)
    best = min(zip(np.abs(shifts), shifts, idx))
    return int(best[2])


def ncc_max(a, b) -> tuple[float, int]:
    """Maximum coefficient-normalized cross-correlation and its shift.

    The correlation at shift ``w`` is ``sum_i a[i + w] * b[i]`` with zero
    padding; shifting ``b`` right by ``w`` aligns it with ``a``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size == 0:
        raise InputError(f"ncc needs equal non-empty lengths, got {a.size} and {b.size}")
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den < EPS:
        return 0.0, 0
    m = a.size
    cc = np.correlate(a, b, mode="full") / den
    k = _pick_shift(cc, m)
    return float(cc[k]), k - (m - 1)


def ncc_many(X, c) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`ncc_max` of every row of ``X`` against ``c`` (``ncc_max(c, row)``).

    Returned shifts align each row to ``c``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    c = np.asarray(c, dtype=float).ravel()
    n, m = X.shape
    if c.size != m:
        raise InputError(f"length mismatch: {m} vs {c.size}")
    nfft = 1 << int(np.ceil(np.log2(2 * m - 1)))
    spec = np.fft.rfft(c, nfft)[None, :] * np.conj(np.fft.rfft(X, nfft, axis=1))
    raw = np.fft.irfft(spec, nfft, axis=1)
    # reorder to shifts -(m-1) .. m-1
    cc = np.concatenate([raw[:, nfft - (m - 1):], raw[:, :m]], axis=1)
    den = np.linalg.norm(X, axis=1) * np.linalg.norm(c)
    vals = np.zeros(n)
    shifts = np.zeros(n, dtype=int)
    for i in range(n):
        if den[i] < EPS:
            continue
        row = cc[i] / den[i]
        k = _pick_shift(row, m)
        vals[i] = row[k]
        shifts[i] = k - (m - 1)
    return vals, shifts


def sbd(a, b) -> float:
    """Shape-based distance ``1 - max NCC`` of the z-normalized inputs, in [0, 2]."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise InputError(f"sbd needs equal lengths, got {a.size} and {b.size}")
    value, _ = ncc_max(znormalize(a)[0], znormalize(b)[0])
    return float(np.clip(1.0 - value, 0.0, 2.0))


def shift_series(x: np.ndarray, w: int) -> np.ndarray:
    """Shift right by ``w`` (left if negative) with zero fill."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    m = x.size
    if abs(w) >= m:
        return out
    if w >= 0:
        out[w:] = x[:m - w]
    else:
        out[:m + w] = x[-w:]
    return out
