"""K-Shape clustering (shape extraction + SBD assignment)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .series import EPS
from .shape import ncc_many, ncc_max, shift_series

TIE_TOL = 1e-12
POWER_ITERS = 100
POWER_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class KShapeModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    iterations_run: int
    converged: bool
    cost_history: tuple[float, ...] = field(default=())

    @property
    def length(self) -> int:
        return self.centroids.shape[1]

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == j)

    def __eq__(self, other):
        if not isinstance(other, KShapeModel):
            return NotImplemented
        return (self.k == other.k and self.iterations_run == other.iterations_run
                and self.converged == other.converged
                and np.array_equal(self.centroids, other.centroids)
                and np.array_equal(self.assignments, other.assignments))


def _zrows(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    out = np.where(sd < EPS, 0.0, (X - mu) / np.where(sd < EPS, 1.0, sd))
    return out


def _zvec(v: np.ndarray) -> np.ndarray:
    return _zrows(v[None, :])[0]


def _argmin_low(values: np.ndarray) -> int:
    return int(np.flatnonzero(values <= values.min() + TIE_TOL)[0])


def sbd_to_centroid(Xz: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """SBD from z-normalized rows to a z-normalized centroid."""
    vals, _ = ncc_many(Xz, centroid)
    return np.clip(1.0 - vals, 0.0, 2.0)


def principal_eigenvector(M: np.ndarray, start: np.ndarray,
                          iters: int = POWER_ITERS, tol: float = POWER_TOL) -> np.ndarray:
    """Power iteration for the dominant eigenvector of a symmetric PSD matrix."""
    v = np.asarray(start, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm < EPS:
        v = np.linspace(-1.0, 1.0, M.shape[0])
        nrm = np.linalg.norm(v)
    v = v / nrm
    for _ in range(iters):
        w = M @ v
        wn = np.linalg.norm(w)
        if wn < EPS:
            return np.zeros_like(v)
        lam = v @ w
        resid = np.linalg.norm(w - lam * v)
        v = w / wn
        if resid <= tol * max(1.0, abs(lam)):
            break
    return v


def shape_extract(members, reference) -> np.ndarray:
    """Centroid of ``members`` after aligning each to ``reference``."""
    X = np.atleast_2d(np.asarray(members, dtype=float))
    if X.shape[0] == 0 or X.size == 0:
        raise InputError("shape_extract needs at least one member")
    ref = np.asarray(reference, dtype=float).ravel()
    n = X.shape[1]
    if ref.size != n:
        raise InputError("reference length must match members")
    has_ref = np.linalg.norm(ref) >= EPS
    if has_ref:
        aligned = np.empty_like(X)
        for i, x in enumerate(X):
            _, w = ncc_max(ref, x)
            aligned[i] = shift_series(x, w)
    else:
        aligned = X
    A = _zrows(aligned)
    Q = np.eye(n) - np.full((n, n), 1.0 / n)
    M = Q.T @ (A.T @ A) @ Q
    start = Q @ (ref if has_ref else A[0])
    v = principal_eigenvector(M, start)
    anchor = ref if has_ref else A.sum(axis=0)
    if np.linalg.norm(anchor) < EPS:
        anchor = A[0]
    if v @ anchor < 0:
        v = -v
    return _zvec(v)


def fit(samples, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 3) -> KShapeModel:
    """Cluster equal-length series with K-Shape from seeded random assignments.

    ``n_init`` restarts draw their initial labels from one generator seeded
    with ``seed``; the run with the lowest final cost is kept (ties to the
    earliest). A refined centroid replaces the previous one only when it does
    not raise its cluster's total SBD, so the recorded cost never increases.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n = X.shape[0]
    if k < 1:
        raise InputError("k must be positive")
    if n_init < 1:
        raise InputError("n_init must be positive")
    if n < k:
        raise InputError(f"need at least k={k} samples, got {n}")
    Xz = _zrows(X)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        model = _fit_once(X, Xz, k, max_iters, rng.integers(0, k, size=n))
        if best is None or model.cost_history[-1] < best.cost_history[-1]:
            best = model
    return best


def _fit_once(X, Xz, k, max_iters, labels) -> KShapeModel:
    n, m = X.shape
    centroids = np.zeros((k, m))
    costs: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        previous = labels.copy()
        for j in range(k):
            idx = np.flatnonzero(labels == j)
            if idx.size == 0:
                continue
            cand = shape_extract(X[idx], centroids[j])
            new_cost = sbd_to_centroid(Xz[idx], cand).sum()
            old_cost = sbd_to_centroid(Xz[idx], centroids[j]).sum()
            if new_cost <= old_cost:
                centroids[j] = cand
        dist = np.column_stack([sbd_to_centroid(Xz, centroids[j]) for j in range(k)])
        labels = np.array([_argmin_low(row) for row in dist])
        own = dist[np.arange(n), labels]
        for j in range(k):
            if np.any(labels == j):
                continue
            sizes = np.bincount(labels, minlength=k)
            movable = np.flatnonzero(sizes[labels] > 1)
            far = movable[np.argmax(own[movable])]
            centroids[j] = Xz[far]
            labels[far] = j
            own[far] = 0.0
        costs.append(float(own.sum()))
        if np.array_equal(labels, previous):
            converged = True
            break
    centroids.setflags(write=False)
    labels.setflags(write=False)
    return KShapeModel(k, centroids, labels, it, converged, tuple(costs))


def assign(query, model: KShapeModel) -> tuple[int, float]:
    q = np.asarray(query, dtype=float).ravel()
    if q.size != model.length:
        raise InputError(f"query length {q.size} != centroid length {model.length}")
    dists = np.array([sbd_to_centroid(_zvec(q)[None, :], c)[0] for c in model.centroids])
    j = _argmin_low(dists)
    return j, float(dists[j])


def rank_centroids(query, model: KShapeModel) -> list[tuple[int, float]]:
    """All centroids ordered by SBD to ``query`` (ties to lower index)."""
    qz = _zvec(np.asarray(query, dtype=float).ravel())[None, :]
    dists = [float(sbd_to_centroid(qz, c)[0]) for c in model.centroids]
    return sorted(enumerate(dists), key=lambda t: (round(t[1], 12), t[0]))
