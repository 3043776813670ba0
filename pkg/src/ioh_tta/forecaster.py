"""Small MLP forecaster with a prediction head, a masked-reconstruction head,
hand-written gradients and block-wise update masks.

Encoder: per-channel instance normalization of the lookback, a tanh input
layer, optional tanh hidden layers, then layer normalization. The prediction
head maps the encoding to H normalized MAP values that are de-normalized with
the lookback MAP statistics; the reconstruction head maps the encoding of a
masked input back to the full normalized input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer, read_container, write_container
from .errors import ConfigError, InputError
from .series import EPS, Sample

LN_EPS = 1e-5
CKPT_MAGIC = b"IOHCKPT\x00"
CKPT_VERSION = 1

GROUPS = ("input", "hidden", "norm", "pred", "recon")


@dataclass(frozen=True)
class MaskSpec:
    mask_ratio: float = 0.25
    patch_len: int | None = None  # None -> max(2, H // 2)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if self.patch_len is not None and self.patch_len < 1:
            raise ConfigError("patch_len must be positive")


@dataclass(frozen=True)
class UpdateMask:
    """Which parameter groups a gradient step may touch."""

    input: bool = True
    hidden: bool = False
    norm: bool = True
    pred: bool = True
    recon: bool = True

    def __post_init__(self):
        if not any(getattr(self, g) for g in GROUPS):
            raise ConfigError("update mask must enable at least one block")

    @classmethod
    def all(cls) -> "UpdateMask":
        return cls(True, True, True, True, True)

    def allows(self, block: str) -> bool:
        return getattr(self, block_group(block))


def block_group(name: str) -> str:
    if name in ("W_in", "b_in"):
        return "input"
    if name.startswith(("W_hid", "b_hid")):
        return "hidden"
    if name in ("ln_gain", "ln_bias"):
        return "norm"
    if name in ("W_pred", "b_pred"):
        return "pred"
    if name in ("W_recon", "b_recon"):
        return "recon"
    raise KeyError(name)


@dataclass(eq=False)
class ForecasterParams:
    lookback: int
    channels: int
    horizon: int
    hidden_dim: int
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    scale_floor: float = 0.0  # lower bound on per-channel lookback std (raw units)

    @property
    def n_hidden(self) -> int:
        return sum(1 for k in self.blocks if k.startswith("W_hid"))

    def copy(self) -> "ForecasterParams":
        return ForecasterParams(self.lookback, self.channels, self.horizon, self.hidden_dim,
                                {k: v.copy() for k, v in self.blocks.items()}, self.scale_floor)

    def names(self) -> list[str]:
        return list(self.blocks)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.blocks.values())

    def __eq__(self, other):
        if not isinstance(other, ForecasterParams):
            return NotImplemented
        return (self.names() == other.names()
                and all(np.array_equal(self.blocks[k], other.blocks[k]) for k in self.blocks)
                and (self.lookback, self.channels, self.horizon, self.hidden_dim,
                     self.scale_floor)
                == (other.lookback, other.channels, other.horizon, other.hidden_dim,
                    other.scale_floor))


def init_params(lookback: int, channels: int, horizon: int, hidden_dim: int = 64,
                n_hidden: int = 1, seed: int = 0, zero_heads: bool = False,
                scale_floor: float = 0.0) -> ForecasterParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; LN gain 1, bias 0."""
    rng = np.random.default_rng(seed)
    n_in = lookback * channels
    d = hidden_dim

    def uni(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    blocks = {"W_in": uni(n_in, (n_in, d)), "b_in": uni(n_in, d)}
    for i in range(n_hidden):
        blocks[f"W_hid{i}"] = uni(d, (d, d))
        blocks[f"b_hid{i}"] = uni(d, d)
    blocks["ln_gain"] = np.ones(d)
    blocks["ln_bias"] = np.zeros(d)
    blocks["W_pred"] = uni(d, (d, horizon))
    blocks["b_pred"] = uni(d, horizon)
    blocks["W_recon"] = uni(d, (d, n_in))
    blocks["b_recon"] = uni(d, n_in)
    if zero_heads:
        for k in ("W_pred", "b_pred", "W_recon", "b_recon"):
            blocks[k][...] = 0.0
    if scale_floor < 0:
        raise ConfigError("scale_floor must be >= 0")
    return ForecasterParams(lookback, channels, horizon, d, blocks, float(scale_floor))


# --- batching ---------------------------------------------------------------

def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    if not samples:
        raise InputError("empty batch")
    X = np.stack([s.x for s in samples])
    Y = np.stack([s.y for s in samples])
    return X, Y


def instance_norm(X: np.ndarray, floor: float = 0.0):
    """Per-sample, per-channel lookback statistics.

    Scales are raised to ``floor``; below EPS the channel is treated as
    constant and normalizes to zero.
    """
    mu = X.mean(axis=1)
    sd = X.std(axis=1)
    if floor > 0:
        sd = np.maximum(sd, floor)
    const = sd < EPS
    sd = np.where(const, EPS, sd)
    U = np.where(const[:, None, :], 0.0, (X - mu[:, None, :]) / sd[:, None, :])
    return U, mu, sd


def make_masks(spec: MaskSpec, batch: int, lookback: int, channels: int,
               horizon: int, salt: int = 0) -> np.ndarray:
    """Boolean (batch, L, C) masks of contiguous per-channel patches."""
    patch = spec.patch_len or max(2, horizon // 2)
    patch = min(patch, lookback)
    n_patches = -(-lookback // patch)
    n_mask = max(1, int(round(spec.mask_ratio * n_patches)))
    rng = np.random.default_rng([spec.seed, salt])
    M = np.zeros((batch, lookback, channels), dtype=bool)
    for b in range(batch):
        for c in range(channels):
            for p in rng.choice(n_patches, size=n_mask, replace=False):
                M[b, p * patch:(p + 1) * patch, c] = True
    return M


# --- forward ----------------------------------------------------------------

def _encode(p: ForecasterParams, U: np.ndarray):
    """U: (B, L*C) -> z (B, d) plus cache for backprop."""
    B = p.blocks
    acts = [U]
    a = np.tanh(U @ B["W_in"] + B["b_in"])
    acts.append(a)
    for i in range(p.n_hidden):
        a = np.tanh(a @ B[f"W_hid{i}"] + B[f"b_hid{i}"])
        acts.append(a)
    m = a.mean(axis=1, keepdims=True)
    s = np.sqrt(a.var(axis=1, keepdims=True) + LN_EPS)
    nrm = (a - m) / s
    z = nrm * B["ln_gain"] + B["ln_bias"]
    return z, (acts, nrm, s)


def _encode_backward(p: ForecasterParams, cache, dz: np.ndarray, grads: dict) -> None:
    B = p.blocks
    acts, nrm, s = cache
    grads["ln_gain"] += (dz * nrm).sum(axis=0)
    grads["ln_bias"] += dz.sum(axis=0)
    dn = dz * B["ln_gain"]
    da = (dn - dn.mean(axis=1, keepdims=True)
          - nrm * (dn * nrm).mean(axis=1, keepdims=True)) / s
    for i in reversed(range(p.n_hidden)):
        a = acts[i + 2]
        dpre = da * (1.0 - a * a)
        grads[f"W_hid{i}"] += acts[i + 1].T @ dpre
        grads[f"b_hid{i}"] += dpre.sum(axis=0)
        da = dpre @ B[f"W_hid{i}"].T
    dpre = da * (1.0 - acts[1] ** 2)
    grads["W_in"] += acts[0].T @ dpre
    grads["b_in"] += dpre.sum(axis=0)


def _check_x(p: ForecasterParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1:] != (p.lookback, p.channels):
        raise InputError(f"expected lookback shape {(p.lookback, p.channels)}, got {X.shape[1:]}")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite forecaster input")
    return X


def forward(p: ForecasterParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Forecast from one (L, C) lookback: returns (H MAP values in mmHg, encoding)."""
    y, z = forward_batch(p, x)
    return y[0], z[0]


def forward_batch(p: ForecasterParams, X) -> tuple[np.ndarray, np.ndarray]:
    X = _check_x(p, X)
    U, mu, sd = instance_norm(X, p.scale_floor)
    z, _ = _encode(p, U.reshape(len(X), -1))
    y_norm = z @ p.blocks["W_pred"] + p.blocks["b_pred"]
    return y_norm * sd[:, :1] + mu[:, :1], z


def reconstruct(p: ForecasterParams, X, masks) -> tuple[np.ndarray, np.ndarray]:
    """(reconstruction, normalized target), both (B, L*C); masked inputs are zeroed."""
    X = _check_x(p, X)
    U, _, _ = instance_norm(X, p.scale_floor)
    U = U.reshape(len(X), -1)
    M = np.asarray(masks, dtype=bool).reshape(len(X), -1)
    z, _ = _encode(p, np.where(M, 0.0, U))
    return z @ p.blocks["W_recon"] + p.blocks["b_recon"], U


# --- losses -----------------------------------------------------------------

def loss_pred(p: ForecasterParams, sample: Sample) -> float:
    """MSE between forecast and target in the lookback-normalized MAP scale."""
    X = _check_x(p, sample.x)
    U, mu, sd = instance_norm(X, p.scale_floor)
    z, _ = _encode(p, U.reshape(1, -1))
    y_norm = z @ p.blocks["W_pred"] + p.blocks["b_pred"]
    t = (sample.y - mu[0, 0]) / sd[0, 0]
    return float(np.mean((y_norm[0] - t) ** 2))


def recon_error(recon: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    m = np.asarray(mask, dtype=bool).ravel()
    diff = (np.asarray(recon).ravel() - np.asarray(target).ravel())[m]
    return float(np.mean(diff ** 2))


def loss_recon(p: ForecasterParams, sample: Sample, mask) -> float:
    """Masked-position MSE of the reconstruction head.

    ``mask`` is a boolean (L, C) array or a :class:`MaskSpec` (drawn with salt 0).
    """
    if isinstance(mask, MaskSpec):
        mask = make_masks(mask, 1, p.lookback, p.channels, p.horizon)[0]
    r, U = reconstruct(p, sample.x, mask[None])
    return recon_error(r[0], U[0], mask)


def batch_loss(p: ForecasterParams, X, Y, masks, w_pred: float = 1.0,
               w_recon: float = 1.0) -> float:
    """Mean over the batch of ``w_pred * L_pred + w_recon * L_recon``."""
    X = _check_x(p, X)
    Bn = len(X)
    U, mu, sd = instance_norm(X, p.scale_floor)
    U = U.reshape(Bn, -1)
    z, _ = _encode(p, U)
    y_norm = z @ p.blocks["W_pred"] + p.blocks["b_pred"]
    T = (np.asarray(Y) - mu[:, :1]) / sd[:, :1]
    lp = np.mean((y_norm - T) ** 2, axis=1)
    total = w_pred * lp
    if w_recon:
        M = np.asarray(masks, dtype=bool).reshape(Bn, -1)
        zm, _ = _encode(p, np.where(M, 0.0, U))
        r = zm @ p.blocks["W_recon"] + p.blocks["b_recon"]
        lr = ((r - U) ** 2 * M).sum(axis=1) / M.sum(axis=1)
        total = total + w_recon * lr
    return float(total.mean())


def grad_batch(p: ForecasterParams, X, Y, masks, update: UpdateMask | None = None,
               w_pred: float = 1.0, w_recon: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradient of :func:`batch_loss`, zeroed outside ``update``."""
    X = _check_x(p, X)
    Bn = len(X)
    H = p.horizon
    blocks = p.blocks
    grads = {k: np.zeros_like(v) for k, v in blocks.items()}

    U, mu, sd = instance_norm(X, p.scale_floor)
    U = U.reshape(Bn, -1)
    z, cache = _encode(p, U)
    y_norm = z @ blocks["W_pred"] + blocks["b_pred"]
    T = (np.asarray(Y, dtype=float) - mu[:, :1]) / sd[:, :1]
    err = y_norm - T
    loss = w_pred * np.mean(err ** 2, axis=1)
    dy = w_pred * 2.0 * err / (H * Bn)
    grads["W_pred"] += z.T @ dy
    grads["b_pred"] += dy.sum(axis=0)
    _encode_backward(p, cache, dy @ blocks["W_pred"].T, grads)

    if w_recon:
        M = np.asarray(masks, dtype=bool).reshape(Bn, -1)
        zm, cache_m = _encode(p, np.where(M, 0.0, U))
        r = zm @ blocks["W_recon"] + blocks["b_recon"]
        cnt = M.sum(axis=1, keepdims=True)
        diff = (r - U) * M
        loss = loss + w_recon * (diff ** 2).sum(axis=1) / cnt[:, 0]
        dr = w_recon * 2.0 * diff / (cnt * Bn)
        grads["W_recon"] += zm.T @ dr
        grads["b_recon"] += dr.sum(axis=0)
        _encode_backward(p, cache_m, dr @ blocks["W_recon"].T, grads)

    if update is not None:
        for k in grads:
            if not update.allows(k):
                grads[k][...] = 0.0
    return float(loss.mean()), grads


def grad_combined(p: ForecasterParams, batch, mask_spec: MaskSpec,
                  update: UpdateMask | None = None, w_pred: float = 1.0,
                  w_recon: float = 1.0, salt: int = 0) -> dict[str, np.ndarray]:
    X, Y = stack_batch(batch)
    masks = make_masks(mask_spec, len(X), p.lookback, p.channels, p.horizon, salt)
    return grad_batch(p, X, Y, masks, update, w_pred, w_recon)[1]


def sgd_step(p: ForecasterParams, grads: dict[str, np.ndarray], lr: float,
             update: UpdateMask | None = None) -> ForecasterParams:
    """Return ``p - lr * grads``; blocks outside ``update`` are copied verbatim."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    new = {}
    for k, v in p.blocks.items():
        if update is not None and not update.allows(k):
            new[k] = v.copy()
        else:
            new[k] = v - lr * grads[k]
    return ForecasterParams(p.lookback, p.channels, p.horizon, p.hidden_dim, new, p.scale_floor)


def train(p: ForecasterParams, samples, epochs: int = 10, lr: float = 1e-4,
          batch_size: int = 64, mask_spec: MaskSpec | None = None,
          update: UpdateMask | None = None, w_pred: float = 1.0, w_recon: float = 1.0,
          seed: int = 0) -> tuple[ForecasterParams, list[float]]:
    """Minibatch SGD over shuffled samples; returns params and per-epoch mean loss."""
    samples = list(samples)
    if not samples:
        raise InputError("no training samples")
    mask_spec = mask_spec or MaskSpec(seed=seed)
    X, Y = stack_batch(samples)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            masks = make_masks(mask_spec, len(idx), p.lookback, p.channels, p.horizon, step)
            loss, g = grad_batch(p, X[idx], Y[idx], masks, update, w_pred, w_recon)
            p = sgd_step(p, g, lr, update)
            losses.append(loss * len(idx))
            step += 1
        history.append(sum(losses) / len(X))
    return p, history


# --- checkpoints ------------------------------------------------------------

def params_to_bytes(p: ForecasterParams) -> bytes:
    w = Writer()
    for v in (p.lookback, p.channels, p.horizon, p.hidden_dim):
        w.u64(v)
    w.f64(p.scale_floor)
    w.u64(len(p.blocks))
    for name, arr in p.blocks.items():
        w.text(name)
        w.array(arr)
    return w.payload()


def params_from_bytes(payload: bytes) -> ForecasterParams:
    r = Reader(payload)
    L, C, H, d = (r.u64() for _ in range(4))
    floor = r.f64()
    blocks = {}
    for _ in range(r.u64()):
        name = r.text()
        blocks[name] = r.array().copy()
    r.done()
    return ForecasterParams(L, C, H, d, blocks, floor)


def save_checkpoint(p: ForecasterParams, path) -> None:
    write_container(path, CKPT_MAGIC, CKPT_VERSION, params_to_bytes(p))


def load_checkpoint(path) -> ForecasterParams:
    return params_from_bytes(read_container(path, CKPT_MAGIC, CKPT_VERSION))
