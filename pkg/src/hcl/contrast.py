"""InfoNCE objective over a FIFO memory queue, plus the momentum key encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError, Tensor


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def similarity(z1, z2, T: float) -> float:
    """``exp(z1 . z2 / T)``."""
    _check_temperature(T)
    a = np.asarray(getattr(z1, "data", z1), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(z2, "data", z2), dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"similarity: dims differ ({a.size} vs {b.size})")
    return float(np.exp(a @ b / T))


class MemoryQueue:
    """Fixed-capacity FIFO gallery of detached key embeddings.

    Rows are stored in a ring buffer; :meth:`contents` returns them oldest
    first, which is also the order the loss consumes them in.
    """

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ValueError(f"queue needs capacity >= 1 and dim >= 1, got {capacity}, {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.slots = np.zeros((self.capacity, self.dim), dtype=dtype)
        self.head = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def push(self, keys) -> None:
        keys = np.asarray(getattr(keys, "data", keys))
        if keys.ndim == 1:
            keys = keys[None]
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"queue holds {self.dim}-d keys, got batch of shape {keys.shape}")
        n = keys.shape[0]
        if n > self.capacity:
            raise ValueError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        idx = (self.head + np.arange(n)) % self.capacity
        self.slots[idx] = keys
        self.head = int((self.head + n) % self.capacity)
        self.filled = min(self.capacity, self.filled + n)

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first (a copy)."""
        if self.filled < self.capacity:
            return self.slots[: self.filled].copy()
        return np.roll(self.slots, -self.head, axis=0)

    def clear(self) -> None:
        self.slots[:] = 0
        self.head = 0
        self.filled = 0

    @classmethod
    def from_rows(cls, capacity: int, rows: np.ndarray, dtype=np.float32) -> "MemoryQueue":
        rows = np.asarray(rows)
        q = cls(capacity, rows.shape[1], dtype=dtype)
        if rows.shape[0] > capacity:
            raise ValueError(f"{rows.shape[0]} rows do not fit a queue of capacity {capacity}")
        if len(rows):
            q.push(rows)
        return q


def _gallery_rows(gallery, dim: int, dtype) -> np.ndarray:
    if gallery is None:
        return np.zeros((0, dim), dtype=dtype)
    rows = gallery.contents() if isinstance(gallery, MemoryQueue) else np.asarray(getattr(gallery, "data", gallery))
    if rows.ndim != 2 or (rows.shape[0] and rows.shape[1] != dim):
        raise ShapeError(f"gallery rows must be {dim}-d, got shape {rows.shape}")
    return rows.astype(dtype, copy=False)


def info_nce_loss(q, k_pos, gallery, T: float, return_logits: bool = False):
    """Mean InfoNCE loss of queries ``q`` against positives ``k_pos`` and gallery negatives.

    ``q`` and ``k_pos`` are ``[d]`` or ``[B, d]``; gradients flow to whichever
    of them requires grad.  The gallery (a :class:`MemoryQueue` or ``[N, d]``
    array) is always treated as constant.  Evaluated in log-sum-exp form::

        loss_i = logsumexp([q_i.k_i, q_i.G^T] / T) - q_i.k_i / T

    With ``return_logits`` the ``[B, 1+N]`` logit matrix is returned alongside.
    """
    _check_temperature(T)
    q, k_pos = gc.as_tensor(q), gc.as_tensor(k_pos)
    if q.shape != k_pos.shape or q.ndim not in (1, 2):
        raise ShapeError(f"info_nce_loss: query {q.shape} and positive {k_pos.shape} must match")
    if q.data.size == 0:
        raise ShapeError("info_nce_loss: empty embeddings")
    squeeze = q.ndim == 1
    qd = q.data[None] if squeeze else q.data
    kd = k_pos.data[None] if squeeze else k_pos.data
    B, d = qd.shape
    G = _gallery_rows(gallery, d, qd.dtype)

    l_pos = (qd * kd).sum(axis=1, keepdims=True) / T
    l_neg = qd @ G.T / T
    logits = np.concatenate([l_pos, l_neg], axis=1)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m + np.log(z)
    losses = (lse - l_pos)[:, 0]
    loss = np.asarray(losses.mean(), dtype=qd.dtype)

    def backward(g):
        p = e / z
        coef_pos = (p[:, :1] - 1.0) * (g / (B * T))
        coef_neg = p[:, 1:] * (g / (B * T))
        gq = gk = None
        if q.requires_grad:
            gq = coef_pos * kd + coef_neg @ G
            gq = gq[0] if squeeze else gq
        if k_pos.requires_grad:
            gk = coef_pos * qd
            gk = gk[0] if squeeze else gk
        return gq, gk

    out = gc.emit(loss, (q, k_pos), backward)
    if return_logits:
        return out, logits
    return out


def brute_force_info_nce(q: np.ndarray, k_pos: np.ndarray, gallery: np.ndarray, T: float) -> float:
    """Literal ratio-of-similarities form for a single query (test oracle; overflows at small T)."""
    num = similarity(q, k_pos, T)
    den = num + np.sum([similarity(q, x, T) for x in gallery]) if len(gallery) else num
    return float(-np.log(num / den))


@dataclass
class MomentumPair:
    """Query parameters trained by SGD and key parameters tracking them by EMA."""

    query: Mapping[str, Tensor]
    key: Mapping[str, Tensor]
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"key momentum must lie in [0, 1], got {self.momentum}")
        check_same_structure(self.query, self.key)

    def update(self) -> None:
        momentum_update(self.query, self.key, self.momentum)


def check_same_structure(a: Mapping[str, Tensor], b: Mapping[str, Tensor]) -> None:
    if list(a) != list(b):
        missing = sorted(set(a) ^ set(b))
        raise ShapeError(f"parameter sets differ in names/order: {missing[:5] or 'order differs'}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeError(f"{name}: shape {a[name].shape} vs {b[name].shape}")


def momentum_update(query: Mapping[str, Tensor], key: Mapping[str, Tensor], m: float) -> None:
    """In place ``key <- m * key + (1 - m) * query``; never recorded on a graph."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"key momentum must lie in [0, 1], got {m}")
    check_same_structure(query, key)
    if m == 1.0:
        return
    for name, k in key.items():
        qd = query[name].data
        if m == 0.0:
            k.data = qd.copy()
        else:
            k.data = (m * k.data + (1.0 - m) * qd).astype(k.data.dtype, copy=False)


def key_copy(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Detached copy of ``params`` for use as a key encoder."""
    return {name: Tensor(t.data.copy(), requires_grad=False) for name, t in params.items()}
