"""Offline instance-discrimination testing with a rolling gallery.

The dataset is traversed once in a shuffled order.  Before the first query the
gallery is filled with key views of the last ``K`` images of that order, so no
query ever meets another view of its own image among the distractors.  Each
query is scored against ``{its positive} U gallery`` by inner product and
counts as a hit only if the positive scores strictly highest (the positive
loses ties).  The positive key is enqueued after its query has been scored.

Encoders are callables mapping a batch ``[B, 3, S, S]`` to a list of
per-branch embedding blocks ``[B, d_b]``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..augment import AugConfig, apply_view, sample_rng, sample_view, view_iou
from ..data import Dataset, epoch_permutation
from .pca import PCAProjector, fit_pca

Encoder = Callable[[np.ndarray], Sequence[np.ndarray]]

_QUERY_STREAM = 0xE7A1
_FILL_STREAM = 0xF1A1


@dataclass
class Projection:
    """Per-branch PCA output dims (``None`` keeps a branch as is)."""

    dims: tuple
    renormalize: bool = True


@dataclass
class ProtocolEmbeddings:
    """Everything the scoring stage needs, computed once per (encoder, dataset, seed)."""

    fill: list[np.ndarray]  # per branch, [K, d_b], oldest first
    query: list[np.ndarray]  # per branch, [n, d_b], traversal order
    key: list[np.ndarray]
    ious: np.ndarray  # [n]
    ids: np.ndarray  # [n]


@dataclass
class ContrastiveResult:
    accuracy: float
    hits: np.ndarray  # bool per query, traversal order
    ious: np.ndarray
    ids: np.ndarray

    @property
    def total(self) -> int:
        return len(self.hits)


def _encode_chunks(encoder: Encoder, make_images: Callable[[np.ndarray], np.ndarray], positions, batch: int):
    parts = []
    for i in range(0, len(positions), batch):
        parts.append([np.asarray(b, dtype=np.float64) for b in encoder(make_images(positions[i : i + batch]))])
    return [np.concatenate([p[b] for p in parts]) for b in range(len(parts[0]))]


def encode_protocol(
    encoder: Encoder,
    dataset: Dataset,
    gallery_capacity: int,
    aug_cfg: AugConfig,
    seed: int = 0,
    batch_size: int = 128,
) -> ProtocolEmbeddings:
    n, S = len(dataset), dataset.size
    if gallery_capacity < 1:
        raise ValueError("gallery_capacity must be at least 1")
    if gallery_capacity >= n:
        raise ValueError(f"gallery_capacity {gallery_capacity} must be smaller than the dataset ({n})")
    order = epoch_permutation(n, seed, 0)
    ious = np.empty(n)

    def fill_views(positions):
        out = []
        for pos in positions:
            rng = sample_rng(seed, _FILL_STREAM, int(dataset.ids[pos]))
            v = sample_view(rng, S, S, aug_cfg)
            out.append(apply_view(dataset.images[pos], v, aug_cfg, rng))
        return np.stack(out)

    def pair_views(positions, which):
        # both views are drawn from one per-sample stream, so redraw and keep one
        out = []
        for pos in positions:
            rng = sample_rng(seed, _QUERY_STREAM, int(dataset.ids[pos]))
            v1 = sample_view(rng, S, S, aug_cfg)
            v2 = sample_view(rng, S, S, aug_cfg)
            x1 = apply_view(dataset.images[pos], v1, aug_cfg, rng)
            x2 = apply_view(dataset.images[pos], v2, aug_cfg, rng)
            out.append(x1 if which == 0 else x2)
        return np.stack(out)

    for i, pos in enumerate(order):
        rng = sample_rng(seed, _QUERY_STREAM, int(dataset.ids[pos]))
        ious[i] = view_iou(sample_view(rng, S, S, aug_cfg), sample_view(rng, S, S, aug_cfg))

    return ProtocolEmbeddings(
        fill=_encode_chunks(encoder, fill_views, order[n - gallery_capacity :], batch_size),
        query=_encode_chunks(encoder, lambda p: pair_views(p, 0), order, batch_size),
        key=_encode_chunks(encoder, lambda p: pair_views(p, 1), order, batch_size),
        ious=ious,
        ids=dataset.ids[order].copy(),
    )


def fit_projectors(emb: ProtocolEmbeddings, projection: Projection) -> list[PCAProjector | None]:
    """Per-branch PCA fitted on the gallery's initial fill."""
    if len(projection.dims) != len(emb.fill):
        raise ValueError(f"projection has {len(projection.dims)} dims for {len(emb.fill)} branches")
    return [None if d is None else fit_pca(block, d) for block, d in zip(emb.fill, projection.dims)]


def _combine(blocks: list[np.ndarray], projectors, renormalize: bool) -> np.ndarray:
    out = []
    for block, proj in zip(blocks, projectors):
        out.append(block if proj is None else proj.project(block, renormalize))
    return np.concatenate(out, axis=1)


def score_protocol(
    emb: ProtocolEmbeddings,
    projection: Projection | None = None,
    chunk: int = 256,
) -> ContrastiveResult:
    if projection is None:
        projectors = [None] * len(emb.fill)
        renorm = False
    else:
        projectors = fit_projectors(emb, projection)
        renorm = projection.renormalize
    gallery = _combine(emb.fill, projectors, renorm)
    Q = _combine(emb.query, projectors, renorm)
    Kq = _combine(emb.key, projectors, renorm)
    K = gallery.shape[0]
    n = Q.shape[0]
    hits = np.zeros(n, dtype=bool)
    for start in range(0, n, chunk):
        q = Q[start : start + chunk]
        k = Kq[start : start + chunk]
        B = len(q)
        ext = np.concatenate([gallery, k])  # oldest first
        scores = q @ ext.T
        # query j sees the K most recent keys before its own: ext[j : j + K]
        cols = np.arange(K)[None, :] + np.arange(B)[:, None]
        distractor_best = np.take_along_axis(scores, cols, axis=1).max(axis=1)
        positive = scores[np.arange(B), K + np.arange(B)]
        hits[start : start + B] = positive > distractor_best
        gallery = ext[B:]
    return ContrastiveResult(float(hits.mean()), hits, emb.ious, emb.ids)


def sequential_reference(emb: ProtocolEmbeddings) -> np.ndarray:
    """Unvectorised query-by-query replay of the protocol (test oracle, no projection)."""
    gallery = deque((row for row in np.concatenate(emb.fill, axis=1)), maxlen=len(emb.fill[0]))
    Q = np.concatenate(emb.query, axis=1)
    Kq = np.concatenate(emb.key, axis=1)
    hits = []
    for q, k in zip(Q, Kq):
        pos = float(q @ k)
        best = max(float(q @ g) for g in gallery)
        hits.append(pos > best)
        gallery.append(k)
    return np.array(hits)


def contrastive_test(
    encoder: Encoder,
    dataset: Dataset,
    gallery_capacity: int,
    aug_cfg: AugConfig,
    projection: Projection | None = None,
    seed: int = 0,
) -> ContrastiveResult:
    """Top-1 instance-discrimination accuracy of a frozen encoder."""
    emb = encode_protocol(encoder, dataset, gallery_capacity, aug_cfg, seed)
    return score_protocol(emb, projection)
