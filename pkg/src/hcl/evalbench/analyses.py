"""IoU-binned retrieval accuracy and PCA dimension sweeps, with JSON reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from ..augment import AugConfig
from ..data import Dataset
from .protocol import Encoder, Projection, encode_protocol, score_protocol

SEMANTIC_ONLY = "semantic-only"
HALF_HALF = "hcl-half-half"


@dataclass
class IoUBinReport:
    bin_edges: list[float]
    counts: list[int]
    accuracy: list[float | None]  # None for empty bins
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def midpoints(self) -> list[float]:
        e = self.bin_edges
        return [(e[i] + e[i + 1]) / 2 for i in range(len(e) - 1)]

    def spearman(self) -> float:
        """Rank correlation of bin midpoint vs. accuracy over non-empty bins."""
        pairs = [(m, a) for m, a in zip(self.midpoints(), self.accuracy) if a is not None]
        if len(pairs) < 2:
            return float("nan")
        mids, accs = zip(*pairs)
        rho = spearmanr(mids, accs).statistic
        return float(rho)

    def to_json(self) -> str:
        return json.dumps({"kind": "iou_bins", **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IoUBinReport":
        d = json.loads(text)
        d.pop("kind", None)
        return cls(**d)


@dataclass
class DimSweepRow:
    total_dim: int
    branch_dims: list[int]
    accuracy: float


@dataclass
class DimSweepReport:
    mode: str
    rows: list[DimSweepRow]
    seed: int = 0
    config: dict = field(default_factory=dict)

    def accuracy_at(self, dim: int) -> float:
        for r in self.rows:
            if r.total_dim == dim:
                return r.accuracy
        raise KeyError(dim)

    def to_json(self) -> str:
        return json.dumps({"kind": "dim_sweep", **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DimSweepReport":
        d = json.loads(text)
        d.pop("kind", None)
        d["rows"] = [DimSweepRow(**r) for r in d["rows"]]
        return cls(**d)


def bin_edges(bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, bins + 1)


def bin_index(ious: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1]; IoU = 1 falls in the last bin."""
    return np.minimum((np.asarray(ious) * bins).astype(int), bins - 1)


def aggregate_iou_bins(ious: np.ndarray, hits: np.ndarray, bins: int) -> tuple[list[int], list[float | None]]:
    idx = bin_index(ious, bins)
    counts, accs = [], []
    for b in range(bins):
        sel = idx == b
        c = int(sel.sum())
        counts.append(c)
        accs.append(float(hits[sel].mean()) if c else None)
    return counts, accs


def iou_binned_accuracy(
    encoder: Encoder,
    dataset: Dataset,
    gallery_capacity: int,
    bins: int = 10,
    aug_cfg: AugConfig | None = None,
    seed: int = 0,
) -> IoUBinReport:
    """Top-1 accuracy per view-IoU bin under crop-and-rescale-only augmentation."""
    if bins < 2:
        raise ValueError("need at least two IoU bins")
    cfg = (aug_cfg or AugConfig(out_size=dataset.size)).crop_only()
    emb = encode_protocol(encoder, dataset, gallery_capacity, cfg, seed)
    res = score_protocol(emb)
    counts, accs = aggregate_iou_bins(res.ious, res.hits, bins)
    return IoUBinReport(
        bin_edges=[float(e) for e in bin_edges(bins)],
        counts=counts,
        accuracy=accs,
        seed=seed,
        config={"gallery_capacity": gallery_capacity, "overall_accuracy": res.accuracy, **_aug_echo(cfg)},
    )


def branch_dims(dim: int, mode: str) -> tuple[int, ...]:
    if mode == SEMANTIC_ONLY:
        return (dim,)
    if mode == HALF_HALF:
        if dim % 2:
            raise ValueError(f"half-half split needs an even dimension, got {dim}")
        return (dim // 2, dim // 2)
    raise ValueError(f"unknown sweep mode {mode!r}")


def dim_sweep(
    encoder: Encoder,
    dataset: Dataset,
    dims: Sequence[int],
    mode: str,
    gallery_capacity: int,
    aug_cfg: AugConfig | None = None,
    seed: int = 0,
    renormalize: bool = True,
) -> DimSweepReport:
    """Accuracy of PCA-compressed features at each total dimension.

    ``semantic-only`` uses the first branch alone; ``hcl-half-half`` gives each
    of the two branches half the budget.
    """
    splits = [branch_dims(d, mode) for d in dims]
    cfg = aug_cfg or AugConfig(out_size=dataset.size)
    if mode == SEMANTIC_ONLY:
        enc = lambda x: list(encoder(x))[:1]  # noqa: E731
    else:
        enc = encoder
    emb = encode_protocol(enc, dataset, gallery_capacity, cfg, seed)
    if mode == HALF_HALF and len(emb.fill) != 2:
        raise ValueError("half-half mode needs an encoder with semantic and spatial branches")
    rows = []
    for d, split in zip(dims, splits):
        res = score_protocol(emb, Projection(split, renormalize))
        rows.append(DimSweepRow(int(d), [int(s) for s in split], res.accuracy))
    echo = {"gallery_capacity": gallery_capacity, "renormalize": renormalize, **_aug_echo(cfg)}
    return DimSweepReport(mode=mode, rows=rows, seed=seed, config=echo)


def _aug_echo(cfg: AugConfig) -> dict:
    d = asdict(cfg)
    return {f"aug.{k}": (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
