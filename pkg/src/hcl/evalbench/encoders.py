"""Frozen encoders usable by the retrieval protocols."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..models import HCLModel, Params, param_checksum

BRANCHES = ("semantic", "spatial")


class ModelEncoder:
    """Per-branch embeddings of a trained model; never records a graph or updates params."""

    def __init__(self, model: HCLModel, params: Params, branches: Sequence[str] = BRANCHES):
        unknown = set(branches) - set(BRANCHES)
        if unknown or not branches:
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}, got {branches}")
        if "spatial" in branches and not any(k.startswith("g2.") for k in params):
            raise ValueError("parameters have no spatial head (stage-1 checkpoint?)")
        self.model = model
        self.params = params
        self.branches = tuple(branches)

    def __call__(self, images: np.ndarray) -> list[np.ndarray]:
        feats = self.model.backbone_forward(images, self.params)
        out = []
        for b in self.branches:
            if b == "semantic":
                out.append(self.model.semantic_embed(feats, self.params).data)
            else:
                out.append(self.model.spatial_embed(feats, self.params).data)
        return out

    def checksum(self) -> str:
        return param_checksum(self.params)


class RandomEncoder:
    """I.i.d. random unit vectors per call, ignoring the images."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def __call__(self, images: np.ndarray) -> list[np.ndarray]:
        z = self.rng.standard_normal((len(images), self.dim))
        return [z / np.linalg.norm(z, axis=1, keepdims=True)]
