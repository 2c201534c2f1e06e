"""Desk-scale backbone with stages C2..C5 plus the semantic and spatial heads.

Parameters live in flat ordered dicts ``name -> Tensor`` so that the query
and key encoders are two dicts with identical keys and shapes.  Names are
prefixed ``backbone.``, ``g1.`` (semantic head) and ``g2.`` (spatial head).
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib
from typing import Dict

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

Params = Dict[str, Tensor]

BACKBONE = "backbone."
SEMANTIC = "g1."
SPATIAL = "g2."


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    group_norm_groups: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_channels and blocks_per_stage need four entries (C2..C5)")
        if self.input_size % 32:
            raise ValueError(f"input_size must be a multiple of 32, got {self.input_size}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("every stage needs at least one block")
        for c in self.stage_channels:
            if c % self.group_norm_groups:
                raise ValueError(f"{c} channels not divisible by {self.group_norm_groups} groups")

    def resolutions(self) -> tuple[int, int, int, int]:
        s = self.input_size
        return (s // 4, s // 8, s // 16, s // 32)


@dataclass(frozen=True)
class HeadConfig:
    d_sem: int = 64
    hidden_sem: int = 128
    fpn_channels: int = 32
    spatial_res: int = 8
    # "pooled": resample each pyramid path to R x R before fusing.
    # "vanilla": fuse at the finest resolution, then pool to R x R.
    variant: str = "pooled"

    @property
    def d_spa(self) -> int:
        return self.spatial_res * self.spatial_res

    @property
    def d_total(self) -> int:
        return self.d_sem + self.d_spa


@dataclass
class StageFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def maps(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.c2, self.c3, self.c4, self.c5)


@dataclass
class EmbeddingPair:
    semantic: Tensor
    spatial: Tensor
    concat: Tensor


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def _ones(n: int, dtype) -> Tensor:
    return Tensor(np.ones(n, dtype=dtype), requires_grad=True)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


class HCLModel:
    """Pure functions of ``(params, images)`` for the two-branch encoder.

    ``backbone_calls`` counts backbone passes; tests use it to check that
    both heads share a single pass.
    """

    def __init__(self, backbone: BackboneConfig | None = None, head: HeadConfig | None = None):
        self.backbone = backbone or BackboneConfig()
        self.head = head or HeadConfig()
        self.backbone_calls = 0
        self._check_spatial_geometry()

    def _check_spatial_geometry(self) -> None:
        R = self.head.spatial_res
        for r in self.backbone.resolutions():
            ratio = max(r, R) // min(r, R)
            if max(r, R) % min(r, R) or not _is_pow2(ratio):
                raise ValueError(f"stage resolution {r} and spatial_res {R} must differ by a power of two")
        if self.head.variant not in ("pooled", "vanilla"):
            raise ValueError(f"unknown spatial head variant {self.head.variant!r}")

    # -- initialisation -------------------------------------------------

    def init_backbone(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        cfg = self.backbone
        p: Params = {}
        c_prev = 3
        c0 = cfg.stage_channels[0]
        p["backbone.stem.conv"] = _he(rng, (c0, 3, 3, 3), 27, dtype)
        p["backbone.stem.gn.gamma"] = _ones(c0, dtype)
        p["backbone.stem.gn.beta"] = _zeros(c0, dtype)
        c_prev = c0
        for s, (c, nb) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            for b in range(nb):
                name = f"backbone.c{s + 2}.{b}"
                p[f"{name}.conv"] = _he(rng, (c, c_prev, 3, 3), c_prev * 9, dtype)
                p[f"{name}.gn.gamma"] = _ones(c, dtype)
                p[f"{name}.gn.beta"] = _zeros(c, dtype)
                c_prev = c
        return p

    def init_semantic_head(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        c5 = self.backbone.stage_channels[3]
        h, d = self.head.hidden_sem, self.head.d_sem
        return {
            "g1.fc1.weight": _he(rng, (h, c5), c5, dtype),
            "g1.fc1.bias": _zeros(h, dtype),
            "g1.fc2.weight": _he(rng, (d, h), h, dtype),
            "g1.fc2.bias": _zeros(d, dtype),
        }

    def init_spatial_head(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        f = self.head.fpn_channels
        p: Params = {}
        for s, c in enumerate(self.backbone.stage_channels):
            p[f"g2.lateral{s + 2}.weight"] = _he(rng, (f, c, 1, 1), c, dtype)
            p[f"g2.lateral{s + 2}.bias"] = _zeros(f, dtype)
        p["g2.reduce.weight"] = _he(rng, (1, f, 1, 1), f, dtype)
        p["g2.reduce.bias"] = _zeros(1, dtype)
        return p

    def init_params(self, rng: np.random.Generator, dtype=np.float32, spatial: bool = True) -> Params:
        p = self.init_backbone(rng, dtype)
        p.update(self.init_semantic_head(rng, dtype))
        if spatial:
            p.update(self.init_spatial_head(rng, dtype))
        return p

    def expected_shapes(self, spatial: bool = True) -> dict[str, tuple[int, ...]]:
        rng = np.random.default_rng(0)
        return {k: v.shape for k, v in self.init_params(rng, spatial=spatial).items()}

    # -- forward --------------------------------------------------------

    def backbone_forward(self, image, params: Params) -> StageFeatures:
        image = gc.as_tensor(image)
        S = self.backbone.input_size
        if image.ndim not in (3, 4) or image.shape[-3:] != (3, S, S):
            raise gc.ShapeError(f"expected image [3,{S},{S}] (optionally batched), got {image.shape}")
        self.backbone_calls += 1
        groups = self.backbone.group_norm_groups

        def block(x, name, stride):
            x = gc.conv2d(x, params[f"{name}.conv"], stride=stride, pad=1, padding_mode="replicate")
            x = gc.group_norm(x, groups, params[f"{name}.gn.gamma"], params[f"{name}.gn.beta"])
            return gc.relu(x)

        x = block(image, "backbone.stem", 2)
        x = gc.avg_pool2d(x, 2)
        maps = []
        for s, nb in enumerate(self.backbone.blocks_per_stage):
            for b in range(nb):
                stride = 2 if (b == 0 and s > 0) else 1
                x = block(x, f"backbone.c{s + 2}.{b}", stride)
            maps.append(x)
        return StageFeatures(*maps)

    def semantic_embed(self, feats: StageFeatures, params: Params) -> Tensor:
        h = gc.global_avg_pool(feats.c5)
        h = gc.relu(gc.linear(h, params["g1.fc1.weight"], params["g1.fc1.bias"]))
        h = gc.linear(h, params["g1.fc2.weight"], params["g1.fc2.bias"])
        return gc.l2_normalize(h)

    def _laterals(self, feats: StageFeatures, params: Params) -> list[Tensor]:
        return [
            gc.conv2d(c, params[f"g2.lateral{s + 2}.weight"], bias=params[f"g2.lateral{s + 2}.bias"])
            for s, c in enumerate(feats.maps())
        ]

    @staticmethod
    def _top_down(laterals: list[Tensor]) -> list[Tensor]:
        merged = [laterals[3]]
        for lat in reversed(laterals[:3]):
            merged.append(gc.add(lat, gc.upsample_nearest2x(merged[-1])))
        return merged[::-1]  # P2..P5

    @staticmethod
    def _resample(x: Tensor, target: int) -> Tensor:
        side = x.shape[-1]
        if side > target:
            return gc.avg_pool2d(x, side // target)
        while side < target:
            x = gc.upsample_nearest2x(x)
            side *= 2
        return x

    def fuse_pyramid(self, pyramid: list[Tensor], variant: str | None = None) -> Tensor:
        """Sum P2..P5 into one ``R x R`` map."""
        variant = variant or self.head.variant
        R = self.head.spatial_res
        if variant == "pooled":
            fused = self._resample(pyramid[0], R)
            for p in pyramid[1:]:
                fused = gc.add(fused, self._resample(p, R))
            return fused
        finest = max(p.shape[-1] for p in pyramid)
        fused = self._resample(pyramid[0], finest)
        for p in pyramid[1:]:
            fused = gc.add(fused, self._resample(p, finest))
        return self._resample(fused, R)

    def spatial_embed(self, feats: StageFeatures, params: Params, variant: str | None = None) -> Tensor:
        pyramid = self._top_down(self._laterals(feats, params))
        fused = self.fuse_pyramid(pyramid, variant)
        single = gc.conv2d(fused, params["g2.reduce.weight"], bias=params["g2.reduce.bias"])
        lead = single.shape[:-3]
        return gc.l2_normalize(gc.reshape(single, lead + (self.head.d_spa,)))

    def hcl_embed(self, image, params: Params) -> EmbeddingPair:
        feats = self.backbone_forward(image, params)
        sem = self.semantic_embed(feats, params)
        spa = self.spatial_embed(feats, params)
        return EmbeddingPair(sem, spa, gc.concat([sem, spa], axis=-1))

    def embed(self, image, params: Params, stage: int) -> Tensor:
        """Contrastive embedding for a training stage: semantic (1) or concatenated (2)."""
        if stage == 1:
            return self.semantic_embed(self.backbone_forward(image, params), params)
        return self.hcl_embed(image, params).concat


def downstream_params(params: Params) -> Params:
    """The backbone subset that a downstream task would inherit; head weights are dropped."""
    return {k: v for k, v in params.items() if k.startswith(BACKBONE)}


def param_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
