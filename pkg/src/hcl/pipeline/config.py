"""Flat ``key = value`` run configuration.

Every field of :class:`TrainConfig` is a config key.  Tuples are written as
comma-separated lists, booleans as ``true``/``false``.  Unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields

from ..augment import AugConfig
from ..models import BackboneConfig, HeadConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0

    # data
    data_source: str = "synthetic"  # synthetic | corpus
    data_path: str = ""
    data_n: int = 2048
    data_size: int = 64
    data_seed: int = 0

    # model
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    gn_groups: int = 4
    d_sem: int = 64
    hidden_sem: int = 128
    fpn_channels: int = 32
    spatial_res: int = 8
    head_variant: str = "pooled"

    # optimisation
    lr0: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    queue_capacity: int = 1024
    temperature: float = 0.2
    key_momentum: float = 0.999

    # augmentation (jitter strengths are assumptions, not published values)
    area_min: float = 0.2
    area_max: float = 1.0
    aspect_min: float = 3 / 4
    aspect_max: float = 4 / 3
    flip: bool = False
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    # offline evaluation
    eval_gallery: int = 1024
    eval_seed: int = 0
    iou_bins: int = 10
    sweep_dims: tuple[int, ...] = (8, 16, 32)
    sweep_mode: str = "hcl-half-half"
    renormalize: bool = True
    eval_branch: str = "concat"  # semantic | spatial | concat

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.key_momentum <= 1:
            raise ConfigError("key_momentum must lie in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.queue_capacity < self.batch_size:
            raise ConfigError("queue_capacity must hold at least one batch")
        if self.data_source not in ("synthetic", "corpus"):
            raise ConfigError(f"data_source must be synthetic or corpus, got {self.data_source!r}")
        if self.eval_branch not in ("semantic", "spatial", "concat"):
            raise ConfigError(f"eval_branch must be semantic, spatial or concat, got {self.eval_branch!r}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")

    # -- derived component configs -----------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            input_size=self.input_size,
            stage_channels=tuple(self.stage_channels),
            blocks_per_stage=tuple(self.blocks_per_stage),
            group_norm_groups=self.gn_groups,
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            d_sem=self.d_sem,
            hidden_sem=self.hidden_sem,
            fpn_channels=self.fpn_channels,
            spatial_res=self.spatial_res,
            variant=self.head_variant,
        )

    def aug_config(self) -> AugConfig:
        return AugConfig(
            area_range=(self.area_min, self.area_max),
            aspect_range=(self.aspect_min, self.aspect_max),
            flip_enabled=self.flip,
            brightness=self.brightness,
            contrast=self.contrast,
            saturation=self.saturation,
            out_size=self.input_size,
        )

    # -- text form ------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def with_overrides(self, pairs: dict[str, str]) -> "TrainConfig":
        updates = {k: _coerce(k, v) for k, v in pairs.items()}
        return dataclasses.replace(self, **updates)


_TYPES = typing.get_type_hints(TrainConfig)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"{key}: unsupported type {typ}")


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, in that order."""
    pairs: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            pairs.update(parse_pairs(fh, str(path)))
    if overrides:
        pairs.update(parse_pairs(overrides, "--set"))
    return TrainConfig().with_overrides(pairs)
