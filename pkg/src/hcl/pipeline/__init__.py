"""Training schedule, persistence formats, and the command-line entry point."""

from .config import ConfigError, TrainConfig, load_config
from .formats import (
    Checkpoint,
    EmbeddingFile,
    FormatError,
    NotACheckpoint,
    UnsupportedVersion,
    load_checkpoint,
    load_embeddings,
    save_checkpoint,
    save_embeddings,
)
from .train import (
    SGD,
    IncompatibleCheckpoint,
    MetricsLog,
    MetricsRow,
    cosine_lr,
    export_embeddings,
    train_stage1,
    train_stage2,
)

__all__ = [
    "SGD",
    "Checkpoint",
    "ConfigError",
    "EmbeddingFile",
    "FormatError",
    "IncompatibleCheckpoint",
    "MetricsLog",
    "MetricsRow",
    "NotACheckpoint",
    "TrainConfig",
    "UnsupportedVersion",
    "cosine_lr",
    "export_embeddings",
    "load_checkpoint",
    "load_config",
    "load_embeddings",
    "save_checkpoint",
    "save_embeddings",
    "train_stage1",
    "train_stage2",
]
