"""Offline analyses: PCA compression and instance-discrimination retrieval tests."""

from .analyses import (
    HALF_HALF,
    SEMANTIC_ONLY,
    DimSweepReport,
    DimSweepRow,
    IoUBinReport,
    dim_sweep,
    iou_binned_accuracy,
)
from .encoders import ModelEncoder, RandomEncoder
from .pca import PCAProjector, fit_pca, jacobi_eigh, project, reconstruction_error
from .protocol import (
    ContrastiveResult,
    Projection,
    contrastive_test,
    encode_protocol,
    score_protocol,
)

__all__ = [
    "HALF_HALF",
    "SEMANTIC_ONLY",
    "ContrastiveResult",
    "DimSweepReport",
    "DimSweepRow",
    "IoUBinReport",
    "ModelEncoder",
    "PCAProjector",
    "Projection",
    "RandomEncoder",
    "contrastive_test",
    "dim_sweep",
    "encode_protocol",
    "fit_pca",
    "iou_binned_accuracy",
    "jacobi_eigh",
    "project",
    "reconstruction_error",
    "score_protocol",
]
