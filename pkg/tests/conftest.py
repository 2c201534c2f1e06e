import numpy as np
import pytest

from hcl.models import BackboneConfig, HCLModel, HeadConfig
from hcl.pipeline.config import TrainConfig

# smallest geometry the model accepts: 32x32 input, C2..C5 at 8, 4, 2, 1
TINY_BACKBONE = BackboneConfig(input_size=32, stage_channels=(4, 4, 8, 8), group_norm_groups=2)
TINY_HEAD = HeadConfig(d_sem=8, hidden_sem=8, fpn_channels=4, spatial_res=4)


def tiny_model(variant: str = "pooled") -> HCLModel:
    head = HeadConfig(
        d_sem=TINY_HEAD.d_sem,
        hidden_sem=TINY_HEAD.hidden_sem,
        fpn_channels=TINY_HEAD.fpn_channels,
        spatial_res=TINY_HEAD.spatial_res,
        variant=variant,
    )
    return HCLModel(TINY_BACKBONE, head)


def smoke_config(**overrides) -> TrainConfig:
    """Small but learnable training setup used by the smoke fixtures."""
    base = dict(
        data_n=256,
        data_size=32,
        input_size=32,
        spatial_res=4,
        queue_capacity=256,
        stage1_epochs=25,
        stage2_epochs=25,
        eval_gallery=128,
        sweep_dims=(4, 8),
    )
    base.update(overrides)
    return TrainConfig(**base)


def micro_config(**overrides) -> TrainConfig:
    """A few steps only; for determinism and plumbing tests."""
    base = dict(
        data_n=64,
        data_size=32,
        input_size=32,
        stage_channels=(8, 8, 16, 16),
        d_sem=16,
        hidden_sem=16,
        fpn_channels=8,
        spatial_res=4,
        queue_capacity=64,
        batch_size=16,
        stage1_epochs=1,
        stage2_epochs=1,
        eval_gallery=32,
        sweep_dims=(4, 8),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_runs():
    """Stage-1 and stage-2 smoke training on the 256-image synthetic fixture."""
    from hcl.pipeline import train as T

    cfg = smoke_config()
    ds = T.load_dataset(cfg)
    log1, log2 = T.MetricsLog(), T.MetricsLog()
    c1 = T.train_stage1(cfg, ds, metrics=log1)
    c2 = T.train_stage2(cfg, c1, ds, metrics=log2)
    return {"cfg": cfg, "dataset": ds, "ckpt1": c1, "ckpt2": c2, "rows1": log1.rows, "rows2": log2.rows}


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion, printed after the run

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
