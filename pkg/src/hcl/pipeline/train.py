"""Two-stage contrastive pre-training: semantic warm-up, then semantic + spatial."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, TextIO

import numpy as np

from .. import gradcore as gc
from ..augment import AugConfig, ViewRect, apply_view, sample_rng, sample_view
from ..contrast import MemoryQueue, MomentumPair, info_nce_loss, key_copy
from ..data import Dataset, epoch_permutation, generate_synthetic, load_corpus
from ..evalbench.encoders import ModelEncoder
from ..models import HCLModel, Params
from .config import TrainConfig
from .formats import Checkpoint, EmbeddingFile, save_embeddings

KEY = "key/"
SGD_BUF = "sgd/"
_WARMUP_STREAM = 0x57A7
_G2_INIT_STREAM = 0x6202


class IncompatibleCheckpoint(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("incompatible checkpoint:\n  " + "\n  ".join(problems))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 to zero at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Heavy-ball SGD with decoupled-from-nothing (L2) weight decay, PyTorch update order."""

    def __init__(self, params: Params, momentum: float, weight_decay: float, velocity=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = velocity or {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class MetricsRow:
    step: int
    epoch: int
    stage: int
    loss: float
    lr: float
    top1: float
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    stage: int
    step: int
    params: Params
    key: Params
    velocity: dict[str, np.ndarray]
    queue: MemoryQueue


def load_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.data_source == "synthetic":
        return generate_synthetic(cfg.data_seed, cfg.data_n, cfg.data_size)
    return load_corpus(cfg.data_path, cfg.data_size)


def build_model(cfg: TrainConfig) -> HCLModel:
    return HCLModel(cfg.backbone_config(), cfg.head_config())


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def stage_total_steps(cfg: TrainConfig, n: int, stage: int) -> int:
    epochs = cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs
    return epochs * steps_per_epoch(n, cfg.batch_size)


# ---------------------------------------------------------------------------
# checkpoint <-> state


def state_to_checkpoint(state: TrainState, cfg: TrainConfig) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        tensors[name] = t.data
    for name, t in state.key.items():
        tensors[KEY + name] = t.data
    for name, v in state.velocity.items():
        tensors[SGD_BUF + name] = v
    rng_state = {
        "seed": cfg.seed,
        "derivation": "SeedSequence([seed, stage, epoch, sample_id])",
        "stage": state.stage,
        "optimizer_reset_at_stage_start": True,
    }
    return Checkpoint(state.stage, state.step, tensors, state.queue.contents(), rng_state)


def check_compatible(ckpt: Checkpoint, model: HCLModel, stage: int) -> None:
    """Raise :class:`IncompatibleCheckpoint` listing every field that does not fit ``model``."""
    problems: list[str] = []
    if ckpt.stage not in (1, 2) or (stage == 1 and ckpt.stage != 1):
        problems.append(f"stage: checkpoint is stage {ckpt.stage}, cannot continue stage {stage}")
    with_spatial = ckpt.stage == 2
    expected = model.expected_shapes(spatial=with_spatial)
    groups = {"": expected, KEY: expected}
    if ckpt.step > 0 or ckpt.stage == stage:
        groups[SGD_BUF] = expected
    for prefix, shapes in groups.items():
        have = ckpt.group(prefix) if prefix else {
            k: v for k, v in ckpt.tensors.items() if not k.startswith((KEY, SGD_BUF))
        }
        for name, shape in shapes.items():
            if name not in have:
                problems.append(f"missing tensor {prefix}{name}")
            elif tuple(have[name].shape) != tuple(shape):
                problems.append(f"{prefix}{name}: shape {tuple(have[name].shape)}, expected {tuple(shape)}")
        for name in have:
            if name not in shapes:
                problems.append(f"unexpected tensor {prefix}{name}")
    if ckpt.stage == stage and len(ckpt.queue):
        dim = model.head.d_sem if stage == 1 else model.head.d_total
        if ckpt.queue.shape[1] != dim:
            problems.append(f"queue: rows are {ckpt.queue.shape[1]}-d, expected {dim}")
    if problems:
        raise IncompatibleCheckpoint(problems)


def _tensors(arrays: dict[str, np.ndarray], requires_grad: bool, order) -> Params:
    return {k: gc.Tensor(np.array(arrays[k], dtype=np.float32), requires_grad=requires_grad) for k in order}


def state_from_checkpoint(ckpt: Checkpoint, model: HCLModel, cfg: TrainConfig) -> TrainState:
    """Resume a stage mid-way from a checkpoint of that same stage."""
    check_compatible(ckpt, model, ckpt.stage)
    order = list(model.expected_shapes(spatial=ckpt.stage == 2))
    plain = {k: v for k, v in ckpt.tensors.items() if not k.startswith((KEY, SGD_BUF))}
    params = _tensors(plain, True, order)
    key = _tensors(ckpt.group(KEY), False, order)
    vel_src = ckpt.group(SGD_BUF)
    velocity = {k: np.array(vel_src[k], dtype=np.float32) for k in order}
    dim = model.head.d_sem if ckpt.stage == 1 else model.head.d_total
    queue = MemoryQueue(cfg.queue_capacity, dim)
    if len(ckpt.queue):
        queue.push(np.asarray(ckpt.queue, dtype=np.float32))
    return TrainState(ckpt.stage, ckpt.step, params, key, velocity, queue)


# ---------------------------------------------------------------------------
# training loop


def _views(images: np.ndarray, ids: np.ndarray, cfg: TrainConfig, aug: AugConfig, stage: int, epoch: int):
    S = images.shape[-1]
    x1, x2 = [], []
    for img, i in zip(images, ids):
        rng = sample_rng(cfg.seed, stage, epoch, int(i))
        v1 = sample_view(rng, S, S, aug)
        v2 = sample_view(rng, S, S, aug)
        x1.append(apply_view(img, v1, aug, rng))
        x2.append(apply_view(img, v2, aug, rng))
    return np.stack(x1), np.stack(x2)


def warm_queue(state: TrainState, model: HCLModel, dataset: Dataset, cfg: TrainConfig) -> None:
    """Fill the queue with key-encoder embeddings of randomly drawn, augmented samples."""
    aug = cfg.aug_config()
    n, S = len(dataset), dataset.size
    K = state.queue.capacity
    draw = sample_rng(cfg.seed, state.stage, _WARMUP_STREAM)
    picks = draw.choice(n, size=K, replace=K > n)
    chunk = min(128, K)
    for start in range(0, K, chunk):
        imgs = []
        for j in range(start, min(K, start + chunk)):
            rng = sample_rng(cfg.seed, state.stage, _WARMUP_STREAM, j)
            v = sample_view(rng, S, S, aug)
            imgs.append(apply_view(dataset.images[picks[j]], v, aug, rng))
        state.queue.push(model.embed(np.stack(imgs), state.key, state.stage).data)


def _run_stage(
    state: TrainState,
    model: HCLModel,
    dataset: Dataset,
    cfg: TrainConfig,
    metrics: Callable[[MetricsRow], None] | None,
    stop_after: int | None,
) -> TrainState:
    stage = state.stage
    n = len(dataset)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total = stage_total_steps(cfg, n, stage)
    if state.step == 0 and total > 0 and state.queue.filled == 0:
        warm_queue(state, model, dataset, cfg)
    aug = cfg.aug_config()
    opt = SGD(state.params, cfg.sgd_momentum, cfg.weight_decay, state.velocity)
    pair = MomentumPair(state.params, state.key, cfg.key_momentum)
    t0 = time.perf_counter()
    end = total if stop_after is None else min(total, state.step + stop_after)
    order_epoch, order = -1, None
    while state.step < end:
        step = state.step
        epoch, b = divmod(step, per_epoch)
        if epoch != order_epoch:
            order = epoch_permutation(n, cfg.seed, (stage << 20) + epoch)
            order_epoch = epoch
        idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        x1, x2 = _views(dataset.images[idx], dataset.ids[idx], cfg, aug, stage, epoch)
        lr = cosine_lr(step, total, cfg.lr0)

        opt.zero_grad()
        with gc.Graph() as g:
            q = model.embed(x1, state.params, stage)
            pair.update()
            k = model.embed(x2, state.key, stage).data
            loss, logits = info_nce_loss(q, k, state.queue, cfg.temperature, return_logits=True)
            g.backward(loss)
        opt.step(lr)
        state.queue.push(k)
        state.step += 1

        if metrics is not None:
            top1 = float(np.mean(logits[:, 0] > logits[:, 1:].max(axis=1))) if logits.shape[1] > 1 else 1.0
            metrics(MetricsRow(step, epoch, stage, float(loss.data), lr, top1, time.perf_counter() - t0))
    return state


def new_stage1_state(model: HCLModel, cfg: TrainConfig) -> TrainState:
    params = model.init_params(sample_rng(cfg.seed, 1, 0x1A17), spatial=False)
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    return TrainState(1, 0, params, key_copy(params), velocity, MemoryQueue(cfg.queue_capacity, cfg.d_sem))


def train_stage1(
    cfg: TrainConfig,
    dataset: Dataset,
    resume: Checkpoint | None = None,
    metrics: Callable[[MetricsRow], None] | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Semantic-only (MoCo-style) warm-up.  ``stop_after`` ends early after that many steps."""
    model = build_model(cfg)
    if resume is not None:
        if resume.stage != 1:
            raise IncompatibleCheckpoint([f"stage: checkpoint is stage {resume.stage}, cannot resume stage 1"])
        state = state_from_checkpoint(resume, model, cfg)
    else:
        state = new_stage1_state(model, cfg)
    _run_stage(state, model, dataset, cfg, metrics, stop_after)
    return state_to_checkpoint(state, cfg)


def begin_stage2(ckpt: Checkpoint, model: HCLModel, cfg: TrainConfig) -> TrainState:
    """Stage-2 state from a finished stage-1 checkpoint: fresh spatial head, reset optimizer, empty queue."""
    check_compatible(ckpt, model, 2)
    order1 = list(model.expected_shapes(spatial=False))
    plain = {k: v for k, v in ckpt.tensors.items() if not k.startswith((KEY, SGD_BUF))}
    params = _tensors(plain, True, order1)
    key = _tensors(ckpt.group(KEY), False, order1)
    g2 = model.init_spatial_head(sample_rng(cfg.seed, 2, _G2_INIT_STREAM))
    params.update(g2)
    key.update(key_copy(g2))
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    return TrainState(2, 0, params, key, velocity, MemoryQueue(cfg.queue_capacity, model.head.d_total))


def train_stage2(
    cfg: TrainConfig,
    ckpt: Checkpoint,
    dataset: Dataset,
    metrics: Callable[[MetricsRow], None] | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Full two-branch training from a stage-1 checkpoint (or resume of a stage-2 one)."""
    model = build_model(cfg)
    if ckpt.stage == 2:
        state = state_from_checkpoint(ckpt, model, cfg)
    else:
        state = begin_stage2(ckpt, model, cfg)
    _run_stage(state, model, dataset, cfg, metrics, stop_after)
    return state_to_checkpoint(state, cfg)


class MetricsLog:
    """Collects rows in memory and optionally mirrors them to a JSON-lines stream."""

    def __init__(self, stream: TextIO | None = None):
        self.rows: list[MetricsRow] = []
        self.stream = stream

    def __call__(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self.stream is not None:
            self.stream.write(row.to_json() + "\n")
            self.stream.flush()


# ---------------------------------------------------------------------------
# checkpoint consumers


def query_params(ckpt: Checkpoint) -> Params:
    plain = {k: v for k, v in ckpt.tensors.items() if not k.startswith((KEY, SGD_BUF))}
    return {k: gc.Tensor(np.array(v, dtype=np.float32)) for k, v in plain.items()}


def checkpoint_encoder(ckpt: Checkpoint, cfg: TrainConfig, branch: str) -> ModelEncoder:
    model = build_model(cfg)
    check_compatible(ckpt, model, ckpt.stage)
    branches = ("semantic", "spatial") if branch == "concat" else (branch,)
    return ModelEncoder(model, query_params(ckpt), branches)


def identity_views(images: np.ndarray, out_size: int) -> np.ndarray:
    S = images.shape[-1]
    cfg = AugConfig(flip_enabled=False, brightness=0, contrast=0, saturation=0, out_size=out_size)
    full = ViewRect(0, 0, S, S)
    return np.stack([apply_view(img, full, cfg) for img in images])


def export_embeddings(ckpt: Checkpoint, dataset: Dataset, path, branch: str, cfg: TrainConfig) -> EmbeddingFile:
    """Un-augmented embeddings of every record; the unexported branch is zero-filled."""
    if branch not in ("semantic", "spatial", "concat"):
        raise ValueError(f"branch must be semantic, spatial or concat, got {branch!r}")
    model = build_model(cfg)
    check_compatible(ckpt, model, ckpt.stage)
    params = query_params(ckpt)
    has_spatial = ckpt.stage == 2
    if branch != "semantic" and not has_spatial:
        raise ValueError(f"a stage-{ckpt.stage} checkpoint has no spatial head to export")
    d_sem, d_spa = model.head.d_sem, (model.head.d_spa if has_spatial else 0)
    out = np.zeros((len(dataset), d_sem + d_spa), dtype=np.float32)
    for start in range(0, len(dataset), 128):
        x = identity_views(dataset.images[start : start + 128], cfg.input_size)
        feats = model.backbone_forward(x, params)
        sl = slice(start, start + len(x))
        if branch in ("semantic", "concat"):
            out[sl, :d_sem] = model.semantic_embed(feats, params).data
        if branch in ("spatial", "concat"):
            out[sl, d_sem:] = model.spatial_embed(feats, params).data
    emb = EmbeddingFile(dataset.ids.astype(np.uint64), out, d_sem, d_spa)
    if path is not None:
        save_embeddings(emb, path)
    return emb
