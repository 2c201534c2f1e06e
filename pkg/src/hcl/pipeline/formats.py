"""Binary checkpoint and embedding files (little-endian).

Checkpoint::

    b"HCL1" u32 version u8 stage u64 step u32 tensor_count
    tensor_count x (u16 name_len, name utf-8, u8 rank, rank x u64 dims, f32 data)
    u32 queue_filled u32 queue_dim f32[filled * dim]     (rows oldest first)
    u32 rng_len bytes[rng_len]                           (JSON)

Embeddings::

    b"HEMB" u32 version u64 n u32 d_sem u32 d_spa
    n x (u64 id, f32[d_sem + d_spa])
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

CKPT_MAGIC = b"HCL1"
CKPT_VERSION = 1
EMB_MAGIC = b"HEMB"
EMB_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed or truncated file."""


class NotACheckpoint(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


@dataclass
class Checkpoint:
    stage: int
    step: int
    tensors: dict[str, np.ndarray]
    queue: np.ndarray  # [filled, dim], oldest first
    rng_state: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix``, with the prefix stripped."""
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.buf = memoryview(raw)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (needed {n} more, file has {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack(fmt, self.take(size))
        return vals if len(vals) > 1 else vals[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} unexpected trailing bytes")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<IBQI", ckpt.version, ckpt.stage, ckpt.step, len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        enc = name.encode("utf-8")
        arr = np.asarray(arr)
        out.write(struct.pack("<H", len(enc)))
        out.write(enc)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    q = np.asarray(ckpt.queue)
    filled, dim = (q.shape if q.ndim == 2 else (0, 0))
    out.write(struct.pack("<II", filled, dim))
    out.write(np.ascontiguousarray(q, dtype=_F32).tobytes())
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(rng)))
    out.write(rng)
    return out.getvalue()


def parse_checkpoint(raw: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(raw, what)
    if len(raw) < 4 or bytes(r.take(4)) != CKPT_MAGIC:
        raise NotACheckpoint(f"{what}: not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"{what}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    stage, step, count = r.unpack("<BQI")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = bytes(r.take(r.unpack("<H"))).decode("utf-8")
        rank = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        tensors[name] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    filled, dim = r.unpack("<II")
    queue = r.floats(filled * dim).reshape(filled, dim)
    rng_raw = bytes(r.take(r.unpack("<I")))
    r.done()
    try:
        rng_state = json.loads(rng_raw.decode("utf-8")) if rng_raw else {}
    except ValueError as exc:
        raise FormatError(f"{what}: corrupt rng block") from exc
    return Checkpoint(stage=stage, step=step, tensors=tensors, queue=queue, rng_state=rng_state, version=version)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), str(path))


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingFile:
    ids: np.ndarray  # [n] uint64
    vectors: np.ndarray  # [n, d_sem + d_spa] float32
    d_sem: int
    d_spa: int
    version: int = EMB_VERSION

    @property
    def semantic(self) -> np.ndarray:
        return self.vectors[:, : self.d_sem]

    @property
    def spatial(self) -> np.ndarray:
        return self.vectors[:, self.d_sem :]


def embedding_bytes(emb: EmbeddingFile) -> bytes:
    n = len(emb.ids)
    d = emb.d_sem + emb.d_spa
    if emb.vectors.shape != (n, d):
        raise ValueError(f"vectors {emb.vectors.shape} do not match n={n}, d={d}")
    rec = np.zeros(n, dtype=[("id", "<u8"), ("v", "<f4", (d,))])
    rec["id"] = emb.ids
    rec["v"] = emb.vectors
    head = EMB_MAGIC + struct.pack("<IQII", emb.version, n, emb.d_sem, emb.d_spa)
    return head + rec.tobytes()


def parse_embeddings(raw: bytes, what: str = "embeddings") -> EmbeddingFile:
    r = _Reader(raw, what)
    if len(raw) < 4 or bytes(r.take(4)) != EMB_MAGIC:
        raise FormatError(f"{what}: not an embedding file (bad magic)")
    version = r.unpack("<I")
    if version != EMB_VERSION:
        raise UnsupportedVersion(f"{what}: unsupported embedding version {version}")
    n, d_sem, d_spa = r.unpack("<QII")
    d = d_sem + d_spa
    dt = np.dtype([("id", "<u8"), ("v", "<f4", (d,))])
    rec = np.frombuffer(r.take(n * dt.itemsize), dtype=dt)
    r.done()
    return EmbeddingFile(rec["id"].astype(np.uint64), rec["v"].astype(np.float32).reshape(n, d), d_sem, d_spa, version)


def save_embeddings(emb: EmbeddingFile, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(embedding_bytes(emb))


def load_embeddings(path: str | os.PathLike) -> EmbeddingFile:
    with open(path, "rb") as fh:
        return parse_embeddings(fh.read(), str(path))
