"""Versioned binary checkpoints with bit-exact round trips.

Layout (all integers little-endian):

    magic  b"MIMD"
    u32    format version (currently 1)
    u32    header length, then that many bytes of JSON (configs, seed, step,
           parameter count, optimizer-state flag)
    per parameter: u16 name length, name, u8 dtype tag, u8 ndim, u32 dims...,
           raw values
    if optimizer state present: per parameter (same order) the first- and
           second-moment buffers

Writes go to a temporary file followed by an atomic rename, so a partially
written checkpoint is never observable under the target path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadMagic, GridMismatch, IoError, MissingCheckpoint, VersionMismatch
from .objectives import LossKind, NormKind
from .teachers import TeacherSpec
from .tensor import Tensor
from .train import OptimizerState, TrainConfig
from .vit import ViTConfig, ViTParams

MAGIC = b"MIMD"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass(frozen=True)
class Checkpoint:
    params: ViTParams
    opt_state: OptimizerState | None
    train_config: TrainConfig | None
    seed: int
    step: int
    version: int


def _le(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False).tobytes()


def _config_to_json(config: ViTConfig | None) -> dict | None:
    return None if config is None else asdict(config)


def _train_config_to_json(config: TrainConfig | None) -> dict | None:
    return None if config is None else asdict(config)


def _train_config_from_json(blob: dict | None) -> TrainConfig | None:
    if blob is None:
        return None
    blob = dict(blob)
    blob["teacher"] = TeacherSpec(**blob["teacher"])
    blob["norm"] = NormKind(**blob["norm"])
    blob["loss"] = LossKind(**blob["loss"])
    return TrainConfig(**blob)


def save_checkpoint(path: str, params: ViTParams,
                    opt_state: OptimizerState | None = None,
                    train_config: TrainConfig | None = None,
                    seed: int = 0, step: int | None = None) -> None:
    if step is None:
        step = opt_state.step if opt_state is not None else 0
    names = params.names()
    header = json.dumps({
        "vit_config": _config_to_json(params.config),
        "train_config": _train_config_to_json(train_config),
        "seed": int(seed),
        "step": int(step),
        "param_count": len(names),
        "has_opt_state": opt_state is not None,
        "opt_step": opt_state.step if opt_state is not None else 0,
    }, sort_keys=True).encode()

    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    for name in names:
        t = params[name]
        tag = _DTYPE_TAGS.get(t.data.dtype)
        if tag is None:
            raise IoError(f"unsupported parameter dtype {t.data.dtype} for {name}")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(_le(t.data))
    if opt_state is not None:
        for name in names:
            chunks.append(_le(opt_state.m[name]))
            chunks.append(_le(opt_state.v[name]))

    blob = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint near {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise IoError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path} is not a checkpoint (magic {blob[:4]!r})")
    reader = _Reader(blob)
    reader.take(4)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, supported {VERSION}")
    (header_len,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoError(f"corrupt checkpoint header: {exc}") from exc

    vit_config = None
    if header["vit_config"] is not None:
        vit_config = ViTConfig(**header["vit_config"])
    train_config = _train_config_from_json(header["train_config"])

    tensors = {}
    for _ in range(header["param_count"]):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        tag, ndim = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise IoError(f"unknown dtype tag {tag} for {name}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * dtype.itemsize)
        array = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        tensors[name] = Tensor(array, requires_grad=True)

    params = ViTParams(tensors, vit_config)
    opt_state = None
    if header["has_opt_state"]:
        m, v = {}, {}
        for name in params.names():
            dtype = params[name].data.dtype
            size = params[name].data.size * dtype.itemsize
            m[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(
                params[name].shape).copy()
            v[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(
                params[name].shape).copy()
        opt_state = OptimizerState(m, v, header["opt_step"])
    return Checkpoint(params, opt_state, train_config,
                      header["seed"], header["step"], version)


def load_teacher_checkpoint(path: str, expected_grid: tuple[int, int]) -> ViTParams:
    """Load frozen-teacher parameters, enforcing patch-grid compatibility."""
    if not os.path.exists(path):
        raise MissingCheckpoint(f"teacher checkpoint {path!r} does not exist")
    ckpt = load_checkpoint(path)
    if ckpt.params.config is None:
        raise GridMismatch("teacher checkpoint carries no architecture config")
    if ckpt.params.config.grid != tuple(expected_grid):
        raise GridMismatch(
            f"teacher grid {ckpt.params.config.grid} != student grid {tuple(expected_grid)}")
    return ckpt.params.frozen()
