"""Versioned binary checkpoint: JSON header plus a named tensor table.

Layout (little-endian)::

    b"PRGC" | version u32 | header_len u32 | header JSON (UTF-8)
    tensor payloads, in header order
    crc32 u32 of everything before it
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..encoder import EmbeddingStore
from .config import TrainConfig
from .model import RetrieverModel

MAGIC = b"PRGC"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: RetrieverModel) -> bytes:
    for group in (model.params, model.rparams):
        for name, arr in group.items():
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"tensor {name} has non-finite values")
    code = "f4" if model.dtype == np.float32 else "f8"
    table, payload = [], []
    for group, prefix in ((model.params, "retriever/"), (model.rparams, "rating/")):
        for name in sorted(group):
            arr = np.ascontiguousarray(group[name], dtype=_DTYPES[code])
            table.append({"name": prefix + name, "shape": list(arr.shape), "dtype": code})
            payload.append(arr.tobytes())
    header = {
        "format_version": VERSION,
        "tie_axis": model.config.tie_axis,
        "d": model.dim,
        "kappa": model.config.kappa,
        "backend_name": model.backend_name,
        "config": model.config.to_dict(),
        "users": model.users,
        "items": model.items,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(data: bytes, store: EmbeddingStore | None = None) -> RetrieverModel:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 12 + hlen + 4:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (checksum mismatch)")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checkpoint header is unreadable") from None
    params, rparams = {}, {}
    off = 12 + hlen
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(body):
            raise CheckpointError("checkpoint is truncated")
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        arr = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        off += nbytes
        group, _, name = entry["name"].partition("/")
        (params if group == "retriever" else rparams)[name] = arr
    if off != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    config = TrainConfig.from_dict(header["config"])
    model = RetrieverModel(params, rparams, header["users"], header["items"], config,
                           header["backend_name"])
    if model.dim != header["d"]:
        raise CheckpointError("header dimension disagrees with tensors")
    if store is not None:
        check_store(model, store)
    return model


def check_store(model: RetrieverModel, store: EmbeddingStore) -> None:
    if store.dim != model.dim:
        raise CheckpointError(
            f"dimension mismatch: checkpoint d={model.dim}, embedding store d={store.dim}")


def write_checkpoint(model: RetrieverModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(save_checkpoint(model))


def read_checkpoint(path: str | os.PathLike, store: EmbeddingStore | None = None) -> RetrieverModel:
    return load_checkpoint(Path(path).read_bytes(), store)
