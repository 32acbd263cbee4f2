"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"CAPS" | version u32
    model table      : count u32, then per tensor
                       name_len u32 | utf-8 name | dtype u8 | rank u8 | dims u64[rank] | payload
    optimizer block  : json_len u32 | json {kind, lr, t} | tensor table (as above)
    rng block        : json_len u32 | json bit-generator state
    metadata block   : json_len u32 | json {model_config, train_config, epoch, r, ...}
    crc32 u32 over every preceding byte

The model table holds ``param/<name>`` weights and ``frozen/<name>`` masks.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (CheckpointCRCError, CheckpointError, CheckpointMagicError,
                     CheckpointTruncatedError, CheckpointVersionError)

MAGIC = b"CAPS"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3,
                np.dtype(np.bool_): 4, np.dtype(np.int64): 5}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 0.001, "t": 0, "tensors": {}})
    frozen: dict = field(default_factory=dict)
    epoch: int = 0
    r: int = 1
    best_val_loss: float = float("inf")
    rng_state: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _pack_table(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(out)


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    model_tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    model_tensors.update({f"frozen/{k}": v.astype(np.bool_) for k, v in ckpt.frozen.items()})
    opt = ckpt.optimizer
    meta = {"model_config": ckpt.model_config, "train_config": ckpt.train_config, "epoch": ckpt.epoch,
            "r": ckpt.r, "best_val_loss": ckpt.best_val_loss, "extra": ckpt.extra}
    body = b"".join([
        MAGIC, struct.pack("<I", FORMAT_VERSION),
        _pack_table(model_tensors),
        _pack_json({"kind": opt["kind"], "lr": opt["lr"], "t": opt["t"]}),
        _pack_table(opt.get("tensors", {})),
        _pack_json(ckpt.rng_state),
        _pack_json(meta),
    ])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("checkpoint ends in the middle of a record")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (name_len,) = self.unpack("<I")
            name = self.take(name_len).decode("utf-8")
            code, rank = self.unpack("<BB")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(self.take(nbytes), dtype=dtype.newbyteorder("<")).astype(dtype)
            out[name] = arr.reshape(dims)
        return out

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise CheckpointTruncatedError(f"checkpoint is only {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}; this build reads {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCRCError("CRC32 mismatch: checkpoint is corrupt or truncated")
    rd = _Reader(body)
    rd.pos = 8
    model_tensors = rd.table()
    opt = rd.json()
    opt["tensors"] = rd.table()
    rng_state = rd.json()
    meta = rd.json()
    if rd.pos != len(body):
        raise CheckpointError(f"{len(body) - rd.pos} trailing bytes before the CRC")
    params = {k[6:]: v for k, v in model_tensors.items() if k.startswith("param/")}
    frozen = {k[7:]: v for k, v in model_tensors.items() if k.startswith("frozen/")}
    return Checkpoint(model_config=meta["model_config"], params=params, optimizer=opt, frozen=frozen,
                      epoch=meta["epoch"], r=meta["r"], best_val_loss=meta["best_val_loss"],
                      rng_state=rng_state, train_config=meta["train_config"], extra=meta.get("extra", {}))


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild a :class:`CapsNetModel` carrying the checkpoint's weights."""
    from .capsnet import CapsNetConfig, CapsNetModel

    cfg = CapsNetConfig(**ckpt.model_config)
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else None
    model = CapsNetModel(cfg, seed=0, dtype=dtype)
    model.load_state_dict(ckpt.params)
    return model
