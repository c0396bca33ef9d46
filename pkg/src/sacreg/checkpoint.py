"""Binary checkpoints.

Layout (little-endian)::

    b"SACK"  u16 version  u64 iteration  u64 adam_step
    u32 config_len  config bytes (UTF-8)
    u32 n_tensors
    n_tensors x [u32 name_len, name bytes, u32 rank, rank x u32 extents, f32 data]

Parameters come first in network order, then each moment buffer under
``<name>.m`` and ``<name>.v``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState
from .tensor import ContractError

MAGIC = b"SACK"
VERSION = 1
_HEAD = struct.Struct("<4sHQQ")
_U32 = struct.Struct("<I")


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    config_text: str = ""

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = list(self.params.items())
        for name in self.params:
            if name in self.adam.m:
                out.append((name + ".m", self.adam.m[name]))
                out.append((name + ".v", self.adam.v[name]))
        return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, ckpt.iteration, ckpt.adam.step)]
    cfg = ckpt.config_text.encode("utf-8")
    parts += [_U32.pack(len(cfg)), cfg]
    tensors = ckpt.tensors()
    parts.append(_U32.pack(len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def parse_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    magic, version, iteration, step = _HEAD.unpack(r.take(_HEAD.size))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_text = r.take(r.u32()).decode("utf-8")
    params: dict[str, np.ndarray] = {}
    state = AdamState(step=step)
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        base, _, suffix = name.rpartition(".")
        if suffix == "m" and base in params:
            state.m[base] = arr
        elif suffix == "v" and base in params:
            state.v[base] = arr
        else:
            params[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(params, state, iteration, config_text)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf, path)


def load_into(net, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into a network built with a matching config."""
    named = dict(net.named_parameters())
    missing = set(named) - set(ckpt.params)
    extra = set(ckpt.params) - set(named)
    if missing or extra:
        raise ContractError(f"checkpoint does not match network: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, p in named.items():
        src = ckpt.params[name]
        if src.shape != p.shape:
            raise ContractError(f"{name}: checkpoint shape {src.shape} vs network {p.shape}")
        p.data[...] = src
