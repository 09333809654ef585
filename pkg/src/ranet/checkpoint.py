"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"RANETCK\\x00"
    version    u32      1
    config     u32 length + UTF-8 YAML of the RANetConfig
    metadata   u32 length + UTF-8 JSON (sorted keys)
    params     u32 count, then per parameter in declaration order:
                 u16 name length + UTF-8 name, u8 ndim, ndim x u32 dims,
                 float32 data (C order)
    bn stats   u32 count, then per batch-norm layer:
                 u16 name length + UTF-8 name (its gamma), u32 C,
                 float64 running mean (C), float64 running var (C)
    optimizer  u8 flag; if 1, one float32 velocity buffer per parameter,
                 same order and shapes as params

Writes go to a temporary sibling file that is renamed into place, so a
failed write never leaves a partial checkpoint.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RANetConfig
from .errors import FormatError
from .network import build_graph

MAGIC = b"RANETCK\x00"
VERSION = 1


@dataclass
class Checkpoint:
    graph: object
    metadata: dict
    velocity: list | None = None


def _put_str(buf, s, fmt):
    raw = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def encode_checkpoint(graph, metadata=None, velocity=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, graph.config.to_yaml(), "<I")
    _put_str(buf, json.dumps(metadata or {}, sort_keys=True), "<I")
    named = graph.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        _put_str(buf, name, "<H")
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    bns = [(n, p) for n, p in named if getattr(p, "running_mean", None) is not None]
    buf.write(struct.pack("<I", len(bns)))
    for name, p in bns:
        _put_str(buf, name, "<H")
        buf.write(struct.pack("<I", p.running_mean.size))
        buf.write(np.asarray(p.running_mean, dtype="<f8").tobytes())
        buf.write(np.asarray(p.running_var, dtype="<f8").tobytes())
    if velocity is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        for (name, p), v in zip(named, velocity, strict=True):
            if v.shape != p.data.shape:
                raise FormatError(f"velocity for {name} has shape {v.shape}, parameter has {p.data.shape}")
            buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, graph, metadata=None, velocity=None):
    path = Path(path)
    data = encode_checkpoint(graph, metadata, velocity)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


class _Reader:
    def __init__(self, raw, source):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt):
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")

    def floats(self, dtype, count):
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype)


def decode_checkpoint(raw, source="<bytes>"):
    r = _Reader(bytes(raw), source)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    cfg = RANetConfig.from_yaml(r.string("<I"))
    metadata = json.loads(r.string("<I"))
    graph = build_graph(cfg)
    named = graph.named_parameters()
    (count,) = r.unpack("<I")
    if count != len(named):
        raise FormatError(f"{source}: {count} parameters stored, configuration defines {len(named)}")
    for name, p in named:
        stored = r.string("<H")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if stored != name or tuple(shape) != p.data.shape:
            raise FormatError(f"{source}: parameter {stored} {shape} does not match {name} {p.data.shape}")
        p.data[...] = r.floats("<f4", p.data.size).reshape(shape)
    by_name = dict(named)
    (nbn,) = r.unpack("<I")
    for _ in range(nbn):
        name = r.string("<H")
        (c,) = r.unpack("<I")
        p = by_name.get(name)
        if p is None or getattr(p, "running_mean", None) is None or p.running_mean.size != c:
            raise FormatError(f"{source}: batch-norm statistics for unknown layer {name}")
        p.running_mean[...] = r.floats("<f8", c)
        p.running_var[...] = r.floats("<f8", c)
    (flag,) = r.unpack("<B")
    velocity = None
    if flag:
        velocity = [r.floats("<f4", p.data.size).reshape(p.data.shape).copy() for _, p in named]
    if r.pos != len(r.raw):
        raise FormatError(f"{source}: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(graph, metadata, velocity)


def load_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(raw, str(path))
