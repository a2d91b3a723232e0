"""Binary checkpoints.

Layout (all integers little-endian)::

    b"RHNCKPT1"  u32 version  u16+bytes family  u32+bytes config block
    u32 n_tensors, then per tensor: u16+bytes name, u8 ndim, u32 dims...,
    float64 payload (little-endian)
    u32 CRC-32 of every preceding byte

The config block is ``key=value`` lines describing the cell and heads plus any
free-form metadata, enough to rebuild an empty model before filling tensors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields

import numpy as np

from .cells import CellConfig
from .model import Model, build_model
from .numerics import ContractError, RngStream

MAGIC = b"RHNCKPT1"
VERSION = 1


class CheckpointError(ContractError):
    pass


class CrcError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _cfg_block(model: Model, meta: dict) -> str:
    lines = [f"{f.name}={getattr(model.config, f.name)!r}" for f in fields(CellConfig)]
    h = model.heads
    lines += [f"head.out_dim={h.out_dim}", f"head.tied={h.tied}",
              f"head.embed={h.E is not None}", f"head.loss_kind={h.loss_kind!r}"]
    for k, v in (meta or {}).items():
        if "\n" in str(v) or "=" in str(k):
            raise CheckpointError(f"metadata {k!r} cannot be stored in a key=value line")
        lines.append(f"meta.{k}={v}")
    return "\n".join(lines)


def encode(model: Model, meta: dict | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    fam = model.family.encode()
    out += struct.pack("<H", len(fam)) + fam
    block = _cfg_block(model, meta).encode()
    out += struct.pack("<I", len(block)) + block
    arrays = model.arrays()
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def checkpoint_save(model: Model, path, meta: dict | None = None):
    data = encode(model, meta)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint ends after {len(self.data)} bytes, "
                                 f"needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_value(text: str):
    if text in ("True", "False"):
        return text == "True"
    if text[:1] in "'\"":
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        return float(text)


def decode(data: bytes):
    """Return ``(family, config dict, meta dict, tensors dict)``."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    (flen,) = r.unpack("<H")
    family = r.take(flen).decode()
    (blen,) = r.unpack("<I")
    try:
        block = r.take(blen).decode()
    except UnicodeDecodeError as err:
        raise CrcError("config block is corrupt") from err
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        payload = r.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CrcError("trailing bytes after checkpoint")
    if zlib.crc32(data[:body_end]) != crc:
        raise CrcError("CRC-32 mismatch: checkpoint is corrupt")
    cfg, meta = {}, {}
    for line in block.splitlines():
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            cfg[key] = _parse_value(value)
    return family, cfg, meta, tensors


def checkpoint_load(path):
    """Rebuild the model stored at ``path``. Returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        family, cfg, meta, tensors = decode(fh.read())
    cell_cfg = CellConfig(**{f.name: cfg[f.name] for f in fields(CellConfig)})
    if cell_cfg.family != family:
        raise CheckpointError(f"family tag {family!r} disagrees with config {cell_cfg.family!r}")
    model = build_model(cell_cfg, cfg["head.out_dim"], "gaussian:0", RngStream(0),
                        embed=cfg["head.embed"], tied=cfg["head.tied"],
                        loss_kind=cfg["head.loss_kind"])
    arrays = model.arrays()
    if set(arrays) != set(tensors):
        raise CheckpointError(f"tensor names {sorted(tensors)} do not match the model")
    for name, arr in arrays.items():
        if arr.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    return model, meta


def describe(path) -> list[str]:
    """Human-readable summary for ``ckpt-inspect``."""
    with open(path, "rb") as fh:
        family, cfg, meta, tensors = decode(fh.read())
    lines = [f"family {family}", f"version {VERSION}"]
    lines += [f"{k} {v}" for k, v in cfg.items()]
    lines += [f"meta.{k} {v}" for k, v in meta.items()]
    total = 0
    for name, arr in tensors.items():
        lines.append(f"tensor {name} {'x'.join(map(str, arr.shape)) or 'scalar'}")
        total += arr.size
    lines.append(f"parameters {total}")
    return lines


__all__ = ["CheckpointError", "CrcError", "VersionError", "TruncatedError",
           "checkpoint_save", "checkpoint_load", "encode", "decode", "describe"]
