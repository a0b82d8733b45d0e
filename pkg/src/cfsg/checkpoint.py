"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CFSG"  u16 version  u32 header_len  header (UTF-8 JSON)
    u32 record_count
    record_count x [u16 name_len  name  u8 ndim  u32 dims[ndim]  float32 payload]
    u32 crc32 of every preceding byte

The JSON header carries the architecture config and the model seed.
Records hold the trainable parameters followed by the batch-norm running
statistics, each in model order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import ArchitectureConfig, Model, conv_plan

MAGIC = b"CFSG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    header = {"architecture": model.config.to_dict(), "seed": int(model.seed)}
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head]
    records = list(model.params.items()) + list(model.buffers.items())
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _take(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError("checkpoint is truncated")
    return bytes(buf[pos:pos + n]), pos + n


def parse_checkpoint(data: bytes) -> tuple[Model, dict]:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError("not a CFSG checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    buf = memoryview(body)
    version, head_len = struct.unpack("<HI", bytes(buf[4:10]))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head, pos = _take(buf, 10, head_len)
    header = json.loads(head)
    config = ArchitectureConfig.from_dict(header["architecture"])
    raw, pos = _take(buf, pos, 4)
    (count,) = struct.unpack("<I", raw)
    arrays = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, nlen)
        name = raw.decode()
        raw, pos = _take(buf, pos, 1)
        ndim = raw[0]
        raw, pos = _take(buf, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, pos = _take(buf, pos, 4 * int(np.prod(shape, dtype=np.int64)))
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after records")
    params, buffers = {}, {}
    for spec in conv_plan(config):
        names = [f"{spec.name}.weight", f"{spec.name}.bias"]
        if spec.has_bn:
            names += [f"bn{spec.index}.gamma", f"bn{spec.index}.beta"]
        for n in names:
            if n not in arrays:
                raise CheckpointError(f"missing record {n}")
            params[n] = arrays[n]
        if spec.has_bn:
            for n in (f"bn{spec.index}.running_mean", f"bn{spec.index}.running_var"):
                if n not in arrays:
                    raise CheckpointError(f"missing record {n}")
                buffers[n] = arrays[n]
    expected = {spec.name: (spec.out_channels, spec.in_channels, 3, 3) for spec in conv_plan(config)}
    for name, shape in expected.items():
        if params[f"{name}.weight"].shape != shape:
            raise CheckpointError(f"{name}.weight has shape {params[f'{name}.weight'].shape}, expected {shape}")
    return Model(config, params, buffers, int(header.get("seed", 0))), header.get("extra", {})


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())[0]
