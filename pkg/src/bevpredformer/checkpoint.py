"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"BPFT" | version u32 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | extents u32[rank] | float32[prod] )
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Mapping, Union

import numpy as np

MAGIC = b"BPFT"
VERSION = 1


class CheckpointError(Exception):
    pass


def encode_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise CheckpointError("rank above 255")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_entry(buf: BinaryIO) -> tuple[str, np.ndarray]:
    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError("truncated tensor entry")
        return chunk

    (nlen,) = struct.unpack("<H", take(2))
    name = take(nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", take(1))
    shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    return name, arr


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    out.extend(encode_entry(k, v) for k, v in tensors.items())
    return b"".join(out)


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("bad magic; not a BPFT checkpoint")
    head = buf.read(8)
    if len(head) != 8:
        raise CheckpointError("truncated header")
    version, count = struct.unpack("<II", head)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    result: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name, arr = decode_entry(buf)
        result[name] = arr
    return result


def save(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return loads(p.read_bytes())
