"""Binary tensor records and the PEERCKPT checkpoint container.

Record layout (little-endian): dtype tag u8, rank u32, one u64 per
dimension, then the raw element bytes. Container layout: magic "PEERCKPT",
format version u32, entry count u32, then per entry a u32 name length, the
utf-8 name, and a tensor record.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PEERCKPT"
VERSION = 1

_TAG_TO_DTYPE = {0: "<f8", 1: "<f4", 2: "<i8", 3: "|u1"}
_KIND_TO_TAG = {("f", 8): 0, ("f", 4): 1, ("i", 8): 2, ("u", 1): 3}


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_TAG:
        raise ValueError(f"unsupported tensor dtype {arr.dtype} (supported: float64, float32, int64, uint8)")
    return _KIND_TO_TAG[key]


def write_tensor_record(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _tag_for(arr)
    head = struct.pack("<BI", tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes()


def read_tensor_record(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    tag, rank = struct.unpack_from("<BI", buf, offset)
    offset += 5
    if tag not in _TAG_TO_DTYPE:
        raise ValueError(f"unknown tensor dtype tag {tag}")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset += 8 * rank
    dt = np.dtype(_TAG_TO_DTYPE[tag])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dt.itemsize
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape).copy()
    return arr, offset + nbytes


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(write_tensor_record(np.asarray(arr)))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {buf[: len(MAGIC)]!r}")
    version, count = struct.unpack_from("<II", buf, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
    offset = len(MAGIC) + 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tensors[name], offset = read_tensor_record(buf, offset)
    return tensors
