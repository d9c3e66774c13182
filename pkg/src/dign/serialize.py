"""Binary tensor and checkpoint formats.

Single tensor blob:
    magic "DIGN" | version u32 LE | 4 extents u64 LE | raw floats LE

Version 1 carries float32 payloads. Version 2 is the same layout with
float64 payloads, used by the deterministic 64-bit mode so checkpoints
round-trip bitwise at full precision.

Checkpoint container:
    magic "DIGNCKPT" | version u32 | config digest u64 | iteration u64 |
    entry count u64 | config-text length u64 + UTF-8 bytes |
    entries, each: name length u64 + UTF-8 name + tensor blob

Entries are written in sorted-name order so save(load(x)) == x byte for
byte. Writes go through a temp file and an atomic rename; a truncated or
malformed file raises ParseError before any state is touched.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ParseError, ShapeError

MAGIC_TENSOR = b"DIGN"
MAGIC_CHECKPOINT = b"DIGNCKPT"

_DTYPE_BY_VERSION = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_VERSION_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    if arr.ndim != 4:
        raise ShapeError(f"serialized tensors are 4-D, got ndim={arr.ndim}")
    version = _VERSION_BY_DTYPE.get(np.dtype(arr.dtype))
    if version is None:
        raise ShapeError(f"serializable dtypes are float32/float64, got {arr.dtype}")
    header = MAGIC_TENSOR + struct.pack("<I", version) + struct.pack("<4Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_VERSION[version]).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob; returns (array, offset past the blob)."""
    need = offset + 4 + 4 + 32
    if len(buf) < need:
        raise ParseError("tensor blob truncated in header")
    if buf[offset:offset + 4] != MAGIC_TENSOR:
        raise ParseError(f"bad tensor magic {buf[offset:offset + 4]!r}")
    version = struct.unpack_from("<I", buf, offset + 4)[0]
    dtype = _DTYPE_BY_VERSION.get(version)
    if dtype is None:
        raise ParseError(f"unknown tensor format version {version}")
    shape = struct.unpack_from("<4Q", buf, offset + 8)
    count = 1
    for e in shape:
        count *= e
    start = offset + 40
    end = start + count * dtype.itemsize
    if len(buf) < end:
        raise ParseError("tensor blob truncated in payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(shape).copy()
    return arr, end


def write_tensor(path: str, arr: np.ndarray) -> None:
    _atomic_write(path, tensor_to_bytes(arr))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ParseError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def checkpoint_to_bytes(digest: int, iteration: int, config_text: str,
                        entries: dict[str, np.ndarray]) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC_CHECKPOINT,
             struct.pack("<I", 1),
             struct.pack("<Q", digest & 0xFFFFFFFFFFFFFFFF),
             struct.pack("<Q", int(iteration)),
             struct.pack("<Q", len(entries)),
             struct.pack("<Q", len(cfg)), cfg]
    for name in sorted(entries):
        nm = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(nm)))
        parts.append(nm)
        parts.append(tensor_to_bytes(entries[name]))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple[int, int, str, dict[str, np.ndarray]]:
    off = 0
    if len(buf) < 8 or buf[:8] != MAGIC_CHECKPOINT:
        raise ParseError("not a checkpoint file (bad magic)")
    off = 8
    if len(buf) < off + 4 + 8 + 8 + 8 + 8:
        raise ParseError("checkpoint truncated in header")
    version = struct.unpack_from("<I", buf, off)[0]
    off += 4
    if version != 1:
        raise ParseError(f"unknown checkpoint version {version}")
    digest, iteration, n_entries, cfg_len = struct.unpack_from("<QQQQ", buf, off)
    off += 32
    if len(buf) < off + cfg_len:
        raise ParseError("checkpoint truncated in config text")
    config_text = buf[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        if len(buf) < off + 8:
            raise ParseError("checkpoint truncated in name table")
        nm_len = struct.unpack_from("<Q", buf, off)[0]
        off += 8
        if len(buf) < off + nm_len:
            raise ParseError("checkpoint truncated in entry name")
        name = buf[off:off + nm_len].decode("utf-8")
        off += nm_len
        arr, off = tensor_from_bytes(buf, off)
        entries[name] = arr
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after last entry")
    return digest, iteration, config_text, entries


def write_checkpoint_file(path: str, digest: int, iteration: int, config_text: str,
                          entries: dict[str, np.ndarray]) -> None:
    _atomic_write(path, checkpoint_to_bytes(digest, iteration, config_text, entries))


def read_checkpoint_file(path: str) -> tuple[int, int, str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
