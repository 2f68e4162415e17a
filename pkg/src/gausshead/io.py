"""Binary tensor files and named tensor bundles.

Tensor file layout (all little-endian)::

    b"ETGT" | version u16 | dtype u16 (0=f32, 1=f64) | ndim u32 | dims u64 * ndim | payload

A bundle stores JSON metadata plus named tensors::

    magic[4] | version u16 | reserved u16 | meta_len u32 | meta (utf-8 JSON)
    | count u32 | count * (name_len u16 | name | tensor block)

Checkpoints use magic ``b"ETGC"``, head-model assets ``b"ETGA"``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"ETGT"
CHECKPOINT_MAGIC = b"ETGC"
ASSET_MAGIC = b"ETGA"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(arr, dtype: str = "f32") -> bytes:
    code = DTYPE_CODES[dtype]
    a = np.asarray(arr, dtype=DTYPES[code])
    if not a.flags.c_contiguous:  # ascontiguousarray would promote 0-d arrays to 1-d
        a = a.copy(order="C")
    head = TENSOR_MAGIC + struct.pack("<HHI", FORMAT_VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int, str]:
    """Parse one tensor block at ``offset``; returns (array, end offset, dtype name)."""
    start = offset
    if len(buf) - offset < 12:
        raise FormatError("truncated tensor header", offset)
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {buf[offset:offset + 4]!r}", offset)
    version, code, ndim = struct.unpack_from("<HHI", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 6)
    offset += 12
    if len(buf) - offset < 8 * ndim:
        raise FormatError("truncated tensor dims", offset)
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - offset < nbytes:
        raise FormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - offset} (block starts at {start})",
            offset)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(dims).copy()
    name = "f32" if code == 0 else "f64"
    return arr, offset + nbytes, name


def write_tensor(path, arr, dtype: str = "f32") -> None:
    atomic_write(path, encode_tensor(arr, dtype))


def read_tensor(path, as_float64: bool = True) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end, _ = decode_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor", end)
    return arr.astype(np.float64) if as_float64 else arr


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_bundle(magic: bytes, meta: dict, tensors: dict[str, tuple[np.ndarray, str]]) -> bytes:
    """``tensors`` maps name -> (array, dtype name); entries are written in name order."""
    meta_bytes = canonical_json(meta)
    parts = [magic, struct.pack("<HHI", FORMAT_VERSION, 0, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr, dtype = tensors[name]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(encode_tensor(arr, dtype))
    return b"".join(parts)


def decode_bundle(buf: bytes, magic: bytes) -> tuple[dict, dict[str, tuple[np.ndarray, str]]]:
    if len(buf) < 12:
        raise FormatError("truncated bundle header", len(buf))
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}", 0)
    version, _, meta_len = struct.unpack_from("<HHI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 12
    if len(buf) - off < meta_len:
        raise FormatError("truncated metadata", off)
    try:
        meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", off) from exc
    off += meta_len
    if len(buf) - off < 4:
        raise FormatError("truncated tensor count", off)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        if len(buf) - off < 2:
            raise FormatError("truncated entry name", off)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) - off < nlen:
            raise FormatError("truncated entry name", off)
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        arr, off, dtype = decode_tensor(buf, off)
        tensors[name] = (arr, dtype)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last entry", off)
    return meta, tensors


def write_bundle(path, magic: bytes, meta: dict, tensors) -> None:
    atomic_write(path, encode_bundle(magic, meta, tensors))


def read_bundle(path, magic: bytes):
    return decode_bundle(Path(path).read_bytes(), magic)
