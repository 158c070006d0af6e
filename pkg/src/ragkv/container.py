"""TKVC: the little-endian, section-tagged binary container for caches and weights.

Layout (all integers little-endian)::

    magic      4s   b"TKVC"
    version    u32  FORMAT_VERSION
    kind       u32  1 = chunk KV cache, 2 = model weights
    dtype      u32  tensor storage dtype (1 = f64, 2 = f32)
    fingerprint 32s sha256 of model config + weights checksum
    n_config   u32
    config     n_config x u32
    n_sections u32
    sections   n_sections x (tag 16s NUL-padded ASCII, dtype u32, rows u32,
                             cols u32, offset u64, nbytes u64)
    payload    section bytes, contiguous, row-major, in table order
    crc32      u32  zlib.crc32 of every preceding byte

Section dtype codes: 1 = f64, 2 = f32, 3 = u32. ``offset`` is absolute from
the start of the file. A reader needs nothing but the header to recover
every tensor's shape and dtype.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TKVC"
FORMAT_VERSION = 1

KIND_CHUNK_CACHE = 1
KIND_WEIGHTS = 2

DTYPE_F64 = 1
DTYPE_F32 = 2
DTYPE_U32 = 3
_NP_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}

_HEAD = struct.Struct("<4sIII32sI")
_SECTION = struct.Struct("<16sIIIQQ")
TAG_LEN = 16


class FormatError(ValueError):
    """Bytes are not a well-formed TKVC container."""


@dataclass
class Container:
    kind: int
    dtype: int
    fingerprint: bytes
    config: list[int]
    sections: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _section_dtype(arr: np.ndarray, storage: int) -> int:
    if np.issubdtype(arr.dtype, np.integer):
        return DTYPE_U32
    return storage


def pack(c: Container) -> bytes:
    if len(c.fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    head = _HEAD.pack(MAGIC, c.version, c.kind, c.dtype, c.fingerprint, len(c.config))
    head += struct.pack(f"<{len(c.config)}I", *c.config)
    head += struct.pack("<I", len(c.sections))
    table_end = len(head) + _SECTION.size * len(c.sections)

    entries, blobs, offset = [], [], table_end
    for tag, arr in c.sections.items():
        raw_tag = tag.encode("ascii")
        if len(raw_tag) > TAG_LEN:
            raise ValueError(f"section tag too long: {tag!r}")
        arr = np.atleast_2d(arr)
        code = _section_dtype(arr, c.dtype)
        blob = np.ascontiguousarray(arr, dtype=_NP_DTYPES[code]).tobytes()
        entries.append(_SECTION.pack(raw_tag, code, arr.shape[0], arr.shape[1], offset, len(blob)))
        blobs.append(blob)
        offset += len(blob)
    body = head + b"".join(entries) + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(data: bytes) -> Container:
    try:
        return _unpack(memoryview(data))
    except struct.error as exc:
        raise FormatError(f"truncated header: {exc}") from None


def _unpack(buf: memoryview) -> Container:
    if len(buf) < _HEAD.size + 4:
        raise FormatError(f"file too short ({len(buf)} bytes)")
    magic, version, kind, dtype, fp, n_config = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dtype not in (DTYPE_F64, DTYPE_F32):
        raise FormatError(f"unknown storage dtype code {dtype}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("checksum mismatch (truncated or corrupt file)")

    pos = _HEAD.size
    config = list(struct.unpack_from(f"<{n_config}I", buf, pos))
    pos += 4 * n_config
    (n_sections,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    payload_end = len(buf) - 4
    sections: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        raw_tag, code, rows, cols, offset, nbytes = _SECTION.unpack_from(buf, pos)
        pos += _SECTION.size
        tag = raw_tag.rstrip(b"\0").decode("ascii", errors="replace")
        if code not in _NP_DTYPES:
            raise FormatError(f"section {tag!r}: unknown dtype code {code}")
        np_dtype = _NP_DTYPES[code]
        if nbytes != rows * cols * np_dtype.itemsize or offset + nbytes > payload_end:
            raise FormatError(f"section {tag!r}: bad extent ({rows}x{cols}, {nbytes} bytes @ {offset})")
        arr = np.frombuffer(buf, dtype=np_dtype, count=rows * cols, offset=offset)
        sections[tag] = arr.reshape(rows, cols).astype(np.float64 if code != DTYPE_U32 else np.int64)
    return Container(kind, dtype, bytes(fp), config, sections, version)
