"""Binary checkpoint records.

Layout: b"MSRN", u16 version, then records of
``u16 name length, name (utf-8), u8 rank, u32 dims..., float64 values``,
all little-endian.  The config snapshot travels as a rank-1 record of
byte codes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MSRN"
VERSION = 1
CONFIG_RECORD = "__config__"


def write_records(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    out = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(raw):
                raise FormatError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint") from None
    return out


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(values: np.ndarray) -> str:
    return bytes(values.astype(np.uint8).tolist()).decode("utf-8")
