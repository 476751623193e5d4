"""Binary tensor-table files.

Layout (little-endian)::

    magic  b"ACCT"
    u32    format version
    u32    entry count
    entries:
        u16 name length, name (utf-8)
        u8  dtype tag: b"f" float64, b"i" int64, b"j" utf-8 JSON blob
        u8  rank, then rank × u64 extents (JSON blobs: rank 1, extent = byte length)
        raw payload
    u32    CRC32 of everything above

Used for checkpoints, images, segmentations and displacement fields. Single
arrays are stored under the name ``"data"``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ACCT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Unreadable, corrupt or unsupported file."""


def encode_table(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, dict):
            blob = json.dumps(value, sort_keys=True).encode("utf-8")
            parts.append(b"j" + struct.pack("<BQ", 1, len(blob)) + blob)
            continue
        arr = np.asarray(value)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            tag, arr = b"i", arr.astype("<i8")
        else:
            tag, arr = b"f", arr.astype("<f8")
        parts.append(tag + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_table(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a tensor-table file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (file truncated or corrupt)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        return _decode_entries(body, count)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed entry table: {exc}") from exc


def _decode_entries(body: bytes, count: int) -> dict:
    pos = 12
    out: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag = body[pos:pos + 1]
        (rank,) = struct.unpack_from("<B", body, pos + 1)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        if tag == b"j":
            out[name] = json.loads(body[pos:pos + shape[0]].decode("utf-8"))
            pos += shape[0]
            continue
        if tag not in (b"f", b"i"):
            raise FormatError(f"unknown dtype tag {tag!r}")
        dtype = "<f8" if tag == b"f" else "<i8"
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(body, dtype=dtype, count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out


def write_tensors(path, entries: dict) -> None:
    Path(path).write_bytes(encode_table(entries))


def read_tensors(path) -> dict:
    return decode_table(Path(path).read_bytes())


def save_array(path, array) -> None:
    write_tensors(path, {"data": np.asarray(array)})


def load_array(path) -> np.ndarray:
    table = read_tensors(path)
    if "data" not in table:
        raise FormatError(f"{path} holds no 'data' entry")
    return table["data"]


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of an image in [0, 1] (for quick inspection)."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
