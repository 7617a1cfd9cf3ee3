"""Self-describing binary container for named arrays.

Layout (all integers little-endian)::

    magic        8 bytes, identifies the payload kind
    version      uint32
    endian mark  uint32, always 0x01020304 written little-endian
    header_len   uint64
    header       UTF-8 JSON, sorted keys: {"meta": {...}, "arrays": [...]}
    body         arrays back to back, row-major, little-endian

Each ``arrays`` entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the body.  Output is byte-stable:
the same arrays and metadata always produce the same file.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import SnapshotFormatError

ENDIAN_MARK = 0x01020304
_PREFIX = struct.Struct("<8sIIQ")


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return _PREFIX.pack(magic, version, ENDIAN_MARK, len(header)) + header + b"".join(chunks)


def loads(blob: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise SnapshotFormatError("file too short to hold a container header")
    got_magic, got_version, mark, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise SnapshotFormatError(f"wrong magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise SnapshotFormatError(f"unsupported version {got_version}, expected {version}")
    if mark != ENDIAN_MARK:
        raise SnapshotFormatError(f"bad endianness marker {mark:#010x}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"corrupt header: {exc}") from None
    body = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = body + e["offset"]
        if lo + e["nbytes"] > len(blob):
            raise SnapshotFormatError(f"array {e['name']!r} runs past end of file")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return header["meta"], arrays


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
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


def write(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(magic, version, meta, arrays))


def read(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic, version)
