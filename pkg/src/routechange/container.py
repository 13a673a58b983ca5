"""Versioned binary container for fitted models.

Layout (little endian)::

    magic  b"RCMODEL\\0"        8 bytes
    version                     uint32
    header length               uint64
    payload length              uint64
    header                      UTF-8 JSON: kind, meta, array directory
    payload                     raw array bytes, back to back
    sha256(header + payload)    32 bytes

The encoding is deterministic: identical inputs give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptEncoding, VersionMismatch

MAGIC = b"RCMODEL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQQ")


def pack(kind: str, meta: dict, arrays: dict[str, np.ndarray] | None = None) -> bytes:
    arrays = arrays or {}
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        directory.append({
            "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), len(payload)) + header + payload + digest


def unpack(data: bytes, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise CorruptEncoding("payload shorter than the container prefix")
    magic, version, hlen, plen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptEncoding("bad magic bytes")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"container version {version}, expected {FORMAT_VERSION}")
    body_start = _PREFIX.size
    body_end = body_start + hlen + plen
    if len(data) != body_end + 32:
        raise CorruptEncoding("container length does not match its prefix")
    body = data[body_start:body_end]
    if hashlib.sha256(body).digest() != data[body_end:]:
        raise CorruptEncoding("checksum mismatch")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptEncoding(f"unreadable header: {exc}") from None
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CorruptEncoding(f"container holds {kind!r}, expected {expect_kind!r}")
    payload = body[hlen:]
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        raw = payload[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return kind, header["meta"], arrays


def peek_kind(data: bytes) -> str:
    return unpack(data)[0]
