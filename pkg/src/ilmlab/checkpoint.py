"""Versioned binary container for model and estimator files.

Layout (all integers little-endian):

    magic   8 bytes  b"ILMLAB\\x00\\x01"
    u32     header length
    bytes   header JSON (sorted keys; carries format_version, kind,
            topology config key-values and the vocabulary)
    u32     tensor count
    per tensor:
        u16   name length, then the UTF-8 name
        u8    ndim, then ndim * u64 extents
        f64   little-endian payload, row-major

Serialization is deterministic, so save/load round-trips are bit-exact and
content digests are stable across platforms.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ILMLAB\x00\x01"
FORMAT_VERSION = 1


def serialize(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    head = dict(header)
    head.setdefault("format_version", FORMAT_VERSION)
    hjson = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(hjson)), hjson, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", at) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')}", at)
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        at = r.pos
        payload = r.take(size * 8, f"data of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(tensors[name])):
            raise FormatError(f"non-finite values in tensor {name}", at)
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return header, tensors


def save(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(serialize(header, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return deserialize(Path(path).read_bytes())


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | Path) -> str:
    return digest(Path(path).read_bytes())
