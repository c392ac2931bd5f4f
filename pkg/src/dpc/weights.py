"""Portable weights file shared by codec models and feature networks.

Layout (little-endian)::

    magic "DPCW" | version u16 | config length u32 | config JSON (utf-8)
    | parameter count u32
    | per parameter: name length u16 | name | rank u8 | dims u32 x rank | f32 values
"""

import hashlib
import json
import struct

import numpy as np

from .fileutil import atomic_write

MAGIC = b"DPCW"
VERSION = 1


class FormatError(ValueError):
    """The weights file is malformed; ``offset`` is where parsing stopped."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dump_weights(config, params):
    """Serialize a config dict and an ordered name -> array mapping to bytes."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_weights(data):
    """Inverse of :func:`dump_weights`; returns ``(config, {name: float32 array})``."""
    data = bytes(data)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(data) - off} left", off)
        chunk = data[off : off + n]
        off += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, got {magic!r}", 0)
    version, cfg_len = struct.unpack("<HI", take(6, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version} (expected {VERSION})", 4)
    try:
        config = json.loads(take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", 10) from None
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of {name}"))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims).astype(np.float32)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last parameter", off)
    return config, params


def save_weights(path, config, params):
    atomic_write(path, dump_weights(config, params))


def load_weights(path):
    with open(path, "rb") as fh:
        return parse_weights(fh.read())


def weights_hash(config, params):
    """First 8 bytes of the SHA-256 of the serialized weights."""
    return hashlib.sha256(dump_weights(config, params)).digest()[:8]
