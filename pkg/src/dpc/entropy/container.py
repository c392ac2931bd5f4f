"""The ``.dpc`` compressed-image container.

Layout (all integers little-endian)::

    magic "DPC1" | version u16 | orig W u32 | orig H u32 | padded W u32 | padded H u32
    | K u16 | L u8 | centers L x f32 | model hash 8 bytes
    | mask length u32 | payload length u32 | mask bytes | payload bytes
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from ..fileutil import atomic_write

MAGIC = b"DPC1"
VERSION = 1
_FIXED = struct.Struct("<4sHIIIIHB")


class ContainerError(ValueError):
    """Malformed or truncated container."""


class ModelMismatchError(ContainerError):
    """The container was produced by a different model than the one supplied."""


@dataclass
class Header:
    orig_width: int
    orig_height: int
    padded_width: int
    padded_height: int
    K: int
    centers: np.ndarray
    model_hash: bytes
    version: int = VERSION

    @property
    def L(self):
        return len(self.centers)

    @property
    def latent_shape(self):
        return self.padded_height // 8, self.padded_width // 8

    def __eq__(self, other):
        return (
            isinstance(other, Header)
            and (self.orig_width, self.orig_height, self.padded_width, self.padded_height, self.K, self.version)
            == (other.orig_width, other.orig_height, other.padded_width, other.padded_height, other.K, other.version)
            and np.array_equal(np.asarray(self.centers, np.float32), np.asarray(other.centers, np.float32))
            and self.model_hash == other.model_hash
        )


def pack_container(header, mask_bytes, payload):
    if len(header.model_hash) != 8:
        raise ContainerError(f"model hash must be 8 bytes, got {len(header.model_hash)}")
    parts = [
        _FIXED.pack(
            MAGIC,
            header.version,
            header.orig_width,
            header.orig_height,
            header.padded_width,
            header.padded_height,
            header.K,
            header.L,
        ),
        np.asarray(header.centers, dtype="<f4").tobytes(),
        bytes(header.model_hash),
        struct.pack("<II", len(mask_bytes), len(payload)),
        bytes(mask_bytes),
        bytes(payload),
    ]
    return b"".join(parts)


def unpack_container(data, model_hash=None, force=False):
    """Parse container bytes into ``(header, mask_bytes, payload)``.

    A model-hash mismatch raises :class:`ModelMismatchError` unless ``force``
    is set, in which case a warning is issued and parsing continues.
    """
    data = bytes(data)
    if len(data) < _FIXED.size:
        raise ContainerError(f"truncated header: {len(data)} bytes, need at least {_FIXED.size}")
    magic, version, ow, oh, pw, ph, K, L = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic: expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    off = _FIXED.size
    need = off + 4 * L + 8 + 8
    if len(data) < need:
        raise ContainerError(f"truncated header at offset {len(data)}: need {need} bytes")
    centers = np.frombuffer(data, dtype="<f4", count=L, offset=off).astype(np.float32)
    off += 4 * L
    stored_hash = data[off : off + 8]
    off += 8
    mask_len, payload_len = struct.unpack_from("<II", data, off)
    off += 8
    if len(data) != off + mask_len + payload_len:
        raise ContainerError(
            f"length mismatch at offset {off}: header declares {mask_len}+{payload_len} payload bytes, "
            f"file holds {len(data) - off}"
        )
    if pw % 8 or ph % 8 or pw < ow or ph < oh:
        raise ContainerError(f"inconsistent dimensions: original {ow}x{oh}, padded {pw}x{ph}")
    header = Header(ow, oh, pw, ph, K, centers, stored_hash, version)
    if model_hash is not None and bytes(model_hash) != stored_hash:
        msg = f"container was written by model {stored_hash.hex()}, decoding with {bytes(model_hash).hex()}"
        if not force:
            raise ModelMismatchError(msg + " (use force to decode anyway)")
        warnings.warn(msg, stacklevel=2)
    return header, data[off : off + mask_len], data[off + mask_len :]


def write_container(path, header, mask_bytes, payload):
    atomic_write(path, pack_container(header, mask_bytes, payload))


def read_container(path, model_hash=None, force=False):
    with open(path, "rb") as fh:
        return unpack_container(fh.read(), model_hash=model_hash, force=force)
