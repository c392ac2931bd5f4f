"""Reading and writing 8-bit RGB rasters (binary PPM natively, PNG via Pillow)."""

import os
import re

import numpy as np

from .fileutil import atomic_write


class ImageFormatError(ValueError):
    pass


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm_bytes(data):
    m = _PPM_HEADER.match(data)
    if not m:
        raise ImageFormatError("not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM is supported, maxval={maxval}")
    raw = data[m.end() : m.end() + 3 * w * h]
    if len(raw) != 3 * w * h:
        raise ImageFormatError(f"PPM pixel data truncated: {len(raw)} of {3 * w * h} bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def ppm_bytes(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def read_image(path):
    """Return an (H, W, 3) uint8 array from a PPM or any format Pillow understands."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P6":
        return read_ppm_bytes(data)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from None


def write_image(path, pixels):
    """Write uint8 (H, W, 3) pixels; ``.ppm`` natively, anything else through Pillow."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if os.fspath(path).lower().endswith((".ppm", ".pnm")):
        atomic_write(path, ppm_bytes(pixels))
        return
    import io

    from PIL import Image

    buf = io.BytesIO()
    fmt = os.path.splitext(os.fspath(path))[1].lstrip(".").upper() or "PNG"
    Image.fromarray(pixels, "RGB").save(buf, format={"JPG": "JPEG"}.get(fmt, fmt))
    atomic_write(path, buf.getvalue())


def to_float(pixels):
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1] as v / 255."""
    return (np.asarray(pixels, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_uint8(image):
    """float (3, H, W) in [0, 1] -> uint8 (H, W, 3), rounding to nearest."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()
