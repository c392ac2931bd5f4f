"""Whole-image compression to container bytes and reconstruction from them."""

from dataclasses import dataclass

import numpy as np

from . import codecnet
from .entropy.container import Header, pack_container, unpack_container
from .entropy.context import predict, rate_bits
from .entropy.rangecoder import decode_mask_plane, encode_mask_plane
from .entropy.symbols import decode_symbols, encode_symbols
from .quantize import dequantize, quantize_hard, saturate
from .tensor import DimensionError, Tensor


@dataclass
class Compressed:
    """A container plus the accounting the CLI and the tests report."""

    data: bytes
    header: Header
    mask_bytes: int
    payload_bytes: int
    predicted_bits: float

    @property
    def coded_bits(self):
        """Bits of coded content (mask plane plus symbols), excluding the fixed header."""
        return 8 * (self.mask_bytes + self.payload_bytes)

    @property
    def bpp(self):
        return self.coded_bits / (self.header.orig_width * self.header.orig_height)


def pad_image(image, multiple=codecnet.DOWNSAMPLE):
    """Reflection-pad (3, H, W) on the right and bottom up to multiples of ``multiple``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3 or 0 in image.shape:
        raise DimensionError(f"expected a non-empty (3, H, W) image, got shape {image.shape}")
    H, W = image.shape[1:]
    ph, pw = -H % multiple, -W % multiple
    if ph == 0 and pw == 0:
        return image
    # numpy's reflect mode cannot reflect a single row/column; symmetric is
    # the same reflection with the edge sample repeated, which handles it
    mode = "reflect" if min(H, W) > 1 else "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode)


def analyze(image, params):
    """Padded image (3, H, W) -> (SymbolCube, dequantized latents) ready for coding."""
    q, y = codecnet.encode(Tensor(image), params)
    mask = codecnet.build_mask(y.data, params.config.K)
    masked = saturate(q, params.centers).data * mask.ceil_m
    cube, _ = quantize_hard(masked, params.centers, mask.counts)
    return cube, dequantize(cube, params.centers)


def predicted_bits(cube, params):
    """Rate-loss estimate (bits) for the symbols under the model's context predictor."""
    probs = predict(params.tensors, dequantize(cube, params.centers))
    return rate_bits(probs, cube)


def compress_array(image, params):
    """Compress a (3, H, W) float image in [0, 1] to container bytes."""
    image = np.asarray(image, dtype=np.float32)
    padded = pad_image(image)
    cube, _ = analyze(padded, params)
    mask_bytes = encode_mask_plane(cube.mask_counts, params.config.K)
    payload = encode_symbols(cube, params.centers, params.tensors)
    header = Header(
        orig_width=image.shape[2],
        orig_height=image.shape[1],
        padded_width=padded.shape[2],
        padded_height=padded.shape[1],
        K=params.config.K,
        centers=np.asarray(params.centers, np.float32),
        model_hash=params.hash(),
    )
    data = pack_container(header, mask_bytes, payload)
    return Compressed(data, header, len(mask_bytes), len(payload), predicted_bits(cube, params))


def decode_container(data, params, force=False):
    """Container bytes -> (header, SymbolCube) without running the image decoder."""
    header, mask_bytes, payload = unpack_container(data, model_hash=params.hash(), force=force)
    if header.K != params.config.K or header.L != len(params.centers):
        raise DimensionError(
            f"container has K={header.K}, L={header.L}; model has K={params.config.K}, L={len(params.centers)}"
        )
    shape = header.latent_shape
    counts = decode_mask_plane(mask_bytes, shape, header.K)
    cube = decode_symbols(payload, counts, header.K, header.centers, params.tensors)
    return header, cube


def decompress_bytes(data, params, force=False):
    """Container bytes -> (3, H, W) float image in [0, 1] at the original size."""
    header, cube = decode_container(data, params, force=force)
    q_hat = dequantize(cube, header.centers)
    image = codecnet.decode(Tensor(q_hat), params, clamp_output=True).data
    return image[:, : header.orig_height, : header.orig_width].copy()
