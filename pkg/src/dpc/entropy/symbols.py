"""Arithmetic coding of a symbol cube under the context model."""

import numpy as np

from ..quantize import SymbolCube, check_centers
from .context import ContextCoder
from .rangecoder import DecodeError, PROB_TOTAL, RangeDecoder, RangeEncoder, cumulative, quantize_probs


def scan_positions(mask_counts):
    """Coded positions (h, w, k) in scan order: raster over (h, w), channel innermost."""
    H, W = mask_counts.shape
    for h in range(H):
        for w in range(W):
            for k in range(int(mask_counts[h, w])):
                yield h, w, k


def encode_symbols(cube, centers, params):
    """Range-code every unmasked symbol of ``cube`` (K, h, w)."""
    c = check_centers(centers)
    coder = ContextCoder(params)
    valid = cube.valid()
    grid = np.where(valid, c[np.clip(cube.indices, 0, c.size - 1)], 0.0).transpose(1, 2, 0)
    padded = coder.pad(grid)
    enc = RangeEncoder()
    for h, w, k in scan_positions(cube.mask_counts):
        freq = quantize_probs(coder.probs_at(padded, h, w, k))
        cum = cumulative(freq)
        s = int(cube.indices[k, h, w])
        enc.encode(int(cum[s]), int(freq[s]), PROB_TOTAL)
    return enc.finish()


def decode_symbols(data, mask_counts, K, centers, params):
    """Inverse of :func:`encode_symbols`; masked positions get index 0 and are flagged by ``mask_counts``."""
    c = check_centers(centers)
    mask_counts = np.asarray(mask_counts, dtype=np.int64)
    H, W = mask_counts.shape
    coder = ContextCoder(params)
    r = coder.radius
    padded = coder.pad(np.zeros((H, W, K), dtype=np.float32))
    indices = np.zeros((K, H, W), dtype=np.int64)
    dec = RangeDecoder(data)
    for h, w, k in scan_positions(mask_counts):
        cum = cumulative(quantize_probs(coder.probs_at(padded, h, w, k)))
        s = dec.decode(cum, PROB_TOTAL)
        indices[k, h, w] = s
        padded[h + r, w + r, k + r] = c[s]
    if dec.overrun > 4:
        raise DecodeError(f"symbol payload exhausted: read {dec.pos} of {len(data)} bytes")
    return SymbolCube(indices, mask_counts)
