"""Scalar quantization of latents onto a small fixed alphabet of centers."""

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigurationError, Tensor, as_tensor, clamp, exp, log_softmax, mul, straight_through, tsum

DEFAULT_CENTERS = (-2.0, -1.0, 0.0, 1.0, 2.0, 3.0)


class SymbolError(ValueError):
    """A symbol index falls outside the center alphabet."""


def make_centers(n=6, lo=-2.0, hi=3.0):
    """Evenly spaced, strictly increasing centers."""
    if n < 2:
        raise ConfigurationError(f"need at least 2 centers, got {n}")
    return np.linspace(lo, hi, n).astype(np.float32)


def check_centers(centers):
    c = np.asarray(centers, dtype=np.float32)
    if c.ndim != 1 or c.size < 2 or np.any(np.diff(c) <= 0):
        raise ConfigurationError(f"centers must be a strictly increasing vector of length >= 2, got {c}")
    return c


@dataclass
class SymbolCube:
    """Quantized latents as center indices plus the per-location channel count.

    ``indices`` has shape (K, h, w); entries at masked positions (channel k >=
    mask_counts[i, j]) are meaningless and never coded.
    """

    indices: np.ndarray
    mask_counts: np.ndarray

    @property
    def shape(self):
        return self.indices.shape

    def valid(self):
        """Boolean (K, h, w) array marking the coded positions."""
        k = np.arange(self.indices.shape[0]).reshape(-1, 1, 1)
        return k < self.mask_counts[None]


def nearest_center(values, centers):
    """Index of the nearest center for each value; ties go to the lower index.

    Uses midpoints between consecutive centers: a value exactly on a midpoint
    belongs to the lower cell.
    """
    c = check_centers(centers)
    mids = (c[:-1].astype(np.float64) + c[1:]) / 2.0
    return np.searchsorted(mids, np.asarray(values, dtype=np.float64), side="left").astype(np.int64)


def quantize_hard(q, centers, mask_counts=None):
    """Map latents (K, h, w) to a :class:`SymbolCube` and the chosen center values."""
    data = q.data if isinstance(q, Tensor) else np.asarray(q)
    c = check_centers(centers)
    idx = nearest_center(data, c)
    if mask_counts is None:
        mask_counts = np.full(data.shape[-2:], data.shape[-3], dtype=np.int64)
    values = c[idx].astype(np.float32)
    return SymbolCube(idx, np.asarray(mask_counts, dtype=np.int64)), values


def saturation_range(centers):
    """Outer edges of the first and last decision cells (half a gap past the end centers)."""
    c = check_centers(centers)
    return float(c[0] - (c[1] - c[0]) / 2), float(c[-1] + (c[-1] - c[-2]) / 2)


def saturate(q, centers):
    """Clamp latents to :func:`saturation_range`; leaves quantized values unchanged.

    Beyond the range only gradients pointing back inside pass: moving such a
    latent further out cannot change its symbol, and an unbounded identity lets
    it drift off indefinitely.
    """
    lo, hi = saturation_range(centers)
    return clamp(q, lo, hi, pass_inward=True)


def quantize_ste(q, centers):
    """Hard nearest-center values forward, identity gradient backward."""
    q = as_tensor(q)
    c = check_centers(centers)
    return straight_through(c[nearest_center(q.data, c)], q)


def quantize_soft(q, centers, sigma=1.0):
    """Differentiable soft assignment: sum_j c_j softmax_j(-sigma (q - c_j)^2)."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    q = as_tensor(q)
    c = check_centers(centers).astype(q.dtype)
    cshape = (1,) * q.ndim + (-1,)
    diff = q.reshape(q.shape + (1,)) - c.reshape(cshape)
    weights = exp(log_softmax(diff * diff * (-float(sigma)), axis=-1))
    return tsum(mul(weights, c.reshape(cshape)), axis=-1)


def dequantize(symbols, centers):
    """Center values at coded positions, exactly 0.0 at masked positions."""
    c = check_centers(centers)
    idx = np.asarray(symbols.indices)
    valid = symbols.valid()
    if np.any((idx[valid] < 0) | (idx[valid] >= c.size)):
        bad = idx[valid][(idx[valid] < 0) | (idx[valid] >= c.size)][0]
        raise SymbolError(f"symbol index {bad} outside [0, {c.size - 1}]")
    out = np.zeros(idx.shape, dtype=np.float32)
    out[valid] = c[idx[valid]]
    return out
