"""Causal 3D masked-convolution context model over the quantized latent volume.

Symbols are scanned row-major over (h, w) with the channel index innermost.
The network sees the volume as a single-channel 3D grid ordered (h, w, k), so
"earlier in scan order" is plain lexicographic order on grid coordinates and
PixelCNN-style type A / type B kernel masks enforce causality directly.
"""

import numpy as np

from ..tensor import Tensor, as_tensor, conv3d, log_softmax, mul, relu, transpose, tsum

KERNEL = 3


def causal_mask(kind, size=KERNEL):
    """Kernel mask for offsets strictly before (A) or up to and including (B) the centre."""
    c = size // 2
    mask = np.zeros((size, size, size), dtype=np.float32)
    for idx in np.ndindex(size, size, size):
        offset = tuple(i - c for i in idx)
        if offset < (0, 0, 0) or (kind == "B" and offset == (0, 0, 0)):
            mask[idx] = 1.0
    return mask


MASK_A = causal_mask("A")
MASK_B = causal_mask("B")


def context_param_shapes(num_centers, hidden):
    return {
        "ctx.conv0.w": (hidden, 1, KERNEL, KERNEL, KERNEL),
        "ctx.conv0.b": (hidden,),
        "ctx.conv1.w": (num_centers, hidden, KERNEL, KERNEL, KERNEL),
        "ctx.conv1.b": (num_centers,),
    }


def init_context_params(num_centers, hidden, rng):
    """He-initialised first layer; the output layer starts at zero so predictions begin uniform."""
    shapes = context_param_shapes(num_centers, hidden)
    fan_in = int(MASK_A.sum())
    return {
        "ctx.conv0.w": (rng.standard_normal(shapes["ctx.conv0.w"]) * np.sqrt(2.0 / fan_in)).astype(np.float32),
        "ctx.conv0.b": np.zeros(shapes["ctx.conv0.b"], np.float32),
        "ctx.conv1.w": np.zeros(shapes["ctx.conv1.w"], np.float32),
        "ctx.conv1.b": np.zeros(shapes["ctx.conv1.b"], np.float32),
    }


def context_logits(params, volume):
    """Logits of shape (N, K, h, w, L) for a volume (N, K, h, w) of center values.

    ``params`` maps names to Tensors; masked kernels are applied on the fly so
    masked taps receive exactly zero gradient.
    """
    v = as_tensor(volume)
    if v.ndim == 3:
        v = v.reshape((1,) + v.shape)
    grid = transpose(v, (0, 2, 3, 1)).reshape((v.shape[0], 1, v.shape[2], v.shape[3], v.shape[1]))
    w0 = mul(params["ctx.conv0.w"], MASK_A)
    w1 = mul(params["ctx.conv1.w"], MASK_B)
    h = relu(conv3d(grid, w0, params["ctx.conv0.b"], padding=1))
    out = conv3d(h, w1, params["ctx.conv1.b"], padding=1)  # (N, L, h, w, K)
    return transpose(out, (0, 4, 2, 3, 1))


def predict(params, volume):
    """Per-position categorical distributions (..., K, h, w, L) as a numpy array."""
    squeeze = np.ndim(volume.data if isinstance(volume, Tensor) else volume) == 3
    logp = log_softmax(context_logits(params, volume), axis=-1).data
    probs = np.exp(logp.astype(np.float64))
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs[0] if squeeze else probs


def rate_loss(logits, indices, weights, axis=None):
    """Cross-entropy in bits, summed over positions (or ``axis``) and weighted per position.

    ``logits`` is (N, K, h, w, L); ``indices`` the true symbols (N, K, h, w);
    ``weights`` is 1 at coded positions and 0 at masked ones. During training
    ``weights`` is the straight-through mask so the rate also reaches the
    importance map.
    """
    logits = as_tensor(logits)
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[np.asarray(indices)]
    nll = -tsum(mul(log_softmax(logits, axis=-1), onehot), axis=-1) * (1.0 / np.log(2.0))
    return tsum(mul(nll, weights), axis=axis)


def rate_bits(probs, symbols):
    """Ideal code length in bits of a :class:`SymbolCube` under ``probs`` (K, h, w, L)."""
    valid = symbols.valid()
    p = np.take_along_axis(probs, symbols.indices[..., None], axis=-1)[..., 0]
    return float(-np.log2(p[valid]).sum())


class ContextCoder:
    """Evaluates the context model one position at a time for arithmetic coding.

    Each query looks only at a 5x5x5 neighbourhood with every position at or
    after the query zeroed, so the encoder (which knows the whole volume) and
    the decoder (which knows only the past) feed bitwise-identical inputs.
    """

    def __init__(self, params):
        get = lambda name: np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name])
        self.w0 = Tensor(get("ctx.conv0.w") * MASK_A)
        self.b0 = Tensor(get("ctx.conv0.b"))
        self.w1 = Tensor(get("ctx.conv1.w") * MASK_B)
        self.b1 = Tensor(get("ctx.conv1.b"))
        r = 2 * (KERNEL // 2)
        self.radius = r
        size = 2 * r + 1
        before = np.zeros((size,) * 3, dtype=np.float32)
        for idx in np.ndindex(*before.shape):
            before[idx] = tuple(i - r for i in idx) < (0, 0, 0)
        self._before = before

    def pad(self, grid):
        """Zero-pad a (h, w, K) grid so every query crop stays in bounds."""
        r = self.radius
        return np.pad(np.asarray(grid, dtype=np.float32), r)

    def probs_at(self, padded, h, w, k):
        """Distribution for position (h, w, k) of a grid already passed through :meth:`pad`."""
        r = self.radius
        H, W, K = (n - 2 * r for n in padded.shape)
        crop = padded[h : h + 2 * r + 1, w : w + 2 * r + 1, k : k + 2 * r + 1] * self._before
        hidden = relu(conv3d(crop[None, None], self.w0, self.b0)).data
        # hidden units outside the volume are zero padding in the full model
        offsets = np.arange(-1, 2)
        inner = (
            ((0 <= h + offsets) & (h + offsets < H))[:, None, None]
            & ((0 <= w + offsets) & (w + offsets < W))[None, :, None]
            & ((0 <= k + offsets) & (k + offsets < K))[None, None, :]
        )
        logits = conv3d(Tensor(hidden * inner), self.w1, self.b1).data.reshape(-1).astype(np.float64)
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()
