"""Minimal dense tensor with reverse-mode automatic differentiation.

Only the operations the codec networks and the perceptual losses need
are provided. Layout is row-major, channels first
(``C, H, W``), with an optional leading batch axis (``N, C, H, W``) that
every spatial op accepts as well.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-10


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operator was configured with invalid hyper-parameters."""


class Tensor:
    """An n-dimensional float array that records how it was produced.

    ``data`` is float32 unless float64 is requested explicitly (used by the
    finite-difference checks). Leaves created with ``requires_grad=True`` get a
    zero ``grad`` buffer straight away, so tensors disconnected from a loss
    keep a zero gradient after :func:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DEFAULT_DTYPE
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.array(data, dtype=dtype, order="C", copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _result(data, parents, op, backward_fn):
    out = Tensor(data, dtype=data.dtype, _parents=parents, _op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(loss):
    """Return the nodes reachable from ``loss``, inputs before consumers."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``grad`` of every tensor requiring grad that feeds ``loss``.

    Gradients of the reachable graph are reset first, so calling this twice
    gives the same result rather than doubling it.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if node.requires_grad:
            node.grad = np.zeros_like(node.data)
    if not loss.requires_grad:
        return order
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return order


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", _bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", _bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), "div", _bw)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def _bw(g):
        _accumulate(a, g * s)

    return _result(a.data * a.data.dtype.type(s), (a,), "scale", _bw)


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)

    def _bw(g):
        _accumulate(a, g * e * a.data ** (e - 1))

    return _result(a.data**e, (a,), "pow", _bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def _bw(g):
        _accumulate(a, g * 0.5 / out)

    return _result(out, (a,), "sqrt", _bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def _bw(g):
        _accumulate(a, g * out)

    return _result(out, (a,), "exp", _bw)


def log(a):
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), "log", _bw)


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def _bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out.astype(a.dtype), (a,), "sigmoid", _bw)


def relu(a):
    a = as_tensor(a)
    on = a.data > 0

    def _bw(g):
        _accumulate(a, g * on)

    return _result(np.where(on, a.data, 0).astype(a.dtype), (a,), "relu", _bw)


def clamp(a, lo=None, hi=None, pass_inward=False):
    """Clip values; the gradient is zero wherever clipping was active.

    With ``pass_inward`` a clipped entry still receives gradients whose descent
    direction points back into [lo, hi], so clipping is never a trap.
    """
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data

    def _bw(g):
        if not pass_inward:
            _accumulate(a, g * inside)
            return
        keep = inside | ((a.data > out) & (g > 0)) | ((a.data < out) & (g < 0))
        _accumulate(a, g * keep)

    return _result(out.astype(a.dtype), (a,), "clamp", _bw)


def straight_through(hard, surrogate):
    """Forward ``hard`` values, backward the identity onto ``surrogate``.

    Used for nearest-center quantization (surrogate = the latents) and for
    the mask ceiling (surrogate = the fractional mask).
    """
    surrogate = as_tensor(surrogate)
    hard = np.asarray(hard, dtype=surrogate.dtype)
    if hard.shape != surrogate.shape:
        raise DimensionError(f"straight_through shapes differ: {hard.shape} vs {surrogate.shape}")

    def _bw(g):
        _accumulate(surrogate, g)

    return _result(hard.copy(), (surrogate,), "ste", _bw)


def maximum_const(a, value):
    """``max(value, a)`` for a scalar tensor; the constant branch has zero gradient."""
    a = as_tensor(a)
    take = a.data >= value
    out = np.where(take, a.data, a.data.dtype.type(value)).astype(a.dtype)

    def _bw(g):
        _accumulate(a, g * take)

    return _result(out, (a,), "max_const", _bw)


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), "reshape", _bw)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def _bw(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), "transpose", _bw)


def getitem(a, index):
    a = as_tensor(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _result(np.array(a.data[index]), (a,), "getitem", _bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", _bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", _bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def _spatial_axes(a):
    if a.ndim not in (3, 4):
        raise DimensionError(f"expected CHW or NCHW, got shape {a.shape}")
    return (a.ndim - 2, a.ndim - 1)


def mean_spatial(a):
    """Per-channel average over height and width."""
    return tmean(a, axis=_spatial_axes(a))


def sum_channels(a):
    """Sum a per-channel vector (``C`` or ``N, C``) down to a scalar."""
    return tsum(a)


def channel_normalize(a, eps=NORM_EPS):
    """Divide every spatial position's channel vector by its Euclidean norm."""
    a = as_tensor(a)
    if a.ndim not in (3, 4) or a.shape[-3] < 1:
        raise DimensionError(f"channel_normalize needs a channel axis, got {a.shape}")
    axis = a.ndim - 3
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def _bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out * dot) / norm)

    return _result(out, (a,), "channel_normalize", _bw)


def log_softmax(a, axis):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _bw(g):
        soft = np.exp(out)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), "log_softmax", _bw)


def softmax(a, axis):
    return exp(log_softmax(a, axis))


def avg_pool2d(a, size=2):
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    a = as_tensor(a)
    h, w = a.shape[-2] // size, a.shape[-1] // size
    if h == 0 or w == 0:
        raise DimensionError(f"input {a.shape} smaller than pooling window {size}")
    lead = a.shape[:-2]
    cropped = a.data[..., : h * size, : w * size]
    out = cropped.reshape(*lead, h, size, w, size).mean(axis=(-3, -1))

    def _bw(g):
        full = np.zeros_like(a.data)
        up = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        full[..., : h * size, : w * size] = up
        _accumulate(a, full)

    return _result(out.astype(a.dtype), (a,), "avg_pool2d", _bw)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _batched(x, spatial):
    """Add a batch axis if the input has only channel + spatial axes."""
    if x.ndim == spatial + 1:
        return x[None], True
    if x.ndim == spatial + 2:
        return x, False
    raise DimensionError(f"expected {spatial + 1} or {spatial + 2} axes, got shape {x.shape}")


def _conv_forward(x, w, stride, padding):
    """Cross-correlate ``x`` (N, C, *S) with ``w`` (O, C, *K); returns (out, windows)."""
    nsp = w.ndim - 2
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * nsp
    xp = np.pad(x, pad) if padding else x
    axes = tuple(range(2, 2 + nsp))
    win = sliding_window_view(xp, w.shape[2:], axis=axes)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nsp]
    # win: (N, C, *out, *K)
    kaxes = [1] + list(range(2 + nsp, 2 + 2 * nsp))
    out = np.tensordot(win, w, axes=(kaxes, [1] + list(range(2, 2 + nsp))))
    # out: (N, *out, O)
    out = np.moveaxis(out, -1, 1)
    return np.ascontiguousarray(out), win, xp.shape


def _conv_input_grad(g, w, stride, padding, xp_shape):
    """Scatter output gradients back onto the (padded) input."""
    nsp = w.ndim - 2
    # (N, O, *out) x (O, C, *K) -> (N, *out, C, *K)
    cols = np.tensordot(g, w, axes=([1], [0]))
    cols = np.moveaxis(cols, 1 + nsp, 1)  # (N, C, *out, *K)
    gx = np.zeros(xp_shape, dtype=g.dtype)
    out_sz = g.shape[2:]
    for offset in np.ndindex(*w.shape[2:]):
        dst = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sz)
        )
        gx[dst] += cols[(Ellipsis,) + offset]
    if padding:
        gx = gx[(slice(None), slice(None)) + (slice(padding, -padding),) * nsp]
    return gx


def _check_conv(x, w, b, stride, padding, nsp):
    if w.ndim != nsp + 2:
        raise DimensionError(f"kernel must have {nsp + 2} axes, got shape {w.shape}")
    if min(w.shape[2:]) < 1 or stride < 1 or padding < 0:
        raise ConfigurationError(f"bad conv config kernel={w.shape[2:]} stride={stride} padding={padding}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels (axis 1) = {x.shape[1]} but kernel expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match output channels {w.shape[0]}")
    for axis, (n, k) in enumerate(zip(x.shape[2:], w.shape[2:])):
        if n + 2 * padding < k:
            raise DimensionError(f"spatial axis {axis} of size {n} (+2*{padding}) smaller than kernel {k}")


def _convnd(x, w, b, stride, padding, nsp, name):
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    xb, squeezed = _batched(x.data, nsp)
    _check_conv(xb, w.data, b.data if b is not None else None, stride, padding, nsp)
    out, win, xp_shape = _conv_forward(xb, w.data, stride, padding)
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nsp)
    if squeezed:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        gb_ = g[None] if squeezed else g
        if x.requires_grad:
            gx = _conv_input_grad(gb_, w.data, stride, padding, xp_shape)
            _accumulate(x, gx[0] if squeezed else gx)
        if w.requires_grad:
            sp = list(range(2, 2 + nsp))
            gw = np.tensordot(gb_, win, axes=([0] + sp, [0] + sp))  # (O, C, *K)
            _accumulate(w, gw)
        if b is not None and b.requires_grad:
            _accumulate(b, gb_.sum(axis=tuple([0] + list(range(2, 2 + nsp)))))

    return _result(out, parents, name, _bw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``w`` (O,C,k,k)."""
    return _convnd(x, w, b, int(stride), int(padding), 2, "conv2d")


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation of ``x`` (C,D,H,W or N,C,D,H,W) with ``w`` (O,C,k,k,k)."""
    return _convnd(x, w, b, int(stride), int(padding), 3, "conv3d")


def conv_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def deconv2d(x, w, b=None, stride=2):
    """Transposed convolution with ``w`` laid out (I, O, k, k).

    The kernel size must be a multiple of the stride so that every output
    pixel receives the same number of kernel taps (no checkerboard overlap).
    The output is cropped symmetrically to exactly ``stride`` times the input.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    stride = int(stride)
    k = w.shape[-1]
    if w.ndim != 4 or w.shape[-2] != k:
        raise DimensionError(f"deconv kernel must be (I, O, k, k), got {w.shape}")
    if stride < 1 or k < 1 or k % stride:
        raise ConfigurationError(f"deconv kernel size {k} is not divisible by stride {stride}")
    xb, squeezed = _batched(x.data, 2)
    if xb.shape[1] != w.shape[0]:
        raise DimensionError(f"input channels (axis 1) = {xb.shape[1]} but kernel expects {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match output channels {w.shape[1]}")
    n, _, h, wd = xb.shape
    full_h, full_w = (h - 1) * stride + k, (wd - 1) * stride + k
    crop = (k - stride) // 2
    full = np.zeros((n, w.shape[1], full_h, full_w), dtype=xb.dtype)
    # (N, I, H, W) x (I, O, k, k) -> (N, H, W, O, k, k)
    prod = np.tensordot(xb, w.data, axes=([1], [0]))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride] += np.moveaxis(
                prod[..., i, j], -1, 1
            )
    out = full[:, :, crop : crop + h * stride, crop : crop + wd * stride]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    if squeezed:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        gb_ = g[None] if squeezed else g
        gfull = np.zeros((n, w.shape[1], full_h, full_w), dtype=gb_.dtype)
        gfull[:, :, crop : crop + h * stride, crop : crop + wd * stride] = gb_
        # gather per tap: (N, O, H, W, k, k)
        taps = np.empty((n, w.shape[1], h, wd, k, k), dtype=gb_.dtype)
        for i in range(k):
            for j in range(k):
                taps[..., i, j] = gfull[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride]
        if x.requires_grad:
            gx = np.tensordot(taps, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, I)
            gx = np.moveaxis(gx, -1, 1)
            _accumulate(x, gx[0] if squeezed else gx)
        if w.requires_grad:
            _accumulate(w, np.tensordot(xb, taps, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            _accumulate(b, gb_.sum(axis=(0, 2, 3)))

    return _result(out, parents, "deconv2d", _bw)


def filter2d_valid(x, kernel1d):
    """Separable 'valid' filtering of every channel with a fixed 1D kernel.

    The kernel is a constant (no gradient). Used for the Gaussian windows of SSIM.
    """
    x = as_tensor(x)
    k = np.asarray(kernel1d, dtype=x.dtype)
    size = k.shape[0]
    if x.shape[-1] < size or x.shape[-2] < size:
        raise DimensionError(f"input {x.shape} smaller than filter window {size}")
    rows = sliding_window_view(x.data, size, axis=-1) @ k
    out = sliding_window_view(rows, size, axis=-2) @ k
    h_out, w_out = out.shape[-2:]

    def _bw(g):
        g_rows = np.zeros(rows.shape, dtype=g.dtype)
        for i in range(size):
            g_rows[..., i : i + h_out, :] += g * k[i]
        gx = np.zeros_like(x.data)
        for j in range(size):
            gx[..., :, j : j + w_out] += g_rows * k[j]
        _accumulate(x, gx)

    return _result(np.ascontiguousarray(out), (x,), "filter2d", _bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_grad(fn, arrays, index, h=1e-3):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]`` in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        hi = float(fn(*arrays))
        target[idx] = orig - h
        lo = float(fn(*arrays))
        target[idx] = orig
        grad[idx] = (hi - lo) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, arrays, h=1e-3):
    """Largest relative error between analytic and numeric gradients over all inputs.

    ``fn`` takes Tensors and returns a scalar Tensor; it is evaluated in float64.
    """

    def scalar(*arrs):
        return fn(*[Tensor(a, dtype=np.float64) for a in arrs]).item()

    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    backward(fn(*tensors))
    worst = 0.0
    for i, t in enumerate(tensors):
        worst = max(worst, relative_error(t.grad, numerical_grad(scalar, arrays, i, h)))
    return worst
