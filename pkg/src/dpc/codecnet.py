"""Residual convolutional encoder/decoder with an importance-map head."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .entropy.context import context_param_shapes, init_context_params
from .quantize import DEFAULT_CENTERS, check_centers
from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    clamp,
    conv2d,
    deconv2d,
    getitem,
    mul,
    relu,
    scale,
    sigmoid,
    straight_through,
    sub,
)
from .weights import FormatError, dump_weights, load_weights, parse_weights, save_weights, weights_hash

DOWNSAMPLE = 8
ENC_KERNEL = 4
DEC_KERNEL = 2
LATENT_GAIN = 4.0
STORED_WEIGHT_STD = 0.25
# initial importance as a fraction of K when no target rate is given
IMPORTANCE_INIT = 0.5
# the importance map starts where uniform coding would spend this multiple of
# the target rate; the clipped rate term then trims it down
INIT_RATE_MARGIN = 1.25
# scales the importance logit so single optimizer steps move the map gently
IMPORTANCE_TEMPERATURE = 0.05


@dataclass(frozen=True)
class CodecConfig:
    K: int = 8
    residual_blocks: int = 2
    base_channels: int = 32
    num_centers: int = 6
    context_hidden: int = 24
    downsample_factor: int = DOWNSAMPLE

    def __post_init__(self):
        if self.K < 1 or self.residual_blocks < 0 or self.base_channels < 1 or self.context_hidden < 1:
            raise ValueError(f"invalid codec config {self}")
        if self.downsample_factor != DOWNSAMPLE:
            raise ValueError(f"downsample factor is fixed at {DOWNSAMPLE}, got {self.downsample_factor}")
        if self.num_centers < 2:
            raise ValueError(f"need at least 2 centers, got {self.num_centers}")


def param_shapes(config):
    """Every learnable tensor's shape, derived from the config alone."""
    C, K = config.base_channels, config.K
    shapes = {}
    shapes["enc.down0.w"] = (C, 3, ENC_KERNEL, ENC_KERNEL)
    shapes["enc.down0.b"] = (C,)
    for i in (1, 2):
        shapes[f"enc.down{i}.w"] = (C, C, ENC_KERNEL, ENC_KERNEL)
        shapes[f"enc.down{i}.b"] = (C,)
    for prefix in ("enc", "dec"):
        if prefix == "dec":
            shapes["dec.in.w"] = (C, K, 3, 3)
            shapes["dec.in.b"] = (C,)
        for r in range(config.residual_blocks):
            for j in (0, 1):
                shapes[f"{prefix}.res{r}.conv{j}.w"] = (C, C, 3, 3)
                shapes[f"{prefix}.res{r}.conv{j}.b"] = (C,)
        if prefix == "enc":
            shapes["enc.head.w"] = (K + 1, C, 3, 3)
            shapes["enc.head.b"] = (K + 1,)
    for i, cout in enumerate((C, C, 3)):
        shapes[f"dec.up{i}.w"] = (C, cout, DEC_KERNEL, DEC_KERNEL)
        shapes[f"dec.up{i}.b"] = (cout,)
    shapes.update(context_param_shapes(config.num_centers, config.context_hidden))
    shapes["centers"] = (config.num_centers,)
    return shapes


@dataclass
class ModelParams:
    """Every network weight of the codec plus the quantizer centers."""

    config: CodecConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    @property
    def centers(self):
        return self.tensors["centers"].data

    def learnable(self):
        """Names of trained tensors (the centers stay fixed)."""
        return [n for n in self.tensors if n != "centers"]

    def arrays(self):
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self, requires_grad=False):
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=requires_grad and n != "centers") for n, t in self.tensors.items()},
        )

    def to_bytes(self):
        return dump_weights({"kind": "codec", **asdict(self.config)}, self.arrays())

    def hash(self):
        return weights_hash({"kind": "codec", **asdict(self.config)}, self.arrays())

    def equals(self, other):
        return self.config == other.config and self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(self.tensors[n].data, other.tensors[n].data) for n in self.tensors
        )


def initial_importance(config, target_bpp=None):
    """Starting importance as a fraction of K.

    Without a target this is :data:`IMPORTANCE_INIT`. With one, the map starts
    where uniform coding of the retained symbols costs ``INIT_RATE_MARGIN``
    times the target, kept inside [0.02, 0.98].
    """
    if target_bpp is None:
        return IMPORTANCE_INIT
    full_rate = config.K * np.log2(config.num_centers) / DOWNSAMPLE**2
    return float(np.clip(INIT_RATE_MARGIN * target_bpp / full_rate, 0.02, 0.98))


def fan_in(name, shape):
    """Inputs feeding one output unit (transposed convs here never overlap, so only I counts)."""
    return shape[0] if name.startswith("dec.up") else shape[1] * shape[2] * shape[3]


def weight_gain(name, shape):
    """Runtime scale: stored weights have std ``STORED_WEIGHT_STD`` and are multiplied by this.

    Keeping the constant out of the stored values gives every layer the same
    effective Adam step relative to its activations; with the constant folded
    into the weights, a single step at the default learning rate can shift a
    wide layer's pre-activations by about their own spread and switch off
    whole rectifier layers.
    """
    return float(np.sqrt(2.0 / fan_in(name, shape)) / STORED_WEIGHT_STD)


def _weight(params, name):
    w = params[name]
    return scale(w, weight_gain(name, w.shape))


def init_params(config=None, seed=0, centers=None, target_bpp=None):
    """Unit-normal stored weights (see :func:`weight_gain`), zero biases, importance bias from :func:`initial_importance`."""
    config = config or CodecConfig()
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    arrays = {}
    for name, shape in shapes.items():
        if name.startswith("ctx.") or name == "centers":
            continue
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, np.float32)
        else:
            arrays[name] = (rng.standard_normal(shape) * STORED_WEIGHT_STD).astype(np.float32)
    for r in range(config.residual_blocks):
        for prefix in ("enc", "dec"):
            arrays[f"{prefix}.res{r}.conv1.w"] *= 0.1
    # latents start spread over several centers; reconstructions start near mid-grey
    arrays["enc.head.w"][: config.K] *= LATENT_GAIN
    arrays["dec.up2.w"] *= 0.1
    arrays["enc.head.b"][-1] = _importance_logit(config, target_bpp)
    arrays.update(init_context_params(config.num_centers, config.context_hidden, rng))
    if centers is None:
        centers = np.linspace(DEFAULT_CENTERS[0], DEFAULT_CENTERS[-1], config.num_centers)
    arrays["centers"] = check_centers(centers)
    return ModelParams(config, {n: Tensor(arrays[n]) for n in shapes})


def _importance_logit(config, target_bpp):
    frac = initial_importance(config, target_bpp)
    return float(np.log(frac / (1.0 - frac)) / IMPORTANCE_TEMPERATURE)


def retarget_importance(params, from_bpp, to_bpp):
    """Copy of ``params`` with the importance bias moved from one target's starting level to another's.

    The shift equals the difference between the two targets' initial biases,
    so a model trained at ``from_bpp`` starts fine-tuning for ``to_bpp`` at
    roughly the rate a fresh model for ``to_bpp`` would start at.
    """
    out = params.copy()
    shift = _importance_logit(params.config, to_bpp) - _importance_logit(params.config, from_bpp)
    out.tensors["enc.head.b"].data[-1] += np.float32(shift)
    return out


def _residual(x, params, prefix):
    h = relu(conv2d(x, _weight(params, f"{prefix}.conv0.w"), params[f"{prefix}.conv0.b"], padding=1))
    return add(x, conv2d(h, _weight(params, f"{prefix}.conv1.w"), params[f"{prefix}.conv1.b"], padding=1))


def _spatial(x):
    return x.shape[-2], x.shape[-1]


def encode(x, params):
    """Image (3, H, W) or batch (N, 3, H, W) in [0, 1] -> (latents q, importance map y).

    ``q`` has K channels at 1/8 resolution; ``y`` is a single channel in [0, K],
    produced by a scaled sigmoid so it keeps a gradient over the whole range.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise DimensionError(f"expected an RGB image (3, H, W) or batch, got shape {x.shape}")
    H, W = _spatial(x)
    if H % DOWNSAMPLE or W % DOWNSAMPLE or H == 0 or W == 0:
        raise DimensionError(f"image dims {H}x{W} must be positive multiples of {DOWNSAMPLE}; pad first")
    K = params.config.K
    h = sub(x, 0.5)
    for i in range(3):
        h = conv2d(h, _weight(params, f"enc.down{i}.w"), params[f"enc.down{i}.b"], stride=2, padding=1)
        h = relu(h)
    for r in range(params.config.residual_blocks):
        h = _residual(h, params, f"enc.res{r}")
    out = conv2d(h, _weight(params, "enc.head.w"), params["enc.head.b"], padding=1)
    lead = (slice(None),) * (out.ndim - 3)
    q = getitem(out, lead + (slice(0, K),))
    logit = scale(getitem(out, lead + (slice(K, K + 1),)), IMPORTANCE_TEMPERATURE)
    y = clamp(scale(sigmoid(logit), float(K)), 0.0, float(K))
    return q, y


@dataclass
class ImportanceMask:
    y: Tensor
    m: Tensor
    ceil_m: np.ndarray

    @property
    def counts(self):
        """Number of retained channels per location (the prefix length)."""
        return self.ceil_m.sum(axis=-3).astype(np.int64)


def build_mask(y, K):
    """Expand the importance map into a K-channel mask m = clamp(y - k, 0, 1)."""
    y = as_tensor(y)
    k = np.arange(K, dtype=y.dtype).reshape((K, 1, 1))
    m = clamp(sub(y, k), 0.0, 1.0)
    return ImportanceMask(y, m, np.ceil(m.data).astype(y.dtype))


def apply_mask(q, mask):
    """q * ceil(m), with the ceiling's gradient taken as that of m."""
    q = as_tensor(q)
    if q.shape != mask.m.shape:
        raise DimensionError(f"latents {q.shape} and mask {mask.m.shape} differ")
    return mul(q, straight_through(mask.ceil_m, mask.m))


def decode(q_hat, params, clamp_output=True):
    """Latents (K, h, w) or (N, K, h, w) -> image at 8x the resolution.

    Output is clipped to [0, 1] only when ``clamp_output`` is set (inference).
    """
    q_hat = as_tensor(q_hat)
    if q_hat.ndim not in (3, 4) or q_hat.shape[-3] != params.config.K:
        raise DimensionError(f"expected latents with {params.config.K} channels, got shape {q_hat.shape}")
    h = relu(conv2d(q_hat, _weight(params, "dec.in.w"), params["dec.in.b"], padding=1))
    for r in range(params.config.residual_blocks):
        h = _residual(h, params, f"dec.res{r}")
    for i in range(3):
        h = deconv2d(h, _weight(params, f"dec.up{i}.w"), params[f"dec.up{i}.b"], stride=2)
        if i < 2:
            h = relu(h)
    x_hat = add(h, 0.5)
    if clamp_output:
        return Tensor(np.clip(x_hat.data, 0.0, 1.0))
    return x_hat


def _params_from(config_dict, arrays, expected=None):
    if config_dict.get("kind") != "codec":
        raise FormatError(f"weights file holds a {config_dict.get('kind')!r}, not a codec model", 6)
    fields = {k: v for k, v in config_dict.items() if k != "kind"}
    try:
        config = CodecConfig(**fields)
    except TypeError as exc:
        raise FormatError(f"bad codec config block: {exc}", 10) from None
    if expected is not None and config != expected:
        raise DimensionError(f"model config {config} does not match expected {expected}")
    shapes = param_shapes(config)
    if set(shapes) != set(arrays):
        missing, extra = set(shapes) - set(arrays), set(arrays) - set(shapes)
        raise DimensionError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise DimensionError(f"{name}: stored shape {arrays[name].shape}, config implies {shape}")
    return ModelParams(config, {n: Tensor(arrays[n]) for n in shapes})


def save_model(params, path):
    save_weights(path, {"kind": "codec", **asdict(params.config)}, params.arrays())


def load_model(path, expected=None):
    """Read a codec model; ``expected`` (a CodecConfig) guards against loading the wrong shape."""
    config, arrays = load_weights(path)
    return _params_from(config, arrays, expected)


def model_from_bytes(data, expected=None):
    config, arrays = parse_weights(data)
    return _params_from(config, arrays, expected)
