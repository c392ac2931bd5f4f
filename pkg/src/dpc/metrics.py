"""Image quality metrics: PSNR, (MS-)SSIM and the deep perceptual loss.

MS-SSIM and DPL are written with :mod:`dpc.tensor` ops so the same code
serves as an evaluation metric (float64, no gradient) and as a training
loss (float32, differentiable w.r.t. the reconstruction).
"""

import csv
import functools
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fileutil import atomic_write
from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    as_tensor,
    avg_pool2d,
    channel_normalize,
    clamp,
    conv2d,
    div,
    filter2d_valid,
    mean_spatial,
    mul,
    power,
    relu,
    sub,
    sum_channels,
    tmean,
    tsum,
)
from .weights import dump_weights, load_weights, save_weights

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03
WINDOW_SIZE, WINDOW_SIGMA = 11, 1.5
LUMA = (0.299, 0.587, 0.114)
PSNR_CAP = 99.0
# mean contrast-structure terms are floored here before the fractional powers
CS_FLOOR = 1e-8


def psnr(x, x_hat):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` for identical inputs."""
    x, x_hat = np.asarray(x, np.float64), np.asarray(x_hat, np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"psnr shapes differ: {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


@functools.lru_cache(maxsize=None)
def num_scales(height, width, max_scales=5, window=WINDOW_SIZE):
    """Largest number of dyadic scales at which the Gaussian window still fits."""
    n, h, w = 0, height, width
    while n < max_scales and min(h, w) >= window:
        n += 1
        h, w = h // 2, w // 2
    if n == 0:
        raise DimensionError(f"image {height}x{width} is smaller than the {window}x{window} SSIM window")
    if n < max_scales:
        logger.warning("MS-SSIM on %dx%d uses %d of %d scales (renormalised weights)", height, width, n, max_scales)
    return n


def scale_weights(n):
    w = np.asarray(MS_SSIM_WEIGHTS[:n], dtype=np.float64)
    return w / w.sum()


def to_luma(x):
    """RGB (…, 3, H, W) -> luminance (…, 1, H, W); single-channel input passes through."""
    x = as_tensor(x)
    if x.shape[-3] == 1:
        return x
    if x.shape[-3] != 3:
        raise DimensionError(f"expected 1 or 3 channels, got {x.shape}")
    coeffs = np.asarray(LUMA, dtype=x.dtype).reshape(3, 1, 1)
    return tsum(mul(x, coeffs), axis=x.ndim - 3, keepdims=True)


def _ssim_terms(x, y, window):
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_x, mu_y = filter2d_valid(x, window), filter2d_valid(y, window)
    mu_xx, mu_yy, mu_xy = mul(mu_x, mu_x), mul(mu_y, mu_y), mul(mu_x, mu_y)
    s_xx = sub(filter2d_valid(mul(x, x), window), mu_xx)
    s_yy = sub(filter2d_valid(mul(y, y), window), mu_yy)
    s_xy = sub(filter2d_valid(mul(x, y), window), mu_xy)
    cs = div(s_xy * 2.0 + c2, s_xx + s_yy + c2)
    lum = div(mu_xy * 2.0 + c1, mu_xx + mu_yy + c1)
    return lum, cs


def _per_image_mean(t):
    # (…, 1, h, w) -> (…,)
    return tmean(t, axis=(t.ndim - 3, t.ndim - 2, t.ndim - 1))


def ms_ssim_tensor(x, x_hat, max_scales=5):
    """Differentiable MS-SSIM per image (shape ``()`` or ``(N,)``)."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"ms_ssim shapes differ: {x.shape} vs {x_hat.shape}")
    a, b = to_luma(x), to_luma(x_hat)
    n = num_scales(x.shape[-2], x.shape[-1], max_scales)
    weights = scale_weights(n)
    window = gaussian_window()
    result = None
    for s in range(n):
        lum, cs = _ssim_terms(a, b, window)
        if s < n - 1:
            term = _per_image_mean(cs)
            a, b = avg_pool2d(a), avg_pool2d(b)
        else:
            term = _per_image_mean(mul(lum, cs))
        factor = power(clamp(term, CS_FLOOR, None), weights[s])
        result = factor if result is None else mul(result, factor)
    return result


def ms_ssim(x, x_hat, max_scales=5):
    """MS-SSIM of one image pair (or mean over a batch), evaluated in float64."""
    val = ms_ssim_tensor(Tensor(np.asarray(x, np.float64)), Tensor(np.asarray(x_hat, np.float64)), max_scales)
    return float(np.mean(val.data))


def ssim(x, x_hat):
    """Single-scale SSIM (mean of the SSIM map) in float64."""
    a = to_luma(Tensor(np.asarray(x, np.float64)))
    b = to_luma(Tensor(np.asarray(x_hat, np.float64)))
    lum, cs = _ssim_terms(a, b, gaussian_window())
    return float(np.mean((lum.data * cs.data)))


# ---------------------------------------------------------------------------
# deep perceptual loss
# ---------------------------------------------------------------------------


@dataclass
class FeatureNet:
    """Frozen stack of (3x3 conv -> ReLU [tap] -> 2x avg-pool) blocks.

    ``affine`` optionally holds a per-input-channel ``(scale, shift)`` applied
    before the first block.
    """

    weights: list
    biases: list
    affine: tuple = None

    @property
    def channels(self):
        return [w.shape[0] for w in self.weights]

    @property
    def num_taps(self):
        return len(self.weights)

    def taps(self, x):
        h = as_tensor(x)
        if self.affine is not None:
            scale, shift = self.affine
            h = mul(h, np.asarray(scale, h.dtype).reshape(-1, 1, 1)) + np.asarray(shift, h.dtype).reshape(-1, 1, 1)
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pad = w.shape[-1] // 2
            h = relu(conv2d(h, w, b, padding=pad))
            out.append(h)
            if i + 1 < len(self.weights) and min(h.shape[-2:]) >= 2:
                h = avg_pool2d(h)
        return out

    def arrays(self):
        arrs = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrs[f"feat.block{i}.w"] = w.data
            arrs[f"feat.block{i}.b"] = b.data
        if self.affine is not None:
            arrs["affine.scale"] = np.asarray(self.affine[0], np.float32)
            arrs["affine.shift"] = np.asarray(self.affine[1], np.float32)
        return arrs

    def fingerprint(self):
        return dump_weights({"kind": "featurenet"}, self.arrays())


@dataclass
class LayerWeights:
    """Non-negative per-channel weights, one vector per tap."""

    per_tap: list = field(default_factory=list)

    def __post_init__(self):
        self.per_tap = [np.asarray(w, dtype=np.float32).reshape(-1) for w in self.per_tap]
        for i, w in enumerate(self.per_tap):
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ConfigurationError(f"tap {i} weights must be finite and non-negative")

    def check(self, net):
        if len(self.per_tap) != net.num_taps:
            raise ConfigurationError(f"{len(self.per_tap)} weight vectors for {net.num_taps} taps")
        for i, (w, c) in enumerate(zip(self.per_tap, net.channels)):
            if w.shape[0] != c:
                raise ConfigurationError(f"tap {i}: {w.shape[0]} weights for {c} channels")


DEFAULT_FEATURE_CHANNELS = (8, 16, 32, 32, 32)
DEFAULT_FEATURE_SEED = 1234


def make_feature_net(channels=DEFAULT_FEATURE_CHANNELS, seed=DEFAULT_FEATURE_SEED, in_channels=3):
    """Seeded random feature net and tap weights (stand-in for pretrained VGG/LPIPS weights)."""
    rng = np.random.default_rng(seed)
    weights, biases, lin = [], [], []
    cin = in_channels
    for c in channels:
        w = rng.standard_normal((c, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        weights.append(Tensor(w.astype(np.float32)))
        biases.append(Tensor((rng.standard_normal(c) * 0.05).astype(np.float32)))
        lin.append(rng.uniform(0.5, 1.5, size=c))
        cin = c
    return FeatureNet(weights, biases), LayerWeights(lin)


@functools.lru_cache(maxsize=1)
def default_feature_net():
    return make_feature_net()


def _dpl_terms(x, x_hat, net, w):
    w.check(net)
    total = None
    for za, zb, wl in zip(net.taps(x), net.taps(x_hat), w.per_tap):
        diff = sub(channel_normalize(zb), channel_normalize(za))
        scaled = mul(diff, wl.astype(diff.dtype).reshape(-1, 1, 1))
        term = sum_per_image(mean_spatial(mul(scaled, scaled)))
        total = term if total is None else total + term
    return total


def sum_per_image(per_channel):
    if per_channel.ndim == 1:
        return sum_channels(per_channel)
    return tsum(per_channel, axis=-1)


def dpl_tensor(x, x_hat, net=None, w=None):
    """Differentiable deep perceptual loss per image (``()`` or ``(N,)``).

    For every tap: normalise activations to unit length across channels,
    scale the difference channel-wise by ``w``, square, average over space and
    sum over channels; then sum over taps.
    """
    if net is None or w is None:
        net, w = default_feature_net()
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"dpl shapes differ: {x.shape} vs {x_hat.shape}")
    return _dpl_terms(x, x_hat, net, w)


def dpl(x, x_hat, net=None, w=None):
    """Deep perceptual loss of an image pair in float64 (mean over a batch)."""
    val = dpl_tensor(Tensor(np.asarray(x, np.float64)), Tensor(np.asarray(x_hat, np.float64)), net, w)
    return float(np.mean(val.data))


def save_lpips_weights(path, net, w):
    w.check(net)
    arrs = net.arrays()
    for i, v in enumerate(w.per_tap):
        arrs[f"lin{i}"] = v
    config = {"kind": "featurenet", "channels": net.channels, "affine": net.affine is not None}
    save_weights(path, config, arrs)


def load_lpips_weights(path, taps=5):
    """Frozen feature net plus tap weights from a weights file."""
    config, arrs = load_weights(path)
    if config.get("kind") != "featurenet":
        raise ConfigurationError(f"{path} holds a {config.get('kind')!r}, not a feature net")
    channels = list(config.get("channels", []))
    if len(channels) != taps:
        raise ConfigurationError(f"feature net has {len(channels)} taps, expected {taps}")
    weights, biases, lin = [], [], []
    for i, c in enumerate(channels):
        try:
            wt, bt, lt = arrs[f"feat.block{i}.w"], arrs[f"feat.block{i}.b"], arrs[f"lin{i}"]
        except KeyError as exc:
            raise ConfigurationError(f"missing tensor {exc.args[0]} in {path}") from None
        if wt.shape[0] != c or bt.shape != (c,):
            raise ConfigurationError(f"block {i}: weight {wt.shape} / bias {bt.shape} disagree with {c} channels")
        weights.append(Tensor(wt))
        biases.append(Tensor(bt))
        lin.append(lt)
    affine = None
    if config.get("affine"):
        affine = (arrs["affine.scale"], arrs["affine.shift"])
    net, w = FeatureNet(weights, biases, affine), LayerWeights(lin)
    w.check(net)
    return net, w


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("image", "bpp", "psnr_db", "ms_ssim", "dpl")
MEAN_ROW = "__mean__"


@dataclass
class ImageMetrics:
    image: str
    bpp: float
    psnr_db: float
    ms_ssim: float
    dpl: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def mean(self):
        """Arithmetic mean of each metric over the per-image rows (PSNR capped first)."""
        if not self.rows:
            return ImageMetrics(MEAN_ROW, math.nan, math.nan, math.nan, math.nan)
        n = len(self.rows)
        return ImageMetrics(
            MEAN_ROW,
            sum(r.bpp for r in self.rows) / n,
            sum(min(r.psnr_db, PSNR_CAP) for r in self.rows) / n,
            sum(r.ms_ssim for r in self.rows) / n,
            sum(r.dpl for r in self.rows) / n,
        )

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows + [self.mean()]:
            writer.writerow([r.image, repr(float(r.bpp)), repr(min(float(r.psnr_db), PSNR_CAP)), repr(float(r.ms_ssim)), repr(float(r.dpl))])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write(path, self.to_csv().encode("utf-8"))


def read_report_csv(path):
    """Parse a report CSV into ``(rows, mean_row)``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [ImageMetrics(r["image"], *(float(r[c]) for c in CSV_COLUMNS[1:])) for r in reader]
    mean = [r for r in rows if r.image == MEAN_ROW]
    return [r for r in rows if r.image != MEAN_ROW], (mean[0] if mean else None)
