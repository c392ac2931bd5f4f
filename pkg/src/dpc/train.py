"""Joint rate-distortion training of the codec networks."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import codecnet
from .entropy.context import context_logits, rate_loss
from .metrics import dpl_tensor, ms_ssim_tensor
from .quantize import nearest_center, quantize_soft, quantize_ste, saturate
from .tensor import Tensor, backward, maximum_const, scale, straight_through, sub, tmean
from .fileutil import atomic_write

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lmbda: float = 1.0
    target_bpp: float = 0.5
    lr: float = 4e-3
    batch_size: int = 30
    decay_factor: float = 10.0
    decay_every_epochs: int = 2
    epochs: int = 6
    patch_size: int = 32
    seed: int = 0
    grad_clip: float = 5.0
    soft_quantization: bool = False
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lmbda", "lr", "decay_factor"):
            if not getattr(self, name) > 0 and not (name == "lmbda" and self.lmbda == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.target_bpp <= 8:
            raise ValueError(f"target_bpp must be in (0, 8], got {self.target_bpp}")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every_epochs < 1:
            raise ValueError("batch_size, epochs and decay_every_epochs must be >= 1")
        if self.patch_size % codecnet.DOWNSAMPLE:
            raise ValueError(f"patch_size must be a multiple of {codecnet.DOWNSAMPLE}")


def lr_at_epoch(config, epoch):
    """Step decay: divide by ``decay_factor`` every ``decay_every_epochs`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_factor ** -(epoch // config.decay_every_epochs)


def distortion_loss(x, x_hat, lmbda=1.0, net=None, w=None):
    """Batch mean of DPL + lmbda * (1 - MS-SSIM)."""
    d = tmean(dpl_tensor(x, x_hat, net, w))
    if lmbda == 0:
        return d
    return d + scale(tmean(sub(1.0, ms_ssim_tensor(x, x_hat))), lmbda)


def total_loss(distortion, rate_bpp, config):
    """alpha * D + max(t, beta * R); below the target the rate term is a constant."""
    rate_term = maximum_const(scale(rate_bpp, config.beta), config.target_bpp)
    return scale(distortion, config.alpha) + rate_term


@dataclass
class ForwardResult:
    x_hat: Tensor
    rate_bpp: Tensor
    mask_counts: np.ndarray


def codec_forward(params, x, config):
    """Training-mode pass over a batch (N, 3, H, W): reconstruction plus estimated rate."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    q, y = codecnet.encode(x, params)
    mask = codecnet.build_mask(y, params.config.K)
    hard_mask = straight_through(mask.ceil_m, mask.m)
    centers = params.centers
    qm = saturate(q, centers) * hard_mask
    if config.soft_quantization:
        q_hat = quantize_soft(qm, centers, config.sigma)
    else:
        q_hat = quantize_ste(qm, centers)
    x_hat = codecnet.decode(q_hat, params, clamp_output=False)
    # the rate reaches the encoder only through the importance map; letting it
    # flow into the latents via the straight-through quantizer drives them to
    # cheap saturated symbols and starves the decoder
    logits = context_logits(params.tensors, Tensor(q_hat.data))  # (N, K, h, w, L)
    idx = nearest_center(qm.data, centers)
    bits = rate_loss(logits, idx, hard_mask, axis=(1, 2, 3))
    pixels = x.shape[-1] * x.shape[-2]
    rate_bpp = tmean(scale(bits, 1.0 / pixels))
    return ForwardResult(x_hat, rate_bpp, mask.counts)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update applied in place to the arrays in ``params``.

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def train_step(params, batch, config, state, lr, net=None, w=None):
    """One optimisation step; returns the logged scalars."""
    res = codec_forward(params, batch, config)
    d = distortion_loss(batch, res.x_hat, config.lmbda, net, w)
    loss = total_loss(d, res.rate_bpp, config)
    record = {"D": d.item(), "R_bpp": res.rate_bpp.item(), "L": loss.item()}
    if not all(math.isfinite(v) for v in record.values()):
        logger.warning("non-finite loss %s; step skipped", record)
        record["skipped"] = True
        return record
    backward(loss)
    grads = {n: params[n].grad for n in params.learnable()}
    record["grad_norm"] = clip_global_norm(grads, config.grad_clip)
    arrays = {n: params[n].data for n in params.learnable()}
    if not adam_step(arrays, grads, state, lr):
        record["skipped"] = True
    return record


def train(dataset, config=None, codec_config=None, init=None, log_path=None, checkpoint_dir=None, net=None, w=None):
    """Train a codec on patches ``dataset`` (N, 3, P, P); returns ``(params, log)``.

    Batch order and initialisation depend only on ``config.seed``, so reruns match bitwise.
    """
    config = config or TrainConfig()
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError(f"dataset must be a non-empty (N, 3, H, W) array, got shape {data.shape}")
    if data.shape[-1] % codecnet.DOWNSAMPLE or data.shape[-2] % codecnet.DOWNSAMPLE:
        raise ValueError(f"patch dims {data.shape[-2:]} must be multiples of {codecnet.DOWNSAMPLE}")
    if init is None:
        init = codecnet.init_params(codec_config or codecnet.CodecConfig(), seed=config.seed, target_bpp=config.target_bpp)
    params = init.copy(requires_grad=True)
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    log = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            order = rng.permutation(len(data))
            for start in range(0, len(order), config.batch_size):
                batch = data[order[start : start + config.batch_size]]
                record = train_step(params, batch, config, state, lr, net, w)
                step += 1
                record = {"step": step, "epoch": epoch, "lr": lr, **record}
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            logger.info(
                "epoch %d lr %.1e L %.4f R %.3f bpp",
                epoch,
                lr,
                np.mean([r["L"] for r in log if r["epoch"] == epoch]),
                np.mean([r["R_bpp"] for r in log if r["epoch"] == epoch]),
            )
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                atomic_write(os.path.join(checkpoint_dir, f"epoch{epoch:02d}.dpcw"), params.to_bytes())
    finally:
        if log_fh:
            log_fh.close()
    return params.copy(), log


def sweep_rd_points(dataset, template, targets, codec_config=None, betas=None, net=None, w=None, finetune=None):
    """Train one model per target bit-rate; returns ``[(target, params, log), ...]``.

    By default each model starts from its own initialisation (the importance
    map is seeded from the target), so the runs are independent.

    With ``finetune`` (a :class:`TrainConfig` template) a shared base model is
    first trained at the highest target under ``template``. Every target's
    model then starts from that base, with the importance bias moved to the
    target's starting level (:func:`codecnet.retarget_importance`), and trains
    under ``finetune``. The models then differ mainly in rate rather than in
    where independent runs happened to land. The returned log covers the
    fine-tuning steps only.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("at least one target bit-rate is required")
    if betas is not None and len(betas) != len(targets):
        raise ValueError(f"{len(betas)} betas for {len(targets)} targets")
    base, top = None, max(targets)
    if finetune is not None:
        base, _ = train(dataset, replace(template, target_bpp=top), codec_config, net=net, w=w)
    out = []
    for i, t in enumerate(targets):
        extra = {"beta": betas[i]} if betas else {}
        if base is None:
            params, log = train(dataset, replace(template, target_bpp=t, **extra), codec_config, net=net, w=w)
        else:
            init = codecnet.retarget_importance(base, top, t)
            params, log = train(dataset, replace(finetune, target_bpp=t, **extra), init=init, net=net, w=w)
        out.append((t, params, log))
    return out


def config_dict(config):
    return asdict(config)
