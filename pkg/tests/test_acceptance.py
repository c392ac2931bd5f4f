"""The nine acceptance criteria, each checked at its stated tolerance.

Every test records a one-line verdict (printed immediately and repeated in
the terminal summary) before asserting, so a failing criterion still
reports the measured numbers.

Training-based criteria share a desk-scale setup: a 1,000-patch 32x32 toy
corpus and K = 32 latent channels. The single-model checks use the default
schedule (lr 4e-3, batch 30, decay x10 every 2 epochs, lambda = 1, 6 epochs).
The rate-distortion sweep fine-tunes one shared 18-epoch base model per
target on that schedule. Rates and perceptual distances are measured by
coding 20 held-out 64x64 toy images.
"""

import math
import time

import numpy as np
import pytest

from dpc import pipeline
from dpc.codecnet import CodecConfig, apply_mask, build_mask, decode, encode
from dpc.data import synthetic_image, toy_corpus
from dpc.entropy.context import init_context_params
from dpc.entropy.rangecoder import ac_encode, decode_mask_plane, encode_mask_plane
from dpc.entropy.symbols import decode_symbols, encode_symbols
from dpc.imageio import to_float, to_uint8
from dpc.metrics import default_feature_net, dpl, ms_ssim, psnr
from dpc.quantize import SymbolCube, nearest_center, quantize_hard, saturate
from dpc.tensor import Tensor, gradcheck
from dpc.train import TrainConfig, sweep_rd_points, train
from gradcases import CASES, INSTANCES, instances
from oracles import apply_mask_loop, argmin_centers, correlated_pair, mask_loop, naive_ms_ssim

VERDICTS = {}

CORPUS_SIZE, PATCH = 1000, 32
TOY_K = 32
TARGET = 0.5
SWEEP_TARGETS = (0.23, 0.37, 0.67, 1.0)
# independently trained desk-scale models differ more from run to run than
# their rates separate them, so the sweep trains one base model at the top
# rate on the default schedule stretched threefold, then fine-tunes a copy
# for every target on the default schedule
SWEEP_BASE = TrainConfig(epochs=18, decay_every_epochs=6)
SWEEP_FINETUNE = TrainConfig()
HELD_OUT = 20
CENTERS = np.linspace(-2, 3, 6).astype(np.float32)


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    VERDICTS[number] = line
    print(line)
    return passed


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return toy_corpus(CORPUS_SIZE, PATCH, seed=0)


@pytest.fixture(scope="module")
def held_out():
    """Full 64x64 images from the toy generator under a seed the corpus never uses."""
    rng = np.random.default_rng(12345)
    return [synthetic_image(rng, 64, 64) for _ in range(HELD_OUT)]


@pytest.fixture(scope="module")
def toy_model(corpus):
    start = time.perf_counter()
    params, log = train(corpus, TrainConfig(target_bpp=TARGET), CodecConfig(K=TOY_K))
    return params, log, time.perf_counter() - start


def reconstruct_batch(params, x):
    """Reconstruct a batch through the inference path, skipping the lossless entropy stage."""
    q, y = encode(Tensor(x), params)
    mask = build_mask(y.data, params.config.K)
    masked = saturate(q, params.centers).data * mask.ceil_m
    _, values = quantize_hard(masked, params.centers)
    return decode(Tensor(values * mask.ceil_m), params).data


def code_images(params, images):
    """Compress and decompress each image; returns (containers, reconstructions as 8-bit floats)."""
    packed = [pipeline.compress_array(x, params) for x in images]
    recon = [to_float(to_uint8(pipeline.decompress_bytes(p.data, params))) for p in packed]
    return packed, recon


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst, counts, ok = {}, {}, True
    for name, (_, tol, step) in CASES.items():
        errors = [gradcheck(fn, arrays, h=step) for fn, arrays in instances(name, seed=1)]
        worst[name], counts[name] = max(errors), len(errors)
        ok &= worst[name] < tol and len(errors) >= INSTANCES
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    detail = ", ".join(f"{n} {worst[n]:.1e}" for n in CASES) + f"; {min(counts.values())}+ instances each; {elapsed:.0f} s"
    assert record(1, ok, detail)


# ---------------------------------------------------------------------------
# 2. coder
# ---------------------------------------------------------------------------


def test_criterion_2_coder_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    context = init_context_params(6, 6, rng)
    context["ctx.conv1.w"] = (rng.normal(size=context["ctx.conv1.w"].shape) * 0.3).astype(np.float32)
    context = {k: Tensor(v) for k, v in context.items()}
    failures = 0
    for _ in range(1000):
        K, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        counts = rng.integers(0, K + 1, size=(h, w))
        cube = SymbolCube(rng.integers(0, 6, size=(K, h, w)), counts)
        mask_bytes = encode_mask_plane(counts, K)
        payload = encode_symbols(cube, CENTERS, context)
        back_counts = decode_mask_plane(mask_bytes, (h, w), K)
        back = decode_symbols(payload, back_counts, K, CENTERS, context)
        valid = cube.valid()
        if not (np.array_equal(back_counts, counts) and np.array_equal(back.indices[valid], cube.indices[valid])):
            failures += 1
    n = 100_000
    symbols = rng.integers(0, 6, size=n)
    bits = 8 * len(ac_encode(symbols, lambda i, prev: np.full(6, 1 / 6)))
    ideal = n * math.log2(6)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and abs(bits - ideal) <= 0.01 * ideal + 64 and elapsed < 60
    assert record(2, ok, f"{failures}/1000 round-trip failures; 1e5 uniform symbols {bits} bits vs {ideal:.0f} ideal; {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 3. rate consistency
# ---------------------------------------------------------------------------


def test_criterion_3_rate_consistency(toy_model, held_out):
    params = toy_model[0]
    worst, ok = 0.0, True
    for x in held_out:
        packed = pipeline.compress_array(x, params)
        actual, predicted = 8 * packed.payload_bytes, packed.predicted_bits
        ok &= abs(actual - predicted) <= 0.02 * predicted + 64
        worst = max(worst, abs(actual - predicted) / max(predicted, 1.0))
    assert record(3, ok, f"{len(held_out)} held-out images; worst payload/prediction gap {100 * worst:.2f}% (bound 2% + 64 bits)")


# ---------------------------------------------------------------------------
# 4. mask algebra
# ---------------------------------------------------------------------------


def coded_bits(params, q, y):
    """Mask-plane plus symbol-payload bits for fixed latents ``q`` under importance map ``y``."""
    K = params.config.K
    mask = build_mask(y, K)
    masked = saturate(Tensor(q), params.centers).data * mask.ceil_m
    cube, _ = quantize_hard(masked, params.centers, mask.counts)
    return 8 * (len(encode_mask_plane(cube.mask_counts, K)) + len(encode_symbols(cube, params.centers, params.tensors)))


def test_criterion_4_mask_algebra(toy_model, held_out):
    rng = np.random.default_rng(4)
    bad_prefix = bad_oracle = 0
    for _ in range(10_000):
        K = int(rng.integers(1, 17))
        y = rng.uniform(0, K, size=(1, 2, 2))
        y[0, 0, 0] = rng.choice([0.0, float(K), float(rng.integers(0, K + 1))])
        mask = build_mask(Tensor(y, dtype=np.float64), K)
        bad_prefix += not np.all(np.diff(mask.ceil_m, axis=0) <= 0)
        m, ceil_m = mask_loop(y, K)
        q = rng.normal(size=(K, 2, 2))
        same = np.allclose(mask.m.data, m, atol=1e-12) and np.array_equal(mask.ceil_m, ceil_m)
        same &= np.array_equal(apply_mask(Tensor(q, dtype=np.float64), mask).data, apply_mask_loop(q, ceil_m))
        bad_oracle += not same
    params = toy_model[0]
    decreases = 0
    for x in held_out[:5]:
        q, y = encode(Tensor(x), params)
        decreases += coded_bits(params, q.data, y.data * 0.5) < coded_bits(params, q.data, y.data)
    ok = bad_prefix == 0 and bad_oracle == 0 and decreases == 5
    assert record(
        4, ok, f"prefix violations {bad_prefix}/10000, oracle mismatches {bad_oracle}/10000; bpp fell on {decreases}/5 images when y was halved"
    )


# ---------------------------------------------------------------------------
# 5. quantizer oracle
# ---------------------------------------------------------------------------


def test_criterion_5_quantizer_oracle():
    rng = np.random.default_rng(5)
    q = rng.uniform(-4.0, 5.0, size=100_000)
    mids = (CENTERS[:-1].astype(np.float64) + CENTERS[1:]) / 2
    q[: 5 * len(mids)] = np.repeat(mids, 5)
    q[5 * len(mids) : 5 * len(mids) + len(CENTERS)] = CENTERS
    cube, values = quantize_hard(q.reshape(1, 1, -1), CENTERS)
    oracle = argmin_centers(q, CENTERS)
    mismatches = int(np.sum(cube.indices.ravel() != oracle))
    lower_ties = bool(np.all(nearest_center(mids, CENTERS) == np.arange(len(mids))))
    ok = mismatches == 0 and lower_ties and np.array_equal(values.ravel(), CENTERS[oracle])
    assert record(5, ok, f"{mismatches} mismatches on 1e5 scalars incl. {5 * len(mids)} exact midpoints; ties to lower index: {lower_ties}")


# ---------------------------------------------------------------------------
# 6. metric oracles
# ---------------------------------------------------------------------------


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    x = rng.random((3, 256, 256))
    self_ms = abs(ms_ssim(x, x) - 1.0)
    base = rng.uniform(0.2, 0.8, size=(3, 16, 16))
    shifted = base + np.where(rng.random(base.shape) < 0.5, 0.1, -0.1)
    psnr_gap = abs(psnr(base, shifted) - 20.0)
    y = rng.random((3, 256, 256))
    dpl_self = dpl(x, x)
    dpl_asym = abs(dpl(x, y) - dpl(y, x))
    worst_naive = 0.0
    for _ in range(10):
        a, b = correlated_pair(rng, 256)
        worst_naive = max(worst_naive, abs(ms_ssim(a, b) - naive_ms_ssim(a, b)))
    ok = self_ms < 1e-9 and psnr_gap < 1e-9 and dpl_self == 0.0 and dpl_asym < 1e-6 and worst_naive < 1e-6
    detail = (
        f"|ms_ssim(x,x)-1| {self_ms:.1e}; psnr(MSE=0.01) off by {psnr_gap:.1e} dB; dpl(x,x) {dpl_self}; "
        f"dpl asymmetry {dpl_asym:.1e}; worst naive MS-SSIM gap {worst_naive:.1e} over 10 pairs"
    )
    assert record(6, ok, detail)


# ---------------------------------------------------------------------------
# 7. desk-scale training
# ---------------------------------------------------------------------------


def test_criterion_7_desk_scale_training(toy_model, corpus, held_out):
    params, log, seconds = toy_model
    first = np.mean([r["L"] for r in log if r["epoch"] == 0])
    smoothed = np.mean([r["L"] for r in log[-10:]])
    packed, _ = code_images(params, held_out)
    bpp = float(np.mean([p.bpp for p in packed]))
    train_rate = np.mean([r["R_bpp"] for r in log if r["epoch"] == log[-1]["epoch"]])
    recon = np.concatenate([reconstruct_batch(params, corpus[i : i + 100]) for i in range(0, len(corpus), 100)])
    quality = ms_ssim(corpus, recon)
    ok = smoothed < first and abs(bpp - TARGET) <= 0.15 and quality >= 0.85
    detail = (
        f"loss {first:.4f} -> {smoothed:.4f} (last 10 steps); coded bpp {bpp:.3f} (training estimate {train_rate:.3f}, t={TARGET}); "
        f"MS-SSIM {quality:.4f} on {len(corpus)} training patches; {seconds / 60:.1f} min"
    )
    assert record(7, ok, detail)


# ---------------------------------------------------------------------------
# 8. rate-distortion monotonicity
# ---------------------------------------------------------------------------


def test_criterion_8_rd_monotonicity(corpus, held_out):
    net, w = default_feature_net()
    results = sweep_rd_points(corpus, SWEEP_BASE, SWEEP_TARGETS, CodecConfig(K=TOY_K), finetune=SWEEP_FINETUNE)
    rates, dists = [], []
    for _, params, _ in results:
        packed, recon = code_images(params, held_out)
        rates.append(float(np.mean([p.bpp for p in packed])))
        dists.append(float(np.mean([dpl(x, r, net, w) for x, r in zip(held_out, recon)])))
    ok = all(a <= b for a, b in zip(rates, rates[1:])) and all(a >= b for a, b in zip(dists, dists[1:]))
    detail = "; ".join(f"t={t}: bpp {r:.3f} dpl {d:.4f}" for t, r, d in zip(SWEEP_TARGETS, rates, dists))
    assert record(8, ok, detail)


# ---------------------------------------------------------------------------
# 9. end-to-end determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(toy_model, corpus, held_out):
    params = toy_model[0]
    identical, symbol_agreement = 0, []
    repeatable = True
    for x in held_out[:5]:
        c1 = pipeline.compress_array(x, params).data
        repeatable &= c1 == pipeline.compress_array(x, params).data
        decoded = pipeline.decompress_bytes(c1, params)
        repeatable &= np.array_equal(decoded, pipeline.decompress_bytes(c1, params))
        c2 = pipeline.compress_array(to_float(to_uint8(decoded)), params).data
        identical += c1 == c2
        _, cube1 = pipeline.decode_container(c1, params)
        _, cube2 = pipeline.decode_container(c2, params)
        both = cube1.valid() & cube2.valid()
        symbol_agreement.append(float(np.mean(cube1.indices[both] == cube2.indices[both])) if both.any() else 1.0)
    small = corpus[:120]
    cfg = TrainConfig(epochs=1)
    a, _ = train(small, cfg, CodecConfig(K=TOY_K))
    b, _ = train(small, cfg, CodecConfig(K=TOY_K))
    same_weights = a.to_bytes() == b.to_bytes()
    ok = identical == 5 and repeatable and same_weights
    detail = (
        f"second container byte-identical to the first for {identical}/5 images "
        f"(symbol agreement {min(symbol_agreement):.3f}-{max(symbol_agreement):.3f}); "
        f"repeat compress/decompress identical: {repeatable}; same-seed training bitwise equal: {same_weights}"
    )
    assert record(9, ok, detail)
