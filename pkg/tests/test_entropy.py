"""Entropy modelling and the coded bitstream."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpc.entropy.container import ContainerError, Header, ModelMismatchError, pack_container, read_container, unpack_container, write_container
from dpc.entropy.context import MASK_A, MASK_B, ContextCoder, context_logits, init_context_params, predict, rate_bits, rate_loss
from dpc.entropy.rangecoder import (
    PROB_TOTAL,
    AdaptiveModel,
    DecodeError,
    ac_decode,
    ac_encode,
    decode_mask_plane,
    encode_mask_plane,
    quantize_probs,
)
from dpc.entropy.symbols import decode_symbols, encode_symbols, scan_positions
from dpc.quantize import SymbolCube, dequantize
from dpc.tensor import Tensor

CENTERS = np.linspace(-2, 3, 6).astype(np.float32)


def random_context(rng, hidden=6, scale=0.5):
    p = init_context_params(6, hidden, rng)
    p["ctx.conv1.w"] = (rng.normal(size=p["ctx.conv1.w"].shape) * scale).astype(np.float32)
    p["ctx.conv1.b"] = (rng.normal(size=6) * scale).astype(np.float32)
    return {k: Tensor(v) for k, v in p.items()}


def random_cube(rng, K, h, w, skew=None):
    counts = rng.integers(0, K + 1, size=(h, w))
    p = skew if skew is not None else np.full(6, 1 / 6)
    return SymbolCube(rng.choice(6, size=(K, h, w), p=p), counts)


class TestCausalMasks:
    """The context model only ever sees symbols that precede the one it predicts."""

    def test_mask_sizes(self):
        assert MASK_A.sum() == 13 and MASK_B.sum() == 14
        assert MASK_A[1, 1, 1] == 0 and MASK_B[1, 1, 1] == 1

    def test_future_perturbation_has_no_effect(self, rng):
        params = random_context(rng)
        vol = rng.choice(CENTERS, size=(3, 4, 4))
        base = predict(params, vol)
        grid = lambda k, h, w: (h, w, k)
        for _ in range(20):
            k, h, w = rng.integers(0, 3), rng.integers(0, 4), rng.integers(0, 4)
            other = vol.copy()
            other[k, h, w] += 1.0
            probe = predict(params, other)
            for kk in range(3):
                for hh in range(4):
                    for ww in range(4):
                        if grid(kk, hh, ww) <= grid(k, h, w):
                            assert np.array_equal(probe[kk, hh, ww], base[kk, hh, ww])

    def test_past_perturbation_changes_prediction(self, rng):
        params = random_context(rng)
        vol = rng.choice(CENTERS, size=(3, 4, 4))
        other = vol.copy()
        other[1, 2, 2] += 2.0
        assert not np.allclose(predict(params, other)[2, 2, 2], predict(params, vol)[2, 2, 2])

    def test_fresh_model_is_uniform(self, rng):
        params = {k: Tensor(v) for k, v in init_context_params(6, 4, rng).items()}
        np.testing.assert_allclose(predict(params, rng.choice(CENTERS, size=(2, 3, 3))), 1 / 6, atol=1e-12)

    def test_distributions_normalised(self, rng):
        probs = predict(random_context(rng, scale=3.0), rng.choice(CENTERS, size=(4, 3, 5)))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_incremental_coder_matches_full_model(self, rng):
        """The per-position evaluator used for coding reproduces the dense predictor."""
        params = random_context(rng)
        cube = random_cube(rng, 4, 3, 5)
        vol = dequantize(cube, CENTERS)
        dense = predict(params, vol)
        coder = ContextCoder(params)
        padded = coder.pad(vol.transpose(1, 2, 0))
        for h, w, k in scan_positions(cube.mask_counts):
            np.testing.assert_allclose(coder.probs_at(padded, h, w, k), dense[k, h, w], atol=1e-6)


class TestRateLoss:
    """Cross-entropy rate in bits for known distributions."""

    def test_uniform_closed_form(self):
        logits = np.zeros((1, 3, 2, 2, 6))
        idx = np.zeros((1, 3, 2, 2), dtype=int)
        bits = rate_loss(logits, idx, np.ones((1, 3, 2, 2))).item()
        assert bits == pytest.approx(12 * math.log2(6), rel=1e-6)

    def test_certain_symbol_costs_nothing(self):
        logits = np.full((1, 1, 1, 1, 6), -1e4)
        logits[..., 3] = 0.0
        assert rate_loss(logits, np.full((1, 1, 1, 1), 3), np.ones((1, 1, 1, 1))).item() == pytest.approx(0.0, abs=1e-9)

    def test_fully_masked_is_zero(self, rng):
        logits = rng.normal(size=(1, 2, 2, 2, 6))
        assert rate_loss(logits, np.zeros((1, 2, 2, 2), int), np.zeros((1, 2, 2, 2))).item() == 0.0

    def test_rate_bits_matches_rate_loss(self, rng):
        params = random_context(rng)
        cube = random_cube(rng, 3, 2, 3)
        vol = dequantize(cube, CENTERS)
        loss = rate_loss(context_logits(params, Tensor(vol, dtype=np.float64)), cube.indices[None], cube.valid()[None]).item()
        assert rate_bits(predict(params, vol), cube) == pytest.approx(loss, rel=1e-5)


class TestRangeCoder:
    """Lossless coding and near-entropy cost for arbitrary distributions."""

    def test_quantize_probs_floor_and_total(self, rng):
        p = np.array([1.0, 0.0, 0.0, 1e-12, 0.0, 0.0])
        freq = quantize_probs(p)
        assert freq.sum() == PROB_TOTAL and freq.min() >= 1

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.integers(0, 5), max_size=300), st.integers(0, 2**32 - 1))
    def test_round_trip_random_models(self, symbols, seed):
        r = np.random.default_rng(seed)
        tables = r.dirichlet(np.full(6, 0.3), size=max(1, len(symbols)))
        source = lambda i, prev: tables[i]
        data = ac_encode(symbols, source)
        assert ac_decode(data, len(symbols), source) == symbols

    def test_uniform_cost_near_entropy(self, rng):
        symbols = rng.integers(0, 6, size=20000)
        data = ac_encode(symbols, lambda i, prev: np.full(6, 1 / 6))
        ideal = 20000 * math.log2(6)
        assert 8 * len(data) <= ideal * 1.01 + 64

    def test_degenerate_distribution(self, rng):
        n = 5000
        p = np.full(6, 1e-6 / 5)
        p[2] = 1 - 1e-6
        data = ac_encode([2] * n, lambda i, prev: p)
        assert 8 * len(data) / n < 0.01

    def test_adaptive_model_depends_on_history(self):
        model = AdaptiveModel(3)
        for _ in range(10):
            model.update(1)
        assert model.freq[1] == 1 + 10 * 32

    def test_truncated_payload_detected(self, rng):
        symbols = list(rng.integers(0, 6, size=2000))
        source = lambda i, prev: np.full(6, 1 / 6)
        data = ac_encode(symbols, source)
        with pytest.raises(DecodeError):
            ac_decode(data[: len(data) // 2], len(symbols), source)


class TestMaskPlane:
    """Adaptive coding of per-location channel counts."""

    def test_round_trip(self, rng):
        for K in (1, 4, 16):
            counts = rng.integers(0, K + 1, size=(5, 7))
            assert np.array_equal(decode_mask_plane(encode_mask_plane(counts, K), counts.shape, K), counts)

    def test_constant_plane_is_cheap(self):
        counts = np.full((32, 32), 5)
        assert 8 * len(encode_mask_plane(counts, 8)) / counts.size < 0.1

    def test_k_zero(self):
        assert encode_mask_plane(np.zeros((2, 2), int), 0) == b""
        np.testing.assert_array_equal(decode_mask_plane(b"", (2, 2), 0), 0)

    def test_out_of_range_count(self):
        with pytest.raises(ValueError):
            encode_mask_plane(np.array([[9]]), 8)


class TestSymbolCoding:
    """Symbol volumes coded under the context model."""

    def test_round_trip_with_masks(self, rng):
        params = random_context(rng)
        for _ in range(10):
            cube = random_cube(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            data = encode_symbols(cube, CENTERS, params)
            back = decode_symbols(data, cube.mask_counts, cube.shape[0], CENTERS, params)
            valid = cube.valid()
            np.testing.assert_array_equal(back.indices[valid], cube.indices[valid])

    def test_cost_tracks_rate_bits(self, rng):
        params = random_context(rng, scale=0.05)
        cube = random_cube(rng, 6, 6, 6, skew=np.array([0.5, 0.2, 0.1, 0.1, 0.05, 0.05]))
        probs = predict(params, dequantize(cube, CENTERS))
        true_p = np.take_along_axis(probs, cube.indices[..., None], axis=-1)[..., 0][cube.valid()]
        assert true_p.min() > 1e-3  # far above the coder's probability floor
        bits = 8 * len(encode_symbols(cube, CENTERS, params))
        ideal = rate_bits(probs, cube)
        assert abs(bits - ideal) <= 0.02 * ideal + 64

    def test_probability_floor_caps_cost(self):
        """A symbol the model calls impossible still codes, at about 16 bits."""
        p = np.array([1.0, 0, 0, 0, 0, 0])
        data = ac_encode([3] * 100, lambda i, prev: p)
        assert ac_decode(data, 100, lambda i, prev: p) == [3] * 100
        assert 8 * len(data) <= 100 * 16.1 + 64


def _header(**kw):
    base = dict(orig_width=13, orig_height=5, padded_width=16, padded_height=8, K=4, centers=CENTERS, model_hash=b"\x01" * 8)
    base.update(kw)
    return Header(**base)


class TestContainer:
    """Byte layout and validation of the compressed container."""

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "x.dpc"
        write_container(path, _header(), b"mask", b"payload")
        header, mask, payload = read_container(path)
        assert header == _header() and mask == b"mask" and payload == b"payload"

    def test_wrong_magic_names_both(self):
        data = b"XXXX" + pack_container(_header(), b"", b"")[4:]
        with pytest.raises(ContainerError, match="DPC1.*XXXX"):
            unpack_container(data)

    def test_truncated(self):
        data = pack_container(_header(), b"mm", b"pppp")
        for cut in (3, 20, len(data) - 1):
            with pytest.raises(ContainerError):
                unpack_container(data[:cut])

    def test_hash_mismatch_refused_then_forced(self):
        data = pack_container(_header(), b"", b"")
        with pytest.raises(ModelMismatchError):
            unpack_container(data, model_hash=b"\x02" * 8)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            header, _, _ = unpack_container(data, model_hash=b"\x02" * 8, force=True)
        assert header.K == 4 and len(caught) == 1

    def test_little_endian_layout(self):
        data = pack_container(_header(), b"", b"")
        assert data[:4] == b"DPC1"
        assert int.from_bytes(data[4:6], "little") == 1
        assert int.from_bytes(data[6:10], "little") == 13
        assert int.from_bytes(data[10:14], "little") == 5
