"""Entropy modelling of quantized latents and the compressed container format."""

from .container import ContainerError, Header, ModelMismatchError, read_container, write_container
from .context import ContextCoder, context_logits, predict, rate_bits, rate_loss
from .rangecoder import (
    DecodeError,
    ac_decode,
    ac_encode,
    decode_mask_plane,
    encode_mask_plane,
    quantize_probs,
)
from .symbols import decode_symbols, encode_symbols

__all__ = [
    "ContainerError",
    "ContextCoder",
    "DecodeError",
    "Header",
    "ModelMismatchError",
    "ac_decode",
    "ac_encode",
    "context_logits",
    "decode_mask_plane",
    "decode_symbols",
    "encode_mask_plane",
    "encode_symbols",
    "predict",
    "quantize_probs",
    "rate_bits",
    "rate_loss",
    "read_container",
    "write_container",
]
