"""Two-stream FSQ tokenizer for scientific fields, with a numpy autodiff backend."""

from .model import ModelConfig, TokenizedSample, Tokenizer, build_model
from .quantizers import (
    AMPLITUDE_SPEC,
    MORPHOLOGY_SPEC,
    QuantizerSpec,
    TokenGrid,
    fsq_dequantize,
    fsq_quantize,
    read_tokens,
    write_tokens,
)

__all__ = [
    "AMPLITUDE_SPEC",
    "MORPHOLOGY_SPEC",
    "ModelConfig",
    "QuantizerSpec",
    "TokenGrid",
    "TokenizedSample",
    "Tokenizer",
    "build_model",
    "fsq_dequantize",
    "fsq_quantize",
    "read_tokens",
    "write_tokens",
]
