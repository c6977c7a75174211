"""Transformer encoder with contextual block processing for streaming input."""

from .encoder import (
    EncoderConfig,
    StreamingEncoder,
    encode,
    encode_batch,
    encode_masked_block,
    encode_streaming,
    init_params,
)

__all__ = [
    "EncoderConfig", "StreamingEncoder", "encode", "encode_batch",
    "encode_masked_block", "encode_streaming", "init_params",
]
__version__ = "0.1.0"
