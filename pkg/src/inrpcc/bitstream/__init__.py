"""Weight quantization, context-adaptive binary arithmetic coding and the ``.pico`` container."""

from inrpcc.bitstream.cabac import (
    decode_cube_map,
    encode_cube_map,
    entropy_decode,
    entropy_encode,
)
from inrpcc.bitstream.container import ParsedStream, StreamHeader, pack, unpack
from inrpcc.bitstream.quant import QuantizedParams, QuantizedTensor, dequantize, quantize

__all__ = [
    "ParsedStream",
    "QuantizedParams",
    "QuantizedTensor",
    "StreamHeader",
    "decode_cube_map",
    "dequantize",
    "encode_cube_map",
    "entropy_decode",
    "entropy_encode",
    "pack",
    "quantize",
    "unpack",
]
