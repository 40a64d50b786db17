"""MXFP4 training simulation: codec, quantized linear layer, oscillation tools."""

from .codec import (
    MxBlock,
    MxScale,
    Rounding,
    ScaleRule,
    compute_scale,
    dequantize_block,
    deserialize_block,
    quantize_block,
    serialize_block,
)
from .formats import E2M1, E3M0, Fp4Format, get_format
from .kernels import BACKEND
from .mx_linear import Axis, LinearQuantConfig, QuantizedMatrix, QuantizerMask, dequantize_matrix, quantize_matrix
from .rng import StreamKey

__version__ = "0.1.0"
