"""Pairwise rotation quantization: scaled Givens-rotation transforms for low-bit weight quantization."""

from .quantizer import QuantSpec, QuantizedTensor, dequantize_matrix, quantize_matrix
from .tensor_store import FormatError, Rng, load_tensors, save_tensors
from .transform import (
    TransformBundle,
    apply_bundle_to_weights,
    apply_inverse_to_activations,
    make_bundle,
    select_pairs,
)

__version__ = "0.1.0"
