"""Groupwise weight quantization with activation-aware and test-time scaling."""

from .awq import awp_pgd, awq_qdq, awq_quantize, brute_force_codes, grid_search_hyperparams, offline_awq
from .calibration import AwqHyperparams, activation_loss, diag_scale, shrunk_correlation, weighted_loss
from .exceptions import (
    BudgetError,
    ChecksumError,
    ConvergenceError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    ShapeError,
)
from .io_formats import QuantContainer, read_container, read_tensor, write_container, write_tensor
from .lowrank import LowRankFactors, asvd_init, pca_init, residual_qdq, residual_quantize
from .quantizer import QuantConfig, QuantFormat, QuantizedTensor, dequantize_groups, quantize_groups, rtn_qdq
from .tensor_core import RandomSpec, synth_activations, synth_weights, truncated_svd
from .ttq import TtqLayerState, TtqReport, lowrank_overhead, overhead_fraction, ttq_forward

__version__ = "0.1.0"

__all__ = [
    "AwqHyperparams",
    "BudgetError",
    "ChecksumError",
    "ConvergenceError",
    "DivergenceError",
    "FormatError",
    "LowRankFactors",
    "NonFiniteError",
    "QuantConfig",
    "QuantContainer",
    "QuantFormat",
    "QuantizedTensor",
    "RandomSpec",
    "ShapeError",
    "TtqLayerState",
    "TtqReport",
    "activation_loss",
    "asvd_init",
    "awp_pgd",
    "awq_qdq",
    "awq_quantize",
    "brute_force_codes",
    "dequantize_groups",
    "diag_scale",
    "grid_search_hyperparams",
    "lowrank_overhead",
    "offline_awq",
    "overhead_fraction",
    "pca_init",
    "quantize_groups",
    "read_container",
    "read_tensor",
    "residual_qdq",
    "residual_quantize",
    "rtn_qdq",
    "shrunk_correlation",
    "synth_activations",
    "synth_weights",
    "truncated_svd",
    "ttq_forward",
    "weighted_loss",
    "write_container",
    "write_tensor",
]
