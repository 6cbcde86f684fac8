"""Low-rank factors ``B A`` with a quantized residual.

The approximation is ``What = W_q + B A`` where ``B A`` stays in full
precision and ``W_q`` is the scaled QDQ of ``W - B A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .awq import awq_quantize
from .exceptions import ShapeError
from .quantizer import QuantConfig, QuantizedTensor, dequantize_groups, quantize_groups, rtn_qdq
from .tensor_core import as_matrix, as_vector, frobenius_sq, truncated_svd


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """``B`` (d', r) and ``A`` (r, d); ``r = 0`` contributes nothing."""

    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
            raise ShapeError(f"incompatible factor shapes {B.shape} and {A.shape}")
        if A.shape[0] > min(B.shape[0], A.shape[1]):
            raise ShapeError(f"rank {A.shape[0]} exceeds min{(B.shape[0], A.shape[1])}")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(A))):
            raise ValueError("factors must be finite")
        for name, arr in (("B", B), ("A", A)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, rows: int, cols: int) -> "LowRankFactors":
        return cls(np.zeros((rows, 0)), np.zeros((0, cols)))

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.B @ self.A

    def project(self, X: np.ndarray) -> np.ndarray:
        """``B (A X)``, the cheap order for ``r << min(d, d')``."""
        return self.B @ (self.A @ X)

    def to_float32(self) -> "LowRankFactors":
        """Round both factors to float32 precision (the on-disk precision)."""
        return LowRankFactors(
            self.B.astype(np.float32).astype(np.float64),
            self.A.astype(np.float32).astype(np.float64),
        )


def _balanced(U, sigma, Vt) -> LowRankFactors:
    root = np.sqrt(sigma)
    return LowRankFactors(U * root[None, :], root[:, None] * Vt)


def pca_init(W, r: int) -> LowRankFactors:
    """Top-``r`` principal components, split as ``B = U sqrt(L)``, ``A = sqrt(L) V``."""
    W = as_matrix(W, "W")
    if not 0 <= r <= min(W.shape):
        raise ValueError(f"rank {r} out of range for shape {W.shape}")
    if r == 0:
        return LowRankFactors.empty(*W.shape)
    return _balanced(*truncated_svd(W, r))


def asvd_init(W, s, r: int) -> LowRankFactors:
    """Activation-aware SVD: factor ``W diag(s)`` then divide ``A``'s columns by ``s``.

    Optimal among rank-``r`` products in the norm ``||(W - B A) diag(s)||_F``.
    """
    W = as_matrix(W, "W")
    s = as_vector(s, "s")
    if s.size != W.shape[1]:
        raise ShapeError(f"scale has {s.size} entries for {W.shape[1]} columns")
    if not np.all(s > 0):
        raise ValueError("scale entries must be strictly positive")
    f = pca_init(W * s[None, :], r)
    return LowRankFactors(f.B, f.A / s[None, :])


def _check_factors(W: np.ndarray, f: LowRankFactors) -> None:
    if f.shape != W.shape:
        raise ShapeError(f"factors of shape {f.shape} do not match W {W.shape}")


def residual_quantize(W, f: LowRankFactors, s, config: QuantConfig) -> QuantizedTensor:
    """Scaled quantization of the residual ``W - B A`` (plain RTN when ``s`` is None)."""
    W = as_matrix(W, "W")
    _check_factors(W, f)
    R = W - f.product() if f.r else W
    if s is None:
        return quantize_groups(R, config)
    return awq_quantize(R, s, config)


def residual_qdq(W, f: LowRankFactors, s, config: QuantConfig) -> np.ndarray:
    """Dequantized residual ``W_q``; the full approximation is ``W_q + B A``."""
    return dequantize_groups(residual_quantize(W, f, s, config))


def quantize_factor_a(f: LowRankFactors, config: QuantConfig) -> LowRankFactors:
    """Replace ``A`` by its RTN QDQ, leaving ``B`` in full precision."""
    if f.r == 0:
        return f
    return LowRankFactors(f.B, rtn_qdq(f.A, config))


def alternate_refine(W, s, config: QuantConfig, r: int, K: int) -> tuple[LowRankFactors, QuantizedTensor]:
    """Alternate ``B A = svd_r[W - W_q]`` and ``W_q = Q[W - B A]``.

    Starts from PCA factors and returns the visited pair with the smallest
    ``||W - (W_q + B A)||_F`` (the alternation is not monotone).
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    W = as_matrix(W, "W")
    f = pca_init(W, r)
    qt = residual_quantize(W, f, s, config)
    Wq = dequantize_groups(qt)
    best = (frobenius_sq(W - Wq - f.product()), f, qt)
    for _ in range(K):
        f = pca_init(W - Wq, r)
        qt = residual_quantize(W, f, s, config)
        Wq = dequantize_groups(qt)
        err = frobenius_sq(W - Wq - f.product())
        if err < best[0]:
            best = (err, f, qt)
    return best[1], best[2]
