"""Activation statistics and activation-aware losses.

``X`` is always (d, T): channels by tokens. Losses are sums over all outputs
and tokens, not token averages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .exceptions import ShapeError
from .tensor_core import as_matrix, frobenius_sq, row_lp_norms


@dataclass(frozen=True)
class AwqHyperparams:
    """Norm exponent ``alpha``, damping ``lam`` added to the norms, norm order ``p``."""

    alpha: float = 0.5
    lam: float = 0.4
    p: float = 2.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.p > 0:
            raise ValueError(f"p must be > 0, got {self.p}")


@dataclass(frozen=True, eq=False)
class CorrelationEstimate:
    """Shrunk correlation ``(1 - lam) X X^T + lam * eta * I`` (full or diagonal)."""

    kind: Literal["full", "diagonal"]
    values: np.ndarray
    lam: float
    eta: float

    @property
    def damping(self) -> float:
        """Equivalent damping ``lam * eta / (1 - lam)`` added to raw ``X X^T``."""
        if self.lam >= 1.0:
            return float("inf")
        return self.lam * self.eta / (1.0 - self.lam)

    def as_matrix(self) -> np.ndarray:
        return self.values if self.kind == "full" else np.diag(self.values)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"shrinkage lambda must lie in [0, 1], got {lam}")


def energy_per_channel(X) -> float:
    """``eta = ||X||_F^2 / d``."""
    X = as_matrix(X, "X")
    return frobenius_sq(X) / X.shape[0]


def shrunk_correlation(X, lam: float) -> CorrelationEstimate:
    _check_lambda(lam)
    X = as_matrix(X, "X")
    eta = energy_per_channel(X)
    C = (1.0 - lam) * (X @ X.T)
    C[np.diag_indices_from(C)] += lam * eta
    # exact symmetry despite summation order
    C = 0.5 * (C + C.T)
    return CorrelationEstimate("full", C, float(lam), eta)


def shrunk_diagonal(X, lam: float) -> CorrelationEstimate:
    """Diagonal of :func:`shrunk_correlation` without forming ``X X^T``."""
    _check_lambda(lam)
    X = as_matrix(X, "X")
    eta = energy_per_channel(X)
    diag = (1.0 - lam) * np.einsum("ij,ij->i", X, X) + lam * eta
    return CorrelationEstimate("diagonal", diag, float(lam), eta)


def diag_scale(X, hp: AwqHyperparams = AwqHyperparams()) -> np.ndarray:
    """Per-channel scale ``s_i = (||X_i,:||_p + lam) ** alpha``.

    The norm is not squared; ``alpha`` absorbs the square.
    """
    norms = row_lp_norms(X, hp.p)
    base = norms + hp.lam
    if hp.alpha < 0 and np.any(base == 0):
        raise ValueError("zero activation row with lam=0 and negative alpha gives an infinite scale")
    return np.power(base, hp.alpha)


def _check_shapes(W, What, X):
    W = as_matrix(W, "W")
    What = as_matrix(What, "What")
    X = as_matrix(X, "X")
    if W.shape != What.shape:
        raise ShapeError(f"W {W.shape} and What {What.shape} differ")
    if W.shape[1] != X.shape[0]:
        raise ShapeError(f"W has {W.shape[1]} columns but X has {X.shape[0]} rows")
    return W, What, X


def activation_loss(W, What, X) -> float:
    """``||(W - What) X||_F^2``."""
    W, What, X = _check_shapes(W, What, X)
    return frobenius_sq((W - What) @ X)


def weighted_loss(W, What, X, lam: float) -> float:
    """``(1 - lam) ||(W - What) X||^2 + lam * eta * ||W - What||^2``."""
    _check_lambda(lam)
    W, What, X = _check_shapes(W, What, X)
    E = W - What
    act = frobenius_sq(E @ X) if lam < 1.0 else 0.0
    wt = frobenius_sq(E) if lam > 0.0 else 0.0
    return (1.0 - lam) * act + lam * energy_per_channel(X) * wt


def correlation_loss(W, What, C: CorrelationEstimate) -> float:
    """``tr[(W - What) C (W - What)^T]`` for a precomputed correlation."""
    E = as_matrix(W, "W") - as_matrix(What, "What")
    if C.kind == "full":
        return float(np.einsum("ij,ij->", E @ C.values, E))
    return float(np.einsum("ij,j,ij->", E, C.values, E))
