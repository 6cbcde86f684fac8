"""Test-time quantization of a single linear layer.

Every forward call recomputes the per-channel scale from the incoming
activations, re-quantizes the residual ``W - B A`` against it and projects.
Full-precision weights stay on the layer, so nothing calibrated offline is
baked in.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .calibration import AwqHyperparams, diag_scale, weighted_loss
from .exceptions import ShapeError
from .lowrank import LowRankFactors, residual_quantize
from .quantizer import QuantConfig, dequantize_groups
from .tensor_core import as_matrix, row_lp_norms

# T at or above which overhead_fraction reports its T -> infinity limit.
ASYMPTOTIC_T = 1e9


@dataclass(frozen=True, eq=False)
class TtqLayerState:
    """Immutable layer: weights, static factors, grid config and hyperparameters."""

    W: np.ndarray
    factors: LowRankFactors | None = None
    config: QuantConfig = field(default_factory=QuantConfig)
    hp: AwqHyperparams = field(default_factory=AwqHyperparams)
    name: str = "layer"

    def __post_init__(self):
        W = as_matrix(self.W, "W").copy()
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        factors = self.factors if self.factors is not None else LowRankFactors.empty(*W.shape)
        if factors.shape != W.shape:
            raise ShapeError(f"factors of shape {factors.shape} do not match W {W.shape}")
        object.__setattr__(self, "factors", factors)
        self.config.check_divisible(W.size)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True, eq=False)
class TtqReport:
    layer: str
    T: int
    scale: np.ndarray
    loss: float
    rho: float
    codes_checksum: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer": self.layer,
                "T": self.T,
                "loss": self.loss,
                "rho": self.rho,
                "codes_checksum": self.codes_checksum,
            }
        )


class EmaNormTracker:
    """Running average of per-channel norms for decode streams.

    Off by default; pass an instance to :func:`ttq_forward` to smooth the
    scale over successive calls. ``m <- decay * m + (1 - decay) * norms``.
    """

    def __init__(self, decay: float = 0.9):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self._norms: np.ndarray | None = None
        self._lock = threading.Lock()

    def update(self, X: np.ndarray, p: float) -> np.ndarray:
        norms = row_lp_norms(X, p)
        with self._lock:
            if self._norms is None:
                self._norms = norms
            else:
                self._norms = self.decay * self._norms + (1.0 - self.decay) * norms
            return self._norms.copy()

    def reset(self) -> None:
        with self._lock:
            self._norms = None


def online_scale(X, hp: AwqHyperparams, tracker: EmaNormTracker | None = None) -> np.ndarray:
    if tracker is None:
        return diag_scale(X, hp)
    return np.power(tracker.update(X, hp.p) + hp.lam, hp.alpha)


def ttq_forward(
    state: TtqLayerState,
    X,
    tracker: EmaNormTracker | None = None,
    loss_lambda: float = 0.0,
) -> tuple[np.ndarray, TtqReport]:
    """Quantize against ``X`` on the fly and return ``Y = W_q X + B (A X)``.

    Args:
        state: the layer.
        X: (d, T) activations for this call, ``T >= 1``.
        tracker: optional EMA of channel norms across calls.
        loss_lambda: shrinkage of the weighted loss put in the report; the
            default 0 reports the plain activation loss.

    Returns:
        ``(Y, report)``.
    """
    X = as_matrix(X, "X")
    if X.shape[0] != state.d_in:
        raise ShapeError(f"X has {X.shape[0]} channels, layer expects {state.d_in}")
    s = online_scale(X, state.hp, tracker)
    if not np.all(s > 0):
        raise ValueError("activation scale has zero entries (zero activation row with lam=0)")
    qt = residual_quantize(state.W, state.factors, s, state.config)
    Wq = dequantize_groups(qt)
    f = state.factors
    Y = Wq @ X
    if f.r:
        Y = Y + f.project(X)
        What = Wq + f.product()
    else:
        What = Wq
    T = X.shape[1]
    report = TtqReport(
        layer=state.name,
        T=T,
        scale=s,
        loss=weighted_loss(state.W, What, X, loss_lambda),
        rho=overhead_fraction(state.d_in, state.d_out, T),
        codes_checksum=qt.checksum(),
    )
    return Y, report


def ttq_weights(state: TtqLayerState, X) -> np.ndarray:
    """The effective ``W_q + B A`` the layer would use for ``X``."""
    s = online_scale(as_matrix(X, "X"), state.hp)
    Wq = dequantize_groups(residual_quantize(state.W, state.factors, s, state.config))
    return Wq + state.factors.product() if state.factors.r else Wq


def overhead_fraction(d: float, d_prime: float, T: float) -> float:
    """Online-quantization cost relative to the projection: ``(dT + 3d'd) / (d'dT)``."""
    if d <= 0 or d_prime <= 0 or T <= 0:
        raise ValueError("d, d_prime and T must be positive")
    if T >= ASYMPTOTIC_T:
        return 1.0 / d_prime
    return (d * T + 3.0 * d_prime * d) / (d_prime * d * T)


def lowrank_overhead(d: float, d_prime: float, r: float) -> float:
    """Relative extra cost ``r/d + r/d'`` of the low-rank projection."""
    if d <= 0 or d_prime <= 0 or r < 0:
        raise ValueError("d and d_prime must be positive and r nonnegative")
    if r > min(d, d_prime):
        raise ValueError("r must not exceed min(d, d_prime)")
    return r / d + r / d_prime

