"""Activation-aware quantization.

* :func:`awq_qdq` -- scaled QDQ: multiply column ``j`` by ``s_j``, quantize,
  divide back.
* :func:`offline_awq` -- scale estimated once from calibration activations.
* :func:`awp_pgd` -- projected gradient descent on the full-correlation loss,
  used as a reference solver.
* :func:`brute_force_codes` -- exhaustive code search, the oracle for the
  claim that scaled rounding is optimal under a diagonal correlation.
* :func:`grid_search_hyperparams` -- exhaustive search over (alpha, lam, p).
"""

from __future__ import annotations

import functools
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .calibration import AwqHyperparams, CorrelationEstimate, correlation_loss, diag_scale, weighted_loss
from .exceptions import BudgetError, DivergenceError, ShapeError
from .quantizer import QuantConfig, QuantizedTensor, dequantize_groups, quantize_groups, round_half_away
from .tensor_core import as_matrix, as_vector

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_LAMBDAS = (0.01, 0.1, 0.4, 0.7)
DEFAULT_PS = (1.0, 2.0, 4.0)
# Shrinkage used when scoring grid points with the weighted loss.
GRID_LOSS_LAMBDA = 0.01
BRUTE_FORCE_BUDGET = 1 << 16


def _check_scale(s, cols: int) -> np.ndarray:
    s = as_vector(s, "s")
    if s.size != cols:
        raise ShapeError(f"scale has {s.size} entries for {cols} columns")
    if not np.all(s > 0):
        raise ValueError("scale entries must be strictly positive")
    return s


def awq_quantize(W, s, config: QuantConfig) -> QuantizedTensor:
    """Quantize ``W * s[None, :]``; the result carries the scale for dequantization.

    ``s`` is divided by its maximum first. QDQ is equivariant to a global
    positive factor, so this changes nothing mathematically, but it makes a
    uniform ``s`` exactly 1 and therefore bit-identical to RTN.
    """
    W = as_matrix(W, "W")
    s = _check_scale(s, W.shape[1])
    return quantize_groups(W, config, col_scale=s / s.max())


def awq_qdq(W, s, config: QuantConfig) -> np.ndarray:
    """Scaled QDQ ``rtn_qdq(W * s) / s`` with column-wise ``s``."""
    return dequantize_groups(awq_quantize(W, s, config))


def offline_awq(W, X_calib, hp: AwqHyperparams, config: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Calibrate the scale on ``X_calib`` once and quantize.

    Returns ``(What, s)``; ``s`` is kept so it can be reused on other data.
    """
    s = diag_scale(X_calib, hp)
    return awq_qdq(W, s, config), s


# ---------------------------------------------------------------------------
# AWP: projected gradient descent
# ---------------------------------------------------------------------------


def power_iteration_lmax(C: np.ndarray, steps: int = 20) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    v = np.ones(C.shape[0]) / np.sqrt(C.shape[0])
    lam = 0.0
    for _ in range(steps):
        w = C @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = float(v @ C @ v)
    return lam


@dataclass(frozen=True, eq=False)
class AwpResult:
    best: np.ndarray
    best_quantized: QuantizedTensor
    final: np.ndarray
    losses: list[float]
    best_iter: int


def awp_pgd(
    W,
    C: CorrelationEstimate,
    config: QuantConfig,
    mu: float | None = None,
    K: int = 50,
    full_output: bool = False,
):
    """Projected gradient descent ``W_{k+1} = Q[W_k + mu (W - W_k) C]``.

    Starts from RTN and keeps the best iterate seen, since the quantization
    projection makes the iteration non-monotone.

    Args:
        W: (d', d) weights.
        C: full correlation estimate, (d, d).
        config: quantization grid used by the projection.
        mu: stepsize; defaults to ``1 / lambda_max(C)`` (20 power steps).
        K: number of iterations.
        full_output: return an :class:`AwpResult` instead of the best iterate.

    Raises:
        DivergenceError: loss exceeded ``1e6`` times the initial loss.
    """
    if C.kind != "full":
        raise ValueError("awp_pgd needs a full correlation estimate")
    W = as_matrix(W, "W")
    Cm = C.values
    if Cm.shape != (W.shape[1], W.shape[1]):
        raise ShapeError(f"correlation {Cm.shape} does not match W {W.shape}")
    if K < 0:
        raise ValueError("K must be nonnegative")
    if mu is None:
        lmax = power_iteration_lmax(Cm)
        mu = 1.0 / lmax if lmax > 0 else 1.0
    if not mu > 0:
        raise ValueError(f"stepsize must be positive, got {mu}")

    qt = quantize_groups(W, config)
    current = dequantize_groups(qt)
    initial = correlation_loss(W, current, C)
    losses = [initial]
    best, best_qt, best_loss, best_iter = current, qt, initial, 0
    for k in range(1, K + 1):
        if best_loss == 0.0:
            break
        qt = quantize_groups(current + mu * ((W - current) @ Cm), config)
        current = dequantize_groups(qt)
        loss = correlation_loss(W, current, C)
        losses.append(loss)
        if loss > 1e6 * initial:
            raise DivergenceError(f"AWP diverged at step {k}: loss {loss:.3e} vs initial {initial:.3e}")
        if loss < best_loss:
            best, best_qt, best_loss, best_iter = current, qt, loss, k
    if full_output:
        return AwpResult(best=best, best_quantized=best_qt, final=current, losses=losses, best_iter=best_iter)
    return best


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _code_grid(g: int, q: int) -> np.ndarray:
    # rows in lexicographic order, first element most significant
    grid = np.array(list(itertools.product(range(1 << q), repeat=g)), dtype=np.int64).reshape(-1, g)
    grid.setflags(write=False)
    return grid


def brute_force_codes(w_group, s_group, S: float, Z: float, q: int) -> np.ndarray:
    """Codes minimizing ``sum_i s_i^2 (w_i - (c_i S + Z))^2`` by enumeration.

    Ties resolve to the lexicographically smallest code tuple. Limited to
    ``g * q <= 16``.
    """
    w = as_vector(w_group, "w_group")
    s = as_vector(s_group, "s_group")
    if w.size != s.size:
        raise ShapeError("w_group and s_group differ in length")
    g = w.size
    if g * q > 16:
        raise BudgetError(f"2^{g * q} code tuples exceed the budget of {BRUTE_FORCE_BUDGET}")
    grid = _code_grid(g, q)
    recon = grid * S + Z
    cost = ((w[None, :] - recon) ** 2 * (s**2)[None, :]).sum(axis=1)
    return grid[int(np.argmin(cost))]


def rounded_codes(w_group, S: float, Z: float, q: int) -> np.ndarray:
    """Elementwise nearest grid codes, the closed form the oracle checks."""
    w = as_vector(w_group, "w_group")
    return np.clip(round_half_away((w - Z) / S), 0, (1 << q) - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# Hyperparameter grid search
# ---------------------------------------------------------------------------


class GridRow(NamedTuple):
    alpha: float
    lam: float
    p: float
    loss: float


def _tie_key(row: GridRow):
    return (row.loss, row.alpha, row.lam, abs(row.p - 2.0))


def grid_search_hyperparams(
    W,
    X,
    config: QuantConfig,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    lams: Sequence[float] = DEFAULT_LAMBDAS,
    ps: Sequence[float] = DEFAULT_PS,
    loss_lambda: float = GRID_LOSS_LAMBDA,
    workers: int = 1,
) -> tuple[AwqHyperparams, list[GridRow]]:
    """Score :func:`offline_awq` at every grid point.

    Each point is scored by ``weighted_loss(W, What, X, loss_lambda)`` with
    ``X`` used both to calibrate and to evaluate. Ties go to smaller alpha,
    then smaller lam, then ``p`` closer to 2.

    Returns:
        ``(best, table)`` with ``table`` in grid order (alpha slowest).
    """
    if not alphas or not lams or not ps:
        raise ValueError("grids must be nonempty")
    W = as_matrix(W, "W")
    X = as_matrix(X, "X")
    points = list(itertools.product(alphas, lams, ps))

    def evaluate(point):
        alpha, lam, p = point
        hp = AwqHyperparams(float(alpha), float(lam), float(p))
        What, _ = offline_awq(W, X, hp, config)
        return GridRow(hp.alpha, hp.lam, hp.p, weighted_loss(W, What, X, loss_lambda))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(evaluate, points))
    else:
        table = [evaluate(pt) for pt in points]
    best = min(table, key=_tie_key)
    return AwqHyperparams(best.alpha, best.lam, best.p), table


def top_k(table: Sequence[GridRow], k: int = 5) -> list[GridRow]:
    return sorted(table, key=_tie_key)[:k]
