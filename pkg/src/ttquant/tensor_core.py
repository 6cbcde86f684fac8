"""Dense matrix helpers, truncated SVD and deterministic synthetic data.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here validate shape/finiteness once at the boundary so the numerical code
downstream can stay simple.

Synthetic data uses numpy's ``Generator`` on top of the PCG64 bit generator
(O'Neill's permuted congruential generator, 128-bit state). Draw order is
fixed and documented in :func:`synth_activations` so a seed always maps to the
same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .exceptions import ConvergenceError, NonFiniteError, ShapeError

SVD_TOL = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array (copying only if needed)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def row_lp_norms(X, p: float) -> np.ndarray:
    """Per-row l_p norms ``(sum_t |X[i, t]|^p)^(1/p)``.

    Rows are rescaled by their max magnitude first so large ``p`` does not
    overflow.
    """
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    X = as_matrix(X, "X")
    absx = np.abs(X)
    peak = absx.max(axis=1)
    safe = np.where(peak > 0, peak, 1.0)
    ratio = absx / safe[:, None]
    if p == 2:
        inner = np.sqrt(np.einsum("ij,ij->i", ratio, ratio))
    elif p == 1:
        inner = ratio.sum(axis=1)
    else:
        inner = np.power(np.power(ratio, p).sum(axis=1), 1.0 / p)
    return np.where(peak > 0, inner * peak, 0.0)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def frobenius_sq(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.einsum("ij,ij->", x, x)) if x.ndim == 2 else float(x @ x)


# ---------------------------------------------------------------------------
# Truncated SVD
# ---------------------------------------------------------------------------


def _fix_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each left vector made positive.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def _complete_basis(Q: np.ndarray, k: int) -> np.ndarray:
    """Extend the orthonormal columns ``Q[:, :k]`` to a full orthonormal set."""
    m, n = Q.shape
    out = Q.copy()
    cand = 0
    for col in range(k, n):
        while True:
            v = np.zeros(m)
            v[cand % m] = 1.0
            cand += 1
            for _ in range(2):
                v -= out[:, :col] @ (out[:, :col].T @ v)
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                out[:, col] = v / nv
                break
    return out


def jacobi_svd(W, tol: float = SVD_TOL, max_sweeps: int | None = None):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, sigma, Vt)`` with ``sigma`` descending. Sweeps stop once
    every column pair has normalized inner product below ``tol``; the cap
    defaults to ``100 * min(rows, cols)`` sweeps.
    """
    W = as_matrix(W, "W")
    transposed = W.shape[0] < W.shape[1]
    A = (W.T if transposed else W).copy()
    m, n = A.shape
    if max_sweeps is None:
        max_sweeps = 100 * n
    V = np.eye(n)

    converged = False
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = A[:, i], A[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if alpha == 0.0 or beta == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, rel)
                if rel < tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                A[:, [i, j]] = np.column_stack((c * ai - s * aj, s * ai + c * aj))
                vi, vj = V[:, i].copy(), V[:, j].copy()
                V[:, i] = c * vi - s * vj
                V[:, j] = s * vi + c * vj
        if off < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    A = A[:, order]
    V = V[:, order]
    nonzero = int(np.sum(sigma > sigma[0] * 1e-15)) if sigma[0] > 0 else 0
    U = np.zeros_like(A)
    U[:, :nonzero] = A[:, :nonzero] / sigma[:nonzero]
    if nonzero < n:
        U = _complete_basis(U, nonzero)
        sigma[nonzero:] = 0.0
    if transposed:
        U, V = V, U
    return U, sigma, V.T


def truncated_svd(W, r: int, method: Literal["lapack", "jacobi"] = "lapack"):
    """Rank-``r`` truncated SVD ``W ~= U_r diag(sigma_r) V_r``.

    Args:
        W: (d', d) matrix.
        r: rank, ``1 <= r <= min(d', d)``.
        method: ``"lapack"`` (numpy/LAPACK divide-and-conquer) or ``"jacobi"``
            (pure-numpy one-sided Jacobi, slower but self-contained).

    Returns:
        ``(U_r, sigma_r, V_r)`` of shapes (d', r), (r,), (r, d).

    Raises:
        ValueError: ``r`` out of range.
        ConvergenceError: the decomposition did not converge.
    """
    W = as_matrix(W, "W")
    if not 1 <= r <= min(W.shape):
        raise ValueError(f"rank {r} out of range for shape {W.shape}")
    if method == "lapack":
        try:
            U, sigma, Vt = np.linalg.svd(W, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"LAPACK SVD failed: {exc}") from exc
    elif method == "jacobi":
        U, sigma, Vt = jacobi_svd(W)
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    U, Vt = _fix_signs(U[:, :r], Vt[:r])
    return U, sigma[:r].copy(), Vt


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomSpec:
    """Recipe for a synthetic activation matrix (rows = channels)."""

    seed: int
    channel_scale_sigma: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.channel_scale_sigma < 0:
            raise ValueError("channel_scale_sigma must be nonnegative")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def channel_scales(spec: RandomSpec) -> np.ndarray:
    """The lognormal per-channel scales ``exp(sigma * z_i)`` used by ``spec``."""
    z = _generator(spec.seed).standard_normal(spec.rows)
    return np.exp(spec.channel_scale_sigma * z)


def synth_activations(spec: RandomSpec) -> np.ndarray:
    """Heavy-tailed activations ``X`` of shape (rows, cols).

    Draw order from a fresh PCG64 stream seeded with ``spec.seed``:
    ``rows`` standard normals ``z`` for the channel scales, then
    ``rows * cols`` standard normals filled row-major. Row ``i`` is scaled by
    ``exp(sigma * z_i)``.
    """
    rng = _generator(spec.seed)
    z = rng.standard_normal(spec.rows)
    X = rng.standard_normal((spec.rows, spec.cols))
    return X * np.exp(spec.channel_scale_sigma * z)[:, None]


def synth_weights(seed: int, rows: int, cols: int) -> np.ndarray:
    """Gaussian weights with variance ``1/cols`` (fan-in initialization)."""
    return _generator(seed).standard_normal((rows, cols)) / np.sqrt(cols)
