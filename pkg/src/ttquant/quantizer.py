"""Groupwise quantization-dequantization and code packing.

Weights are flattened row-major and cut into consecutive groups of ``g``
values; each group gets its own scale ``S`` and zero-point ``Z``. Three
grid formats are supported:

* ``asymmetric``: ``S = (W'max - W'min) / (2^q - 1)``, ``Z = W'min``, where
  ``W'max/W'min`` is the min-max range widened or narrowed by ``nu``.
* ``symmetric``: ``S = 2 |W|max / (2^q - 1)``, ``Z = -|W|max``.
* ``alt_integer_zero``: codes ``round(w / S) + Z'`` with an integer
  zero-point ``Z'``, dequantized as ``(code - Z') * S``.

Scales and zero-points are rounded to float32 at quantization time (that is
the on-disk precision) and codes are computed against the rounded values, so
an in-memory :class:`QuantizedTensor` and one read back from disk dequantize
identically.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError, ShapeError
from .tensor_core import as_matrix, as_vector


class QuantFormat(str, enum.Enum):
    ASYMMETRIC = "asymmetric"
    SYMMETRIC = "symmetric"
    ALT_INTEGER_ZERO = "alt_integer_zero"

    @property
    def code(self) -> int:
        return _FORMAT_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "QuantFormat":
        for fmt, c in _FORMAT_CODES.items():
            if c == code:
                return fmt
        raise FormatError(f"unknown format code {code}")


_FORMAT_CODES = {
    QuantFormat.ASYMMETRIC: 0,
    QuantFormat.SYMMETRIC: 1,
    QuantFormat.ALT_INTEGER_ZERO: 2,
}


@dataclass(frozen=True)
class QuantConfig:
    """Bits ``q``, groupsize ``g``, grid format and expansion factor ``nu``."""

    q: int = 4
    g: int = 32
    format: QuantFormat = QuantFormat.ASYMMETRIC
    nu: float = 1.0

    def __post_init__(self):
        if not isinstance(self.q, (int, np.integer)) or not 1 <= self.q <= 8:
            raise ValueError(f"q must be an integer in 1..8, got {self.q!r}")
        if not isinstance(self.g, (int, np.integer)) or self.g < 1:
            raise ValueError(f"g must be a positive integer, got {self.g!r}")
        object.__setattr__(self, "format", QuantFormat(self.format))
        if not 0.0 < self.nu <= 2.0:
            raise ValueError(f"nu must lie in (0, 2], got {self.nu}")

    @property
    def levels(self) -> int:
        """Largest code value, ``2^q - 1``."""
        return (1 << self.q) - 1

    def check_divisible(self, n: int) -> None:
        if n % self.g:
            raise ShapeError(f"{n} weights are not divisible by groupsize {self.g}")


# ---------------------------------------------------------------------------
# Rounding and packing
# ---------------------------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (unlike ``np.round``)."""
    x = np.asarray(x, dtype=np.float64)
    f = np.floor(x)
    d = x - f
    up = (d > 0.5) | ((d == 0.5) & (x >= 0))
    return f + up


def pack_codes(codes, q: int) -> bytes:
    """Pack ``q``-bit codes LSB-first, contiguous across byte boundaries.

    >>> pack_codes([1, 2], 4).hex()
    '21'
    """
    if not 1 <= q <= 8:
        raise ValueError(f"q must be in 1..8, got {q}")
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << q)):
        raise ValueError(f"codes must lie in [0, {1 << q})")
    if q == 8:
        return codes.astype(np.uint8).tobytes()
    bits = ((codes[:, None] >> np.arange(q)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, q: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; ``data`` must be exactly the packed length."""
    if not 1 <= q <= 8:
        raise ValueError(f"q must be in 1..8, got {q}")
    expected = packed_length(count, q)
    if len(data) != expected:
        raise FormatError(f"packed code length {len(data)} != expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if q == 8:
        return raw.copy()
    bits = np.unpackbits(raw, bitorder="little")[: count * q].reshape(count, q)
    return (bits.astype(np.uint16) << np.arange(q, dtype=np.uint16)).sum(axis=1).astype(np.uint8)


def packed_length(count: int, q: int) -> int:
    return (count * q + 7) // 8


def codes_checksum(data: bytes) -> int:
    """64-bit BLAKE2b digest of packed codes, as an unsigned int."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# Quantized tensor
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Packed codes plus per-group scale/zero-point for a (rows, cols) matrix.

    ``col_scale`` is set when the codes quantize ``W * col_scale[None, :]``
    (activation-aware scaling); dequantization then divides it back out.
    """

    rows: int
    cols: int
    config: QuantConfig
    codes: bytes
    scales: np.ndarray
    zeros: np.ndarray
    col_scale: np.ndarray | None = None
    _unpacked: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.rows * self.cols
        if self.rows < 1 or self.cols < 1:
            raise ShapeError("rows and cols must be positive")
        self.config.check_divisible(n)
        ngroups = n // self.config.g
        codes = bytes(self.codes)
        object.__setattr__(self, "codes", codes)
        # unpack_codes checks the pack length
        unpacked = unpack_codes(codes, self.config.q, n)
        object.__setattr__(self, "_unpacked", _frozen(unpacked))

        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if self.config.format is QuantFormat.ALT_INTEGER_ZERO:
            zeros = np.asarray(self.zeros, dtype=np.int64).reshape(-1)
        else:
            zeros = np.asarray(self.zeros, dtype=np.float64).reshape(-1)
        if scales.size != ngroups or zeros.size != ngroups:
            raise FormatError(f"expected {ngroups} scales/zeros, got {scales.size}/{zeros.size}")
        if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise FormatError("scales must be finite and strictly positive")
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "zeros", _frozen(zeros))
        if self.col_scale is not None:
            cs = as_vector(self.col_scale, "col_scale")
            if cs.size != self.cols or not np.all(cs > 0):
                raise FormatError("col_scale must hold one positive entry per column")
            object.__setattr__(self, "col_scale", _frozen(cs))

    @property
    def num_groups(self) -> int:
        return self.rows * self.cols // self.config.g

    def unpacked_codes(self) -> np.ndarray:
        """Codes as a flat uint8 array (row-major)."""
        return self._unpacked

    def checksum(self) -> int:
        return codes_checksum(self.codes)


# ---------------------------------------------------------------------------
# Scale / zero-point
# ---------------------------------------------------------------------------


def _expanded_range(gmax, gmin, nu):
    hi = 0.5 * (1.0 + nu) * gmax + 0.5 * (1.0 - nu) * gmin
    lo = 0.5 * (1.0 - nu) * gmax + 0.5 * (1.0 + nu) * gmin
    return hi, lo


def _group_params(groups: np.ndarray, config: QuantConfig):
    """Exact (float64) scale and zero for each row of ``groups``.

    Degenerate groups (empty range) get ``S = 1, Z = Wmin``.
    """
    gmax = groups.max(axis=1)
    gmin = groups.min(axis=1)
    levels = config.levels
    if config.format is QuantFormat.SYMMETRIC:
        amax = np.abs(groups).max(axis=1)
        hi, lo = amax, -amax
        S = 2.0 * amax / levels
        Z = -amax
    else:
        nu = config.nu if config.format is QuantFormat.ASYMMETRIC else 1.0
        hi, lo = _expanded_range(gmax, gmin, nu)
        S = (hi - lo) / levels
        Z = lo
    degenerate = ~(hi > lo)
    S = np.where(degenerate, 1.0, S)
    Z = np.where(degenerate, gmin, Z)
    return S, Z, degenerate


def compute_scale_zero(group, config: QuantConfig) -> tuple[float, float]:
    """Scale and zero-point of a single group, in full precision.

    >>> compute_scale_zero([-1.0, 3.0], QuantConfig(q=3, g=2))
    (0.5714285714285714, -1.0)
    """
    group = as_vector(group, "group")
    S, Z, _ = _group_params(group[None, :], config)
    return float(S[0]), float(Z[0])


def _to_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def quantize_groups(W, config: QuantConfig, col_scale=None) -> QuantizedTensor:
    """Quantize ``W`` groupwise.

    Args:
        W: (rows, cols) weights; ``rows * cols`` must be divisible by ``g``.
        config: bits, groupsize and format.
        col_scale: optional positive per-column factors applied before
            quantization and recorded on the result.

    Returns:
        A :class:`QuantizedTensor`.
    """
    W = as_matrix(W, "W")
    rows, cols = W.shape
    config.check_divisible(W.size)
    if col_scale is not None:
        col_scale = as_vector(col_scale, "col_scale")
        if col_scale.size != cols:
            raise ShapeError(f"col_scale has {col_scale.size} entries for {cols} columns")
        if not np.all(col_scale > 0):
            raise ValueError("col_scale entries must be strictly positive")
        W = W * col_scale[None, :]
    groups = W.reshape(-1, config.g)
    S, Z, degenerate = _group_params(groups, config)
    levels = config.levels

    S32 = _to_f32(S)
    # f32 underflow of a tiny range: fall back to the degenerate grid
    underflow = ~degenerate & ~(S32 > 0)
    if np.any(underflow):
        degenerate = degenerate | underflow
        S32 = np.where(underflow, 1.0, S32)
        Z = np.where(underflow, groups.min(axis=1), Z)

    fmt = config.format
    if fmt is QuantFormat.ALT_INTEGER_ZERO:
        gmin = groups.min(axis=1)
        # Degenerate group: S' = |Wmin| and Z' = -sign(Wmin) reproduce Wmin.
        mag = _to_f32(np.abs(gmin))
        deg_scale = np.where(mag > 0, mag, 1.0)
        deg_zero = -np.sign(gmin)
        S32 = np.where(degenerate, deg_scale, S32)
        zint = np.where(degenerate, deg_zero, -round_half_away(Z / S32)).astype(np.int64)
        raw = round_half_away(groups / S32[:, None]) + zint[:, None]
        zeros = zint
    else:
        if fmt is QuantFormat.SYMMETRIC:
            # Zero-point tied to the scale keeps the grid exactly symmetric.
            Zs = np.where(degenerate, _to_f32(Z), -0.5 * levels * S32)
        else:
            Zs = _to_f32(Z)
        raw = round_half_away((groups - Zs[:, None]) / S32[:, None])
        zeros = Zs
    codes = np.clip(raw, 0, levels).astype(np.int64)
    return QuantizedTensor(
        rows=rows,
        cols=cols,
        config=config,
        codes=pack_codes(codes.reshape(-1), config.q),
        scales=S32,
        zeros=zeros,
        col_scale=col_scale,
    )


def dequantize_groups(t: QuantizedTensor) -> np.ndarray:
    """Affine map of the codes back to reals, shape (rows, cols)."""
    g = t.config.g
    codes = t.unpacked_codes().astype(np.float64).reshape(-1, g)
    if t.config.format is QuantFormat.ALT_INTEGER_ZERO:
        vals = (codes - t.zeros[:, None].astype(np.float64)) * t.scales[:, None]
    else:
        vals = codes * t.scales[:, None] + t.zeros[:, None]
    out = vals.reshape(t.rows, t.cols)
    if t.col_scale is not None:
        out = out / t.col_scale[None, :]
    return out


def rtn_qdq(W, config: QuantConfig) -> np.ndarray:
    """Round-to-nearest QDQ: ``dequantize_groups(quantize_groups(W))``."""
    return dequantize_groups(quantize_groups(W, config))


def group_max_error(W, What, g: int) -> np.ndarray:
    """Max absolute error inside each group of ``g`` consecutive weights."""
    diff = np.abs(as_matrix(W) - as_matrix(What)).reshape(-1, g)
    return diff.max(axis=1)


def memory_bits(rows: int, cols: int, config: QuantConfig, meta_bits: int = 32) -> int:
    """Storage for codes plus one scale and one zero-point per group."""
    n = rows * cols
    return n * config.q + 2 * math.ceil(n / config.g) * meta_bits
