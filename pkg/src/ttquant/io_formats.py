"""Binary tensor and quantized-container files. All integers little-endian.

Tensor file::

    "TTQT" | version u16 = 1 | dtype u8 (0 = f64, 1 = f32) | ndim u8
    | dims u64 * ndim | payload, row-major

Container file::

    "TTQC" | version u16 = 1
    | q u8 | g u32 | format u8 | nu f64                      config block
    | method u8 (0 rtn, 1 awq, 2 awp, 3 ttq)
    | rows u64 | cols u64
    | codes, ceil(rows * cols * q / 8) bytes                 quantizer layout
    | scales f32 * ngroups
    | zeros f32 * ngroups (i32 for alt_integer_zero)
    | flags u8
    | [column scales f64 * cols]              flags & 1
    | [full-precision weights f64 * rows*cols] flags & 2
    | [alpha f64 | lam f64 | p f64]           flags & 4
    | [r u32 | B f32 * rows*r | A f32 * r*cols] flags & 8
    | crc32 u32 over every preceding byte

For the symmetric format the zero-point is a function of the scale,
``-(2^q - 1) * S / 2``; the stored zeros are informational and the reader
recomputes them so the grid stays exactly symmetric.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

from .calibration import AwqHyperparams
from .exceptions import ChecksumError, FormatError
from .lowrank import LowRankFactors
from .quantizer import QuantConfig, QuantFormat, QuantizedTensor, packed_length
from .tensor_core import as_matrix

TENSOR_MAGIC = b"TTQT"
CONTAINER_MAGIC = b"TTQC"
VERSION = 1

METHODS = ("rtn", "awq", "awp", "ttq")

FLAG_COL_SCALE = 1
FLAG_WEIGHTS = 2
FLAG_HPARAMS = 4
FLAG_FACTORS = 8

PathOrStream = Union[str, os.PathLike, BinaryIO]

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _open_write(dest):
    if hasattr(dest, "write"):
        return dest, False
    return open(dest, "wb"), True


def _read_all(src) -> bytes:
    if hasattr(src, "read"):
        return src.read()
    with open(src, "rb") as fh:
        return fh.read()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


# ---------------------------------------------------------------------------
# Dense tensors
# ---------------------------------------------------------------------------


def encode_tensor(m, dtype: str = "f64") -> bytes:
    arr = np.asarray(m)
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    code = {"f64": 0, "f32": 1}[dtype]
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    header = TENSOR_MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    rd = _Reader(data)
    if rd.take(4) != TENSOR_MAGIC:
        raise FormatError("bad magic: not a tensor file")
    version, code, ndim = rd.unpack("HBB")
    if version > VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = rd.unpack(f"{ndim}Q")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = rd.array(_DTYPES[code].str, count)
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes after tensor payload")
    return payload.astype(np.float64).reshape(dims)


def write_tensor(dest: PathOrStream, m, dtype: str = "f64") -> None:
    """Write ``m`` as a tensor file (``dtype`` ``"f64"`` or ``"f32"``)."""
    data = encode_tensor(m, dtype)
    fh, owned = _open_write(dest)
    try:
        fh.write(data)
    finally:
        if owned:
            fh.close()


def read_tensor(src: PathOrStream) -> np.ndarray:
    """Read a tensor file back as a float64 array."""
    return decode_tensor(_read_all(src))


# ---------------------------------------------------------------------------
# Quantized containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantContainer:
    qt: QuantizedTensor
    factors: LowRankFactors
    method: str = "rtn"
    weights: np.ndarray | None = None
    hp: AwqHyperparams | None = None


def encode_container(
    qt: QuantizedTensor,
    factors: LowRankFactors | None = None,
    *,
    method: str = "rtn",
    weights=None,
    hp: AwqHyperparams | None = None,
) -> bytes:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = qt.config
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<BIBd", cfg.q, cfg.g, cfg.format.code, cfg.nu))
    buf.write(struct.pack("<B", METHODS.index(method)))
    buf.write(struct.pack("<QQ", qt.rows, qt.cols))
    buf.write(qt.codes)
    buf.write(qt.scales.astype("<f4").tobytes())
    if cfg.format is QuantFormat.ALT_INTEGER_ZERO:
        buf.write(qt.zeros.astype("<i4").tobytes())
    else:
        buf.write(qt.zeros.astype("<f4").tobytes())

    flags = 0
    blocks = []
    if qt.col_scale is not None:
        flags |= FLAG_COL_SCALE
        blocks.append(qt.col_scale.astype("<f8").tobytes())
    if weights is not None:
        W = as_matrix(weights, "weights")
        if W.shape != (qt.rows, qt.cols):
            raise ValueError(f"weights shape {W.shape} does not match codes ({qt.rows}, {qt.cols})")
        flags |= FLAG_WEIGHTS
        blocks.append(W.astype("<f8").tobytes())
    if hp is not None:
        flags |= FLAG_HPARAMS
        blocks.append(struct.pack("<ddd", hp.alpha, hp.lam, hp.p))
    if factors is not None and factors.r > 0:
        if factors.shape != (qt.rows, qt.cols):
            raise ValueError(f"factors shape {factors.shape} does not match codes ({qt.rows}, {qt.cols})")
        flags |= FLAG_FACTORS
        blocks.append(
            struct.pack("<I", factors.r)
            + factors.B.astype("<f4").tobytes()
            + factors.A.astype("<f4").tobytes()
        )
    buf.write(struct.pack("<B", flags))
    for block in blocks:
        buf.write(block)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(data: bytes) -> QuantContainer:
    if len(data) < 8:
        raise FormatError("truncated container")
    if data[:4] != CONTAINER_MAGIC:
        raise FormatError("bad magic: not a quantized container")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    rd = _Reader(body)
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch: container is corrupted")
    rd.take(4)
    (version,) = rd.unpack("H")
    if version > VERSION:
        raise FormatError(f"unsupported container version {version}")

    q, g, fmt_code, nu = rd.unpack("BIBd")
    (method_code,) = rd.unpack("B")
    if method_code >= len(METHODS):
        raise FormatError(f"unknown method code {method_code}")
    try:
        config = QuantConfig(q=q, g=g, format=QuantFormat.from_code(fmt_code), nu=nu)
    except ValueError as exc:
        raise FormatError(f"invalid config block: {exc}") from exc
    rows, cols = rd.unpack("QQ")
    n = rows * cols
    if n == 0 or n % g:
        raise FormatError(f"shape ({rows}, {cols}) incompatible with groupsize {g}")
    ngroups = n // g
    codes = rd.take(packed_length(n, q))
    scales = rd.array("<f4", ngroups).astype(np.float64)
    if config.format is QuantFormat.ALT_INTEGER_ZERO:
        zeros = rd.array("<i4", ngroups).astype(np.int64)
    elif config.format is QuantFormat.SYMMETRIC:
        rd.take(4 * ngroups)
        zeros = -0.5 * config.levels * scales
    else:
        zeros = rd.array("<f4", ngroups).astype(np.float64)
    (flags,) = rd.unpack("B")
    if flags & ~(FLAG_COL_SCALE | FLAG_WEIGHTS | FLAG_HPARAMS | FLAG_FACTORS):
        raise FormatError(f"unknown flag bits {flags:#x}")

    col_scale = rd.array("<f8", cols) if flags & FLAG_COL_SCALE else None
    weights = rd.array("<f8", n).reshape(rows, cols) if flags & FLAG_WEIGHTS else None
    hp = AwqHyperparams(*rd.unpack("ddd")) if flags & FLAG_HPARAMS else None
    if flags & FLAG_FACTORS:
        (r,) = rd.unpack("I")
        B = rd.array("<f4", rows * r).astype(np.float64).reshape(rows, r)
        A = rd.array("<f4", r * cols).astype(np.float64).reshape(r, cols)
        factors = LowRankFactors(B, A)
    else:
        factors = LowRankFactors.empty(rows, cols)
    if rd.pos != len(body):
        raise FormatError(f"{len(body) - rd.pos} unexpected trailing bytes")

    try:
        qt = QuantizedTensor(rows, cols, config, codes, scales, zeros, col_scale=col_scale)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"invalid quantized payload: {exc}") from exc
    return QuantContainer(qt=qt, factors=factors, method=METHODS[method_code], weights=weights, hp=hp)


def write_container(
    dest: PathOrStream,
    qt: QuantizedTensor,
    factors: LowRankFactors | None = None,
    *,
    method: str = "rtn",
    weights=None,
    hp: AwqHyperparams | None = None,
) -> None:
    """Serialize a quantized tensor plus optional factors/weights/hyperparameters.

    Factors are stored at float32; pass ``factors.to_float32()`` if the
    in-memory copy must match the file exactly.
    """
    data = encode_container(qt, factors, method=method, weights=weights, hp=hp)
    fh, owned = _open_write(dest)
    try:
        fh.write(data)
    finally:
        if owned:
            fh.close()


def read_container(src: PathOrStream) -> QuantContainer:
    """Parse a container, verifying its CRC32 before anything else."""
    return decode_container(_read_all(src))
