import io
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttquant.calibration import AwqHyperparams
from ttquant.exceptions import ChecksumError, FormatError
from ttquant.io_formats import (
    decode_container,
    decode_tensor,
    encode_container,
    encode_tensor,
    read_container,
    read_tensor,
    write_container,
    write_tensor,
)
from ttquant.lowrank import pca_init
from ttquant.quantizer import QuantConfig, QuantFormat, dequantize_groups, quantize_groups


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


class TestTensorFile:
    def test_identity_roundtrip(self, tmp_path):
        path = tmp_path / "eye.ttqt"
        write_tensor(path, np.eye(2))
        out = read_tensor(path)
        assert out.dtype == np.float64 and out.tobytes() == np.eye(2).tobytes()

    def test_header_layout_f32(self):
        data = encode_tensor(np.zeros((3, 4)), dtype="f32")
        header = bytes.fromhex("54545154" "0100" "01" "02") + struct.pack("<QQ", 3, 4)
        assert data[: len(header)] == header
        assert len(data) == len(header) + 48

    def test_f32_payload(self):
        m = np.array([[1.5, -2.0]])
        data = encode_tensor(m, dtype="f32")
        assert data[-8:] == np.array([1.5, -2.0], dtype="<f4").tobytes()
        np.testing.assert_array_equal(decode_tensor(data), m)

    def test_wrong_magic(self):
        data = b"XXXX" + encode_tensor(np.eye(2))[4:]
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(data)

    def test_truncated(self):
        data = encode_tensor(np.eye(3))
        with pytest.raises(FormatError, match="truncated"):
            decode_tensor(data[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_tensor(encode_tensor(np.eye(2)) + b"\x00")

    def test_future_version(self):
        data = bytearray(encode_tensor(np.eye(2)))
        data[4] = 2
        with pytest.raises(FormatError, match="version"):
            decode_tensor(bytes(data))

    def test_stream(self):
        buf = io.BytesIO()
        write_tensor(buf, np.arange(6.0).reshape(2, 3))
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), np.arange(6.0).reshape(2, 3))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            encode_tensor(np.array([[np.nan]]))

    @given(st.integers(0, 2**32 - 1), st.integers(0, 4))
    def test_roundtrip_property(self, seed, ndim):
        rng = np.random.default_rng(seed)
        shape = tuple(int(x) for x in rng.integers(1, 5, size=ndim))
        m = rng.standard_normal(shape) * 10.0 ** rng.integers(-300, 300)
        assert decode_tensor(encode_tensor(m)).tobytes() == np.asarray(m, dtype=np.float64).tobytes()


class TestContainer:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.W = rng.standard_normal((4, 8))
        self.cfg = QuantConfig(q=3, g=8)

    def test_golden_layout(self):
        # 1x4 asymmetric q=2 group, codes [0, 1, 2, 3], S = 1/3 (f32), Z = 0
        qt = quantize_groups([[0.0, 0.3, 0.7, 1.0]], QuantConfig(q=2, g=4))
        body = (
            b"TTQC"
            + struct.pack("<H", 1)
            + struct.pack("<BIBd", 2, 4, 0, 1.0)
            + b"\x00"
            + struct.pack("<QQ", 1, 4)
            + b"\xe4"
            + struct.pack("<f", 1 / 3)
            + struct.pack("<f", 0.0)
            + b"\x00"
        )
        assert encode_container(qt) == with_crc(body)

    def test_roundtrip_dequantizes_identically(self, tmp_path):
        path = tmp_path / "w.ttqc"
        qt = quantize_groups(self.W, self.cfg)
        write_container(path, qt)
        c = read_container(path)
        assert c.qt.codes == qt.codes and c.method == "rtn"
        assert dequantize_groups(c.qt).tobytes() == dequantize_groups(qt).tobytes()

    def test_factors_and_optional_blocks(self):
        f = pca_init(self.W, 2).to_float32()
        s = np.exp(np.random.default_rng(1).standard_normal(8))
        qt = quantize_groups(self.W - f.product(), self.cfg, col_scale=s)
        hp = AwqHyperparams(0.75, 0.1, 4.0)
        c = decode_container(encode_container(qt, f, method="ttq", weights=self.W, hp=hp))
        assert c.method == "ttq"
        assert c.factors.B.tobytes() == f.B.tobytes() and c.factors.A.tobytes() == f.A.tobytes()
        assert c.weights.tobytes() == self.W.tobytes()
        assert (c.hp.alpha, c.hp.lam, c.hp.p) == (0.75, 0.1, 4.0)
        np.testing.assert_array_equal(c.qt.col_scale, s)
        assert dequantize_groups(c.qt).tobytes() == dequantize_groups(qt).tobytes()

    def test_rank_zero_omits_factor_block(self):
        qt = quantize_groups(self.W, self.cfg)
        plain = encode_container(qt)
        assert encode_container(qt, pca_init(self.W, 0)) == plain
        assert plain[-5] == 0  # flags byte
        c = decode_container(plain)
        assert c.factors.r == 0 and c.factors.shape == (4, 8)

    @pytest.mark.parametrize("fmt", list(QuantFormat))
    def test_every_format(self, fmt):
        qt = quantize_groups(self.W, QuantConfig(q=5, g=4, format=fmt, nu=0.9))
        c = decode_container(encode_container(qt))
        assert c.qt.config == qt.config
        np.testing.assert_array_equal(c.qt.zeros, qt.zeros)
        assert dequantize_groups(c.qt).tobytes() == dequantize_groups(qt).tobytes()

    def test_flipped_payload_byte(self):
        data = bytearray(encode_container(quantize_groups(self.W, self.cfg)))
        data[40] ^= 0x01
        with pytest.raises(ChecksumError):
            decode_container(bytes(data))

    def test_every_single_byte_flip_detected(self):
        data = encode_container(quantize_groups(self.W, self.cfg), pca_init(self.W, 1))
        for pos in range(4, len(data)):
            corrupt = bytearray(data)
            corrupt[pos] ^= 0x80
            with pytest.raises(ChecksumError):
                decode_container(bytes(corrupt))

    def test_bad_magic(self):
        data = encode_container(quantize_groups(self.W, self.cfg))
        with pytest.raises(FormatError, match="magic"):
            decode_container(b"TTQT" + data[4:])

    def test_future_version(self):
        body = bytearray(encode_container(quantize_groups(self.W, self.cfg))[:-4])
        body[4:6] = struct.pack("<H", 2)
        with pytest.raises(FormatError, match="version"):
            decode_container(with_crc(bytes(body)))

    def test_truncated(self):
        data = encode_container(quantize_groups(self.W, self.cfg))
        with pytest.raises(FormatError):
            decode_container(data[:6])
        with pytest.raises(FormatError):
            decode_container(with_crc(data[:-10]))

    def test_unknown_flags(self):
        body = bytearray(encode_container(quantize_groups(self.W, self.cfg))[:-4])
        body[-1] = 0x40
        with pytest.raises(FormatError, match="flag"):
            decode_container(with_crc(bytes(body)))

    def test_shape_checks_on_write(self):
        qt = quantize_groups(self.W, self.cfg)
        with pytest.raises(ValueError):
            encode_container(qt, weights=np.ones((8, 4)))
        with pytest.raises(ValueError):
            encode_container(qt, method="gptq")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3, 4, 5, 8]), st.sampled_from(list(QuantFormat)))
    def test_roundtrip_property(self, seed, q, fmt):
        rng = np.random.default_rng(seed)
        g = int(rng.choice([1, 2, 4, 8]))
        rows, cols = int(rng.integers(1, 6)), g * int(rng.integers(1, 4))
        W = rng.standard_normal((rows, cols))
        f = pca_init(W, int(rng.integers(0, min(rows, cols) + 1))).to_float32()
        qt = quantize_groups(W - f.product(), QuantConfig(q=q, g=g, format=fmt))
        data = encode_container(qt, f)
        c = decode_container(data)
        assert encode_container(c.qt, c.factors) == data
        assert dequantize_groups(c.qt).tobytes() == dequantize_groups(qt).tobytes()
