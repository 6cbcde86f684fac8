import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttquant.exceptions import FormatError, ShapeError
from ttquant.quantizer import (
    QuantConfig,
    QuantFormat,
    QuantizedTensor,
    codes_checksum,
    compute_scale_zero,
    dequantize_groups,
    group_max_error,
    memory_bits,
    pack_codes,
    packed_length,
    quantize_groups,
    round_half_away,
    rtn_qdq,
    unpack_codes,
)

ALL_FORMATS = list(QuantFormat)
BITS = (2, 3, 4, 5, 8)
ASYM, SYM, ALT = QuantFormat.ASYMMETRIC, QuantFormat.SYMMETRIC, QuantFormat.ALT_INTEGER_ZERO


def random_matrix(seed, rows=6, cols=16):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, cols)) * np.exp(rng.uniform(-3, 3))


class TestConfig:
    def test_defaults(self):
        cfg = QuantConfig()
        assert (cfg.q, cfg.g, cfg.format, cfg.nu) == (4, 32, ASYM, 1.0)
        assert cfg.levels == 15

    @pytest.mark.parametrize("kwargs", [dict(q=0), dict(q=9), dict(q=2.5), dict(g=0), dict(nu=0.0), dict(nu=2.5)])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            QuantConfig(**kwargs)

    def test_format_from_string(self):
        assert QuantConfig(format="symmetric").format is SYM

    def test_format_codes_roundtrip(self):
        for fmt in ALL_FORMATS:
            assert QuantFormat.from_code(fmt.code) is fmt
        with pytest.raises(FormatError):
            QuantFormat.from_code(7)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            quantize_groups(np.ones((3, 5)), QuantConfig(q=4, g=4))


class TestScaleZero:
    def test_asymmetric(self):
        S, Z = compute_scale_zero([-1.0, 3.0], QuantConfig(q=3, g=2))
        assert S == pytest.approx(4 / 7) and Z == -1.0

    def test_symmetric(self):
        S, Z = compute_scale_zero([-1.0, 3.0], QuantConfig(q=3, g=2, format=SYM))
        assert S == pytest.approx(6 / 7) and Z == -3.0

    def test_expansion_factor(self):
        group = [0.0] + [1.0] * 15
        S, Z = compute_scale_zero(group, QuantConfig(q=4, g=16, nu=0.95))
        assert S == pytest.approx(0.95 / 15, rel=1e-14)
        assert Z == pytest.approx(0.025, rel=1e-14)
        assert Z + 15 * S == pytest.approx(0.975, rel=1e-14)

    def test_nu_ignored_by_symmetric(self):
        a = compute_scale_zero([-1.0, 3.0], QuantConfig(q=3, g=2, format=SYM, nu=0.5))
        assert a == compute_scale_zero([-1.0, 3.0], QuantConfig(q=3, g=2, format=SYM))

    def test_degenerate_group(self):
        assert compute_scale_zero([5.0] * 4, QuantConfig(q=2, g=4)) == (1.0, 5.0)


class TestQuantize:
    def test_hand_example(self):
        qt = quantize_groups([[0, 0.3, 0.7, 1.0]], QuantConfig(q=2, g=4))
        assert qt.unpacked_codes().tolist() == [0, 1, 2, 3]
        assert qt.scales[0] == np.float32(1 / 3)
        assert qt.zeros[0] == 0.0

    def test_rtn_hand_example(self):
        out = rtn_qdq([[0, 0.3, 0.7, 1.0]], QuantConfig(q=2, g=4))
        np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]], rtol=1e-7)

    def test_constant_group(self):
        qt = quantize_groups([[5.0, 5.0, 5.0, 5.0]], QuantConfig(q=2, g=4))
        assert qt.unpacked_codes().tolist() == [0, 0, 0, 0]
        assert (qt.scales[0], qt.zeros[0]) == (1.0, 5.0)
        np.testing.assert_array_equal(dequantize_groups(qt), [[5.0] * 4])

    @pytest.mark.parametrize("fmt", ALL_FORMATS)
    @pytest.mark.parametrize("value", [0.0, -2.5, 3.0])
    def test_constant_group_every_format(self, fmt, value):
        W = np.full((2, 4), value)
        out = rtn_qdq(W, QuantConfig(q=3, g=4, format=fmt))
        if fmt is SYM and value != 0.0:
            # not degenerate: the symmetric grid spans [-|v|, |v|] at float32 scale
            np.testing.assert_allclose(out, W, rtol=1e-7)
        else:
            np.testing.assert_array_equal(out, W)

    def test_on_grid_is_exact(self):
        cfg = QuantConfig(q=3, g=8)
        W = np.array([[-1.0 + 0.5 * k for k in range(8)]])
        np.testing.assert_array_equal(rtn_qdq(W, cfg), W)

    def test_row_major_grouping(self):
        # groups of 2 over a 2x2 matrix are its rows
        W = np.array([[0.0, 1.0], [10.0, 30.0]])
        qt = quantize_groups(W, QuantConfig(q=1, g=2))
        np.testing.assert_array_equal(qt.scales, [1.0, 20.0])
        np.testing.assert_array_equal(qt.zeros, [0.0, 10.0])

    def test_round_then_clamp_saturates(self):
        # with nu < 1 the ends fall outside the grid and clamp to the end codes
        qt = quantize_groups([[0.0, 1.0]], QuantConfig(q=2, g=2, nu=0.5))
        assert qt.unpacked_codes().tolist() == [0, 3]

    def test_alt_format_hand_example(self):
        qt = quantize_groups([[-1.0, 0.0, 1.0, 2.0]], QuantConfig(q=2, g=4, format=ALT))
        assert qt.scales[0] == 1.0 and qt.zeros[0] == 1
        assert qt.unpacked_codes().tolist() == [0, 1, 2, 3]
        np.testing.assert_array_equal(dequantize_groups(qt), [[-1.0, 0.0, 1.0, 2.0]])

    def test_alt_zero_is_integer(self):
        qt = quantize_groups(random_matrix(0), QuantConfig(q=4, g=8, format=ALT))
        assert qt.zeros.dtype == np.int64

    def test_scales_stored_at_float32(self):
        qt = quantize_groups(random_matrix(1), QuantConfig(q=4, g=8))
        np.testing.assert_array_equal(qt.scales, qt.scales.astype(np.float32))
        np.testing.assert_array_equal(qt.zeros, qt.zeros.astype(np.float32))

    def test_tiny_range_underflowing_float32(self):
        W = np.array([[1e-300, 2e-300, 3e-300, 4e-300]])
        qt = quantize_groups(W, QuantConfig(q=2, g=4))
        assert qt.scales[0] > 0
        assert np.abs(dequantize_groups(qt) - W).max() <= 4e-300

    def test_q8_bound(self):
        W = np.random.default_rng(2).uniform(0, 1, size=(16, 16))
        W[0, :4] = [0.0, 1.0, 0.5, 0.25]
        err = np.abs(rtn_qdq(W, QuantConfig(q=8, g=4)) - W)
        assert err.max() <= (1 / 255) / 2 + 1e-7

    def test_results_are_immutable(self):
        qt = quantize_groups(random_matrix(3), QuantConfig(q=4, g=8))
        with pytest.raises(ValueError):
            qt.scales[0] = 2.0
        with pytest.raises(AttributeError):
            qt.rows = 4

    def test_rejects_bad_tensor_metadata(self):
        cfg = QuantConfig(q=2, g=4)
        with pytest.raises(FormatError):
            QuantizedTensor(1, 4, cfg, b"\x00", [0.0], [0.0])
        with pytest.raises(FormatError):
            QuantizedTensor(1, 4, cfg, b"\x00\x00", [1.0], [0.0])
        with pytest.raises(FormatError):
            QuantizedTensor(1, 4, cfg, b"\x00", [1.0, 1.0], [0.0, 0.0])


class TestInvariants:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_FORMATS), st.sampled_from(BITS), st.sampled_from([2, 4, 8, 16]))
    def test_idempotent(self, seed, fmt, q, g):
        cfg = QuantConfig(q=q, g=g, format=fmt)
        first = quantize_groups(random_matrix(seed), cfg)
        second = quantize_groups(dequantize_groups(first), cfg)
        assert first.codes == second.codes
        np.testing.assert_allclose(second.scales, first.scales, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(dequantize_groups(second), dequantize_groups(first))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_FORMATS), st.sampled_from(BITS), st.sampled_from([2, 4, 8, 16]))
    def test_error_bound(self, seed, fmt, q, g):
        W = random_matrix(seed)
        qt = quantize_groups(W, QuantConfig(q=q, g=g, format=fmt))
        err = np.abs(dequantize_groups(qt) - W).reshape(-1, g)
        assert np.all(err <= qt.scales[:, None] / 2 + 1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_FORMATS), st.sampled_from([0.5, 3.0, 100.0]))
    def test_positive_scale_equivariance(self, seed, fmt, c):
        W = random_matrix(seed, 8, 32)
        cfg = QuantConfig(q=4, g=8, format=fmt)
        lhs, rhs = rtn_qdq(c * W, cfg), c * rtn_qdq(W, cfg)
        assert np.linalg.norm(lhs - rhs) <= 1e-6 * np.linalg.norm(rhs)

    @pytest.mark.parametrize("fmt", ALL_FORMATS)
    def test_monotone_precision_per_seed(self, fmt):
        for seed in range(100):
            W = random_matrix(seed, 8, 32)
            errs = [np.linalg.norm(W - rtn_qdq(W, QuantConfig(q=q, g=16, format=fmt))) for q in BITS]
            assert all(b <= a for a, b in zip(errs, errs[1:])), (seed, errs)

    def test_codes_below_levels(self):
        for q in range(1, 9):
            qt = quantize_groups(random_matrix(q, 4, 8), QuantConfig(q=q, g=8))
            assert qt.unpacked_codes().max() < 2**q


class TestPacking:
    def test_q4_nibbles(self):
        assert pack_codes([1, 2], 4) == b"\x21"

    def test_q2(self):
        assert pack_codes([0, 1, 2, 3], 2) == bytes([0b11100100])

    def test_q3_crosses_byte(self):
        assert pack_codes([7, 7, 7], 3) == bytes([0xFF, 0x01])

    def test_q5_layout(self):
        # 5 + 5 bits: 0b00001_10101 read LSB-first
        assert pack_codes([0b10101, 0b00001], 5) == bytes([0b00110101, 0b00])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            pack_codes([4], 2)
        with pytest.raises(ValueError):
            pack_codes([-1], 2)

    def test_unpack_length_checked(self):
        with pytest.raises(FormatError):
            unpack_codes(b"\x00\x00", 4, 2)

    @pytest.mark.parametrize("q", range(1, 9))
    def test_exhaustive_roundtrip(self, q):
        for length in range(1, 65):
            codes = np.arange(length) % (1 << q)
            data = pack_codes(codes, q)
            assert len(data) == packed_length(length, q)
            np.testing.assert_array_equal(unpack_codes(data, q, length), codes)

    @given(st.integers(1, 8).flatmap(lambda q: st.tuples(st.just(q), st.lists(st.integers(0, 2**q - 1), min_size=1, max_size=200))))
    def test_roundtrip_property(self, case):
        q, codes = case
        np.testing.assert_array_equal(unpack_codes(pack_codes(codes, q), q, len(codes)), codes)


class TestHelpers:
    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]), [1, 2, 3, -1, -2, 0])

    def test_checksum_frozen(self):
        # BLAKE2b-64 of b"abc" is d8bb14d833d59559, read little-endian
        assert codes_checksum(b"abc") == 0x5995D533D814BBD8
        assert codes_checksum(b"\x00") != codes_checksum(b"\x01")

    def test_group_max_error(self):
        W = np.zeros((1, 4))
        What = np.array([[0.1, -0.3, 0.0, 0.2]])
        np.testing.assert_allclose(group_max_error(W, What, 2), [0.3, 0.2])

    def test_memory_bits(self):
        assert memory_bits(1024, 1024, QuantConfig(q=4, g=128)) == 4 * 2**20 + 2 * 8192 * 32
