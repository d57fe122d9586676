from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcodec.errors import FormatError
from lcodec.qtensor import (
    INT16_MAX,
    INT16_MIN,
    QTensor,
    dequantize_value,
    qcd_proxy,
    quantize_value,
    requantize,
    round_shift_away,
)


def _round_away_exact(fr: Fraction) -> int:
    """Scalar oracle on exact rationals."""
    mag = abs(fr)
    n = int(mag)
    if mag - n >= Fraction(1, 2):
        n += 1
    return n if fr >= 0 else -n


class TestScalarOps:
    @pytest.mark.parametrize("x, q, expected", [(0.5, 8, 128), (200.0, 8, 32767), (-0.001953125, 8, -1)])
    def test_quantize_examples(self, x, q, expected):
        assert int(quantize_value(x, q)) == expected

    @pytest.mark.parametrize("v, q, expected", [(128, 8, 0.5), (0, 15, 0.0), (-1, 0, -1.0)])
    def test_dequantize_examples(self, v, q, expected):
        assert float(dequantize_value(v, q)) == expected

    def test_qcd_examples(self):
        assert float(qcd_proxy(0.3, 4)) == 0.3125
        assert float(qcd_proxy(1000.0, 8, 255)) == 0.99609375
        for q in (0, 5, 15):
            for c in (1, 255, 32767):
                assert float(qcd_proxy(0.0, q, c)) == 0.0

    def test_qcd_grid_matches_scalar_oracle(self):
        xs = np.linspace(-3, 3, 2001)
        for q in (2, 4, 9):
            got = qcd_proxy(xs, q, 40)
            for x, g in zip(xs, got):
                n = max(-40, min(40, _round_away_exact(Fraction(float(x)) * 2**q)))
                assert g == n / 2**q

    @pytest.mark.parametrize("acc, shift, expected", [(384, 8, 2), (-384, 8, -1), (1 << 24, 4, 32767)])
    def test_requantize_examples(self, acc, shift, expected):
        assert int(requantize(acc, shift)) == expected

    def test_requantize_negative_asymmetry_against_real_oracle(self):
        # bias-then-shift is floor(x + 1/2): -1.5 goes to -1, not -2
        for acc in range(-2048, 2049):
            expected = int(np.floor(Fraction(acc, 256) + Fraction(1, 2)))
            assert int(requantize(acc, 8)) == max(INT16_MIN, min(INT16_MAX, expected))

    def test_quantize_rejects_bad_shift(self):
        with pytest.raises(ValueError):
            quantize_value(1.0, 16)


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(INT16_MIN, INT16_MAX), st.integers(0, 15))
    def test_dequantize_then_quantize_is_identity(self, v, q):
        assert int(quantize_value(dequantize_value(v, q), q)) == v

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-100, 100, allow_nan=False), st.integers(0, 8))
    def test_quantization_error_at_most_half_step(self, x, q):
        v = int(quantize_value(x, q))
        if INT16_MIN < v < INT16_MAX:
            assert abs(dequantize_value(v, q) - x) <= 0.5 / 2**q + 1e-12

    @settings(max_examples=300, deadline=None)
    @given(st.integers(-(2**31), 2**31 - 1), st.integers(1, 15))
    def test_round_shift_away_matches_fraction_oracle(self, v, s):
        assert int(round_shift_away(v, s)) == _round_away_exact(Fraction(v, 2**s))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 15))
    def test_quantize_is_odd(self, x, q):
        a, b = int(quantize_value(x, q)), int(quantize_value(-x, q))
        if abs(a) < INT16_MAX:
            assert a == -b


class TestQTensor:
    def test_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        t = QTensor(rng.integers(INT16_MIN, INT16_MAX + 1, size=(3, 5, 7)), 9)
        assert QTensor.from_bytes(t.to_bytes()) == t
        t.save(tmp_path / "t.qtns")
        assert QTensor.load(tmp_path / "t.qtns") == t

    def test_data_is_read_only(self):
        t = QTensor(np.zeros((1, 2, 2), dtype=np.int16), 0)
        with pytest.raises(ValueError):
            t.data[0, 0, 0] = 1

    def test_from_real_to_real(self):
        x = np.array([[[0.5, -0.25], [1.0, 0.0]]])
        t = QTensor.from_real(x, 8)
        np.testing.assert_array_equal(t.to_real(), x)
        assert t.shape == (1, 2, 2)

    @pytest.mark.parametrize("bad", [np.zeros((2, 2)), np.zeros((0, 2, 2)), np.full((1, 1, 1), 40000)])
    def test_invalid_arrays(self, bad):
        with pytest.raises(ValueError):
            QTensor(bad, 0)

    def test_truncated_and_bad_magic(self):
        buf = QTensor(np.ones((2, 3, 3), dtype=np.int16), 4).to_bytes()
        for n in (0, 3, 10, len(buf) - 1):
            with pytest.raises(FormatError):
                QTensor.from_bytes(buf[:n])
        with pytest.raises(FormatError) as info:
            QTensor.from_bytes(b"XXXX" + buf[4:])
        assert info.value.offset == 0
