from fractions import Fraction

import gmpy2
import pytest
from gmpy2 import mpfr
from hypothesis import given, settings
from hypothesis import strategies as st

from quadseries.errors import PrecisionError
from quadseries.precision import (
    context_of,
    format_decimal,
    from_hex,
    make_context,
    parse_decimal,
    to_hex,
)


@pytest.mark.parametrize("bits, eps", [
    (24, Fraction(1, 2**23)),
    (53, Fraction(1, 2**52)),
    (128, Fraction(1, 2**127)),
])
def test_machine_epsilon(bits, eps):
    assert Fraction(*make_context(bits).machine_epsilon.as_integer_ratio()) == eps


def test_epsilon_at_128_bits_prints_as_expected():
    assert f"{float(make_context(128).machine_epsilon):.5e}" == "5.87747e-39"


@pytest.mark.parametrize("bits", [0, 23, -5])
def test_too_few_bits_rejected(bits):
    with pytest.raises(PrecisionError, match="insufficient precision"):
        make_context(bits)


def test_non_integer_width_rejected():
    with pytest.raises(PrecisionError):
        make_context(128.0)


def test_parse_is_correctly_rounded():
    ctx = make_context(53)
    assert parse_decimal("0.1", ctx) == mpfr(0.1, 53)
    ctx = make_context(128)
    v = parse_decimal("0.1", ctx)
    exact = Fraction(1, 10)
    err = abs(Fraction(*v.as_integer_ratio()) - exact)
    assert err <= exact * Fraction(*ctx.machine_epsilon.as_integer_ratio()) / 2


@pytest.mark.parametrize("bad", ["", "1..2", "abc", "1e", "--1", "0x10", "nan", "inf"])
def test_malformed_decimal(bad):
    with pytest.raises(ValueError):
        parse_decimal(bad, make_context(64))


def test_foreign_width_is_refused():
    a = make_context(64)
    b = make_context(128)
    with pytest.raises(PrecisionError, match="bits"):
        b.real(a.real(1))
    with pytest.raises(PrecisionError, match="mixed-precision"):
        b.check([b.real(1), a.real(2)])


def test_context_of_empty():
    with pytest.raises(PrecisionError):
        context_of([])


def test_context_of_mixed():
    with pytest.raises(PrecisionError):
        context_of([mpfr(1, 64), mpfr(1, 65)])


def test_local_sets_precision():
    ctx = make_context(200)
    with ctx.local():
        assert (mpfr(1) / 3).precision == 200


def test_signed_zero_and_nonfinite():
    assert format_decimal(mpfr(0, 64)) == "0"
    assert format_decimal(-mpfr(0, 64)) == "-0"
    with pytest.raises(ValueError):
        format_decimal(mpfr("inf", 64))


def _random_mpfr(bits, mant, exp):
    with make_context(bits).local():
        return gmpy2.mul_2exp(mpfr(mant), exp)


@settings(max_examples=300, deadline=None)
@given(
    bits=st.integers(24, 300),
    mant=st.integers(-(2**300), 2**300).filter(bool),
    exp=st.integers(-1200, 1200),
)
def test_decimal_round_trip_is_bit_exact(bits, mant, exp):
    v = _random_mpfr(bits, mant, exp)
    ctx = make_context(bits)
    text = format_decimal(v)
    assert parse_decimal(text, ctx) == v


@settings(max_examples=200, deadline=None)
@given(bits=st.integers(24, 256), mant=st.integers(-(2**256), 2**256), exp=st.integers(-300, 300))
def test_hex_round_trip(bits, mant, exp):
    v = _random_mpfr(bits, mant, exp)
    assert from_hex(to_hex(v), make_context(bits)) == v
