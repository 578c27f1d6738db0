import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import abs_taylor_coefficients, taylor_coefficients
from quadseries.errors import TruncationError
from quadseries.precision import make_context
from quadseries.qsystem import QuadSystem
from quadseries.series import SeriesState, eval_poly, next_coefficient, truncate


def _fr(v):
    return Fraction(*v.as_integer_ratio())


def expand(sys, x0, degree):
    coeffs = [tuple(x0)]
    for _ in range(degree):
        coeffs.append(next_coefficient(sys, coeffs))
    return coeffs


# dyadic data is exact in binary, so the oracle sees the same inputs
dyadic = st.fractions(min_value=-2, max_value=2, max_denominator=8).filter(
    lambda f: f.denominator & (f.denominator - 1) == 0)


@st.composite
def quadratic_systems(draw):
    n = draw(st.integers(1, 3))
    sq = lambda: st.lists(st.lists(dyadic, min_size=n, max_size=n), min_size=n, max_size=n)  # noqa: E731
    A = draw(sq())
    Q = draw(st.lists(sq(), min_size=n, max_size=n))
    x0 = draw(st.lists(dyadic, min_size=n, max_size=n))
    return A, Q, x0


@settings(max_examples=40, deadline=None)
@given(quadratic_systems(), st.integers(1, 8), st.sampled_from([64, 128]))
def test_convolution_matches_exact_oracle(data, degree, bits):
    A, Q, x0 = data
    ctx = make_context(bits)
    eps = _fr(ctx.machine_epsilon)
    got = expand(QuadSystem.build(A, Q), ctx.vector(x0), degree)
    want = taylor_coefficients(A, Q, x0, degree)
    scale = abs_taylor_coefficients(A, Q, x0, degree)
    for j in range(degree + 1):
        for p in range(len(A)):
            assert abs(_fr(got[j][p]) - want[j][p]) <= 10 * eps * scale[j][p]


def test_riccati_coefficients_are_powers(riccati_1d, ctx128):
    # x' = x**2 through x0: U_j = x0**(j+1)
    x0 = Fraction(1, 2)
    got = expand(riccati_1d, ctx128.vector([x0]), 12)
    assert [_fr(u[0]) for u in got] == [x0 ** (j + 1) for j in range(13)]


def test_linear_coefficients_are_exponential(decay, ctx128):
    got = expand(decay, ctx128.vector([1]), 6)
    for j, u in enumerate(got):
        assert _fr(u[0]) == pytest.approx(Fraction((-1) ** j, math.factorial(j)), rel=1e-37)


def test_truncation_stops_at_first_small_term(riccati_1d, ctx128):
    x0 = ctx128.vector(["0.5"])
    s = truncate(riccati_1d, x0, "0.5", "1e-20")
    # |U_i| dt**i = 0.5 * 0.25**i
    m = s.degree
    assert 0.5 * 0.25**m < 1e-20 <= 0.5 * 0.25 ** (m - 1)


def test_truncation_failure(riccati_1d, ctx128):
    with pytest.raises(TruncationError, match="after 5 terms"):
        truncate(riccati_1d, ctx128.vector(["0.5"]), "1", "1e-20", max_degree=5)


def test_truncation_rejects_nonpositive_tolerance(riccati_1d, ctx128):
    with pytest.raises(ValueError):
        truncate(riccati_1d, ctx128.vector(["0.5"]), "0.1", "0")


def test_eval_poly_horner(ctx128):
    c = [ctx128.vector([v]) for v in (1, 2, 3)]
    assert eval_poly(SeriesState(tuple(c)), "2") == (ctx128.real(17),)


def test_eval_poly_at_zero_is_start(dong, ctx128):
    x0 = ctx128.vector(["10", "-27.2011", "10", "10"])
    s = truncate(dong, x0, "0.0001", "1e-20")
    assert eval_poly(s, 0) == x0


def test_series_value_close_to_closed_form(riccati_1d, ctx128):
    s = truncate(riccati_1d, ctx128.vector(["0.5"]), "0.2", "1e-30")
    v = eval_poly(s, "0.2")[0]
    assert abs(_fr(v) - Fraction(5, 9)) < Fraction(1, 10**29)


def test_next_coefficient_needs_start(dong):
    with pytest.raises(ValueError):
        next_coefficient(dong, [])
