"""Taylor coefficients of quadratic-system solutions.

Substituting X(t) = sum_i U_i t**i into X' = A X + Phi(X) gives

    U_j = (A U_{j-1} + Psi_{j-1}) / j,
    psi_{i,p} = sum_{j=0..i} <Q_p U_j, U_{i-j}>,

the Cauchy product of the series with itself under each quadratic form.
The summation order used here is the reference order; the compiled kernel
reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from gmpy2 import mpfr

from .errors import TruncationError
from .precision import context_of
from .qsystem import QuadSystem, RealizedSystem

Vector = tuple[mpfr, ...]

DEFAULT_MAX_DEGREE = 1000


@dataclass(frozen=True)
class SeriesState:
    """Coefficients U_0..U_m of one local expansion; ``degree`` is m."""

    coeffs: tuple[Vector, ...]

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1


def convolution_term(rsys: RealizedSystem, coeffs: Sequence[Sequence[mpfr]], i: int) -> list[mpfr]:
    """Psi_i from coefficients U_0..U_i; caller holds the context."""
    psi = [mpfr(0)] * rsys.n
    for p, r, c, v in rsys.q_entries:
        s = mpfr(0)
        for j in range(i + 1):
            s = s + coeffs[j][r] * coeffs[i - j][c]
        psi[p] = psi[p] + v * s
    return psi


def _next(rsys: RealizedSystem, coeffs: Sequence[Sequence[mpfr]]) -> Vector:
    j = len(coeffs)
    prev = coeffs[j - 1]
    au = [mpfr(0)] * rsys.n
    for r, c, v in rsys.a_entries:
        au[r] = au[r] + v * prev[c]
    psi = convolution_term(rsys, coeffs, j - 1)
    return tuple((au[p] + psi[p]) / j for p in range(rsys.n))


def next_coefficient(sys: QuadSystem, coeffs: Sequence[Sequence[mpfr]]) -> Vector:
    """U_j given U_0..U_{j-1}."""
    if not coeffs:
        raise ValueError("need at least the initial coefficient U_0")
    ctx = context_of(coeffs)
    with ctx.local():
        return _next(sys.realize(ctx), coeffs)


def _truncate(rsys: RealizedSystem, x0: Vector, dtabs: mpfr, eps_pw: mpfr, max_degree: int) -> list[Vector]:
    coeffs: list[Vector] = [tuple(x0)]
    pw = mpfr(1)
    for j in range(1, max_degree + 1):
        u = _next(rsys, coeffs)
        coeffs.append(u)
        pw = pw * dtabs
        nrm = mpfr(0)
        for v in u:
            nrm = nrm + abs(v)
        if nrm * pw < eps_pw:
            return coeffs
    raise TruncationError(
        f"series tail above eps_pw={float(eps_pw):.3g} after {max_degree} terms; "
        "use a smaller step or a larger eps_pw"
    )


def truncate(sys: QuadSystem, x0: Sequence[mpfr], dt, eps_pw, max_degree: int = DEFAULT_MAX_DEGREE) -> SeriesState:
    """Expand at ``x0`` until ``|U_i|_1 * |dt|**i < eps_pw``; that i is the degree."""
    ctx = context_of(x0)
    with ctx.local():
        dtabs = abs(ctx.real(dt))
        eps = ctx.real(eps_pw)
        if not eps > 0:
            raise ValueError("eps_pw must be positive")
        coeffs = _truncate(sys.realize(ctx), tuple(x0), dtabs, eps, max_degree)
    return SeriesState(tuple(coeffs))


def _horner(coeffs: Sequence[Sequence[mpfr]], t: mpfr) -> Vector:
    m = len(coeffs) - 1
    out = []
    for p in range(len(coeffs[0])):
        acc = coeffs[m][p]
        for i in range(m - 1, -1, -1):
            acc = acc * t + coeffs[i][p]
        out.append(acc)
    return tuple(out)


def eval_poly(state: SeriesState, t) -> Vector:
    """Partial sum at ``t`` by Horner's rule, highest degree first."""
    ctx = context_of(state.coeffs)
    with ctx.local():
        return _horner(state.coeffs, ctx.real(t))
