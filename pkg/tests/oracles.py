"""Reference computations that avoid the code paths they check.

Taylor coefficients come from repeated Lie derivatives of polynomials with
exact rational coefficients: x^(j) = L^j(x) evaluated at x0, U_j = x^(j)/j!.
The tangent check uses only the plain integrator, never the variational
extension.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

Monomial = Tuple[int, ...]
Poly = Dict[Monomial, Fraction]


def _add(acc: Poly, mono: Monomial, c: Fraction) -> None:
    v = acc.get(mono, Fraction(0)) + c
    if v:
        acc[mono] = v
    else:
        acc.pop(mono, None)


def _mul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            _add(out, tuple(x + y for x, y in zip(ma, mb)), ca * cb)
    return out


def _diff(a: Poly, k: int) -> Poly:
    out: Poly = {}
    for m, c in a.items():
        if m[k]:
            d = list(m)
            d[k] -= 1
            _add(out, tuple(d), c * m[k])
    return out


def vector_field(A, Q) -> List[Poly]:
    """f_p(x) = sum_j A[p][j] x_j + sum_ij Q[p][i][j] x_i x_j as polynomials."""
    n = len(A)
    unit = [tuple(1 if i == k else 0 for i in range(n)) for k in range(n)]
    f = []
    for p in range(n):
        poly: Poly = {}
        for j in range(n):
            if A[p][j]:
                _add(poly, unit[j], Fraction(A[p][j]))
        for i in range(n):
            for j in range(n):
                if Q[p][i][j]:
                    _add(poly, tuple(a + b for a, b in zip(unit[i], unit[j])), Fraction(Q[p][i][j]))
        f.append(poly)
    return f


def _lie(g: Poly, f: List[Poly]) -> Poly:
    out: Poly = {}
    for k, fk in enumerate(f):
        for m, c in _mul(_diff(g, k), fk).items():
            _add(out, m, c)
    return out


def _evaluate(g: Poly, x: Sequence[Fraction]) -> Fraction:
    total = Fraction(0)
    for m, c in g.items():
        term = c
        for xi, e in zip(x, m):
            if e:
                term *= xi**e
        total += term
    return total


def taylor_coefficients(A, Q, x0: Sequence, degree: int) -> List[Tuple[Fraction, ...]]:
    """Exact U_0..U_degree of the solution through x0."""
    n = len(A)
    x0 = [Fraction(v) for v in x0]
    f = vector_field(A, Q)
    current = [{tuple(1 if i == k else 0 for i in range(n)): Fraction(1)} for k in range(n)]
    out = []
    for j in range(degree + 1):
        out.append(tuple(_evaluate(g, x0) / math.factorial(j) for g in current))
        current = [_lie(g, f) for g in current]
    return out


def abs_taylor_coefficients(A, Q, x0: Sequence, degree: int) -> List[Tuple[Fraction, ...]]:
    """Coefficients of the majorant system (all data replaced by absolute values)."""
    absA = [[abs(Fraction(v)) for v in row] for row in A]
    absQ = [[[abs(Fraction(v)) for v in row] for row in q] for q in Q]
    return taylor_coefficients(absA, absQ, [abs(Fraction(v)) for v in x0], degree)


def riccati(x0: float, t: Fraction) -> Fraction:
    """Solution of x' = x**2: x0 / (1 - x0 t)."""
    x0 = Fraction(x0)
    return x0 / (1 - x0 * t)


def tangent_errors(sys, points, bits=256, h="1e-20", tau="0.005", eps_pw="1e-60", seed=5) -> List[float]:
    """Relative gap between the propagated tangent and a one-sided difference quotient.

    At 256 bits a step of 1e-20 leaves a truncation error near 1e-20 and a
    rounding error near 1e-37 relative, far below the checked 1e-12.
    """
    from quadseries.fgbfi import IntegrationConfig, integrate
    from quadseries.lyapunov import BenettinConfig, init_perturbations, propagate_pair
    from quadseries.precision import make_context
    from quadseries.qsystem import extend_variational

    ctx = make_context(bits)
    cfg = BenettinConfig.create(bits, tau, 1, eps_pw=eps_pw)
    icfg = IntegrationConfig.create(bits, eps_pw, tau)
    ext = extend_variational(sys)
    dirs = init_perturbations(sys.n, seed, ctx)
    errs = []
    for k, x in enumerate(points):
        z = dirs[k % sys.n]
        _, zt = propagate_pair(ext, x, z, tau, cfg)
        with ctx.local():
            y = ctx.vector(x)
            hh = ctx.real(h)
            shifted = [a + hh * b for a, b in zip(y, z)]
        a = integrate(sys, y, icfg, record=False).final_state
        b = integrate(sys, shifted, icfg, record=False).final_state
        with ctx.local():
            fd = [(q - p) / hh for p, q in zip(a, b)]
            gap = math.sqrt(sum(float(u - v) ** 2 for u, v in zip(fd, zt)))
            size = math.sqrt(sum(float(v) ** 2 for v in zt))
        errs.append(gap / size)
    return errs
