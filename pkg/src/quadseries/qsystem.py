"""Autonomous quadratic systems  X' = A X + Phi(X),  phi_p(X) = <Q_p X, X>.

A :class:`QuadSystem` holds its coefficients as exact rationals so that the
same definition can be realized at any mantissa width.  Arithmetic happens on
a :class:`RealizedSystem`, the rounding of a system into one precision context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

from gmpy2 import mpfr

from .errors import SystemFormatError
from .precision import PrecisionContext, context_of

Matrix = tuple[tuple[Fraction, ...], ...]

#: extra radius granted to the perturbation block of a variational extension
PERTURBATION_BOUND = Fraction(2)
DEFAULT_DELTA = "1e-3"


def exact(value: Any, where: str = "value") -> Fraction:
    """Exact rational from an int, decimal string, Fraction or binary float."""
    if isinstance(value, bool):
        raise SystemFormatError(f"{where}: booleans are not numbers")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(Decimal(value.strip()))
        except Exception:
            try:
                return Fraction(value.strip())
            except (ValueError, ZeroDivisionError):
                raise SystemFormatError(f"{where}: malformed number {value!r}") from None
    if isinstance(value, float):
        return Fraction(value)
    if isinstance(value, type(mpfr(0))):
        return Fraction(*value.as_integer_ratio())
    raise SystemFormatError(f"{where}: unsupported numeric type {type(value).__name__}")


def decimal_string(value: Fraction) -> str:
    """Exact decimal form of a rational whose denominator is 2**a * 5**b."""
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    if value.denominator == 1:
        return str(value.numerator)
    scale = max(twos, fives)
    digits = abs(value.numerator) * 10**scale // value.denominator
    text = str(digits).rjust(scale + 1, "0")
    body = (text[:-scale] + "." + text[-scale:]).rstrip("0").rstrip(".")
    return ("-" if value < 0 else "") + body


@dataclass(frozen=True)
class TrappingBall:
    center: tuple[Fraction, ...]
    radius: Fraction

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise SystemFormatError(f"ball radius must be positive, got {self.radius}")

    def contains(self, x: Sequence) -> bool:
        if len(x) != len(self.center):
            raise ValueError("dimension mismatch between point and ball")
        d2 = sum((exact(v) - c) ** 2 for v, c in zip(x, self.center))
        return d2 <= self.radius**2


@dataclass(frozen=True)
class QuadSystem:
    """Dimension ``n``, linear part ``A``, quadratic forms ``Q[0..n-1]`` and a trapping ball."""

    n: int
    A: Matrix
    Q: tuple[Matrix, ...]
    ball: TrappingBall
    name: str = ""
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        n = self.n
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise SystemFormatError(f"n must be a positive integer, got {n!r}")
        _check_square(self.A, n, "A")
        if len(self.Q) != n:
            raise SystemFormatError(
                f"Q: expected {n} quadratic matrices for n={n}, got {len(self.Q)}"
            )
        for p, q in enumerate(self.Q):
            _check_square(q, n, f"Q[{p}]")
        if len(self.ball.center) != n:
            raise SystemFormatError(
                f"ball.center: expected {n} coordinates, got {len(self.ball.center)}"
            )

    @classmethod
    def build(cls, A, Q, ball_center=None, ball_radius=1, name="", params=None) -> QuadSystem:
        """Convenience constructor accepting nested lists of numbers or decimal strings."""
        n = len(A)
        A_ = tuple(tuple(exact(v, f"A[{i}][{j}]") for j, v in enumerate(row)) for i, row in enumerate(A))
        Q_ = tuple(
            tuple(tuple(exact(v, f"Q[{p}][{i}][{j}]") for j, v in enumerate(row)) for i, row in enumerate(m))
            for p, m in enumerate(Q)
        )
        center = tuple(exact(v, "ball.center") for v in (ball_center or [0] * n))
        return cls(n, A_, Q_, TrappingBall(center, exact(ball_radius, "ball.radius")), name, dict(params or {}))

    # -- exact norms ------------------------------------------------------

    @cached_property
    def norm_A(self) -> Fraction:
        """Induced 1-norm: largest absolute column sum."""
        return _col_norm(self.A)

    @cached_property
    def mu(self) -> Fraction:
        return self.n * max(_col_norm(q) for q in self.Q)

    def realize(self, ctx: PrecisionContext) -> RealizedSystem:
        cache = self.__dict__.setdefault("_realized", {})
        if ctx.mantissa_bits not in cache:
            cache[ctx.mantissa_bits] = RealizedSystem(self, ctx)
        return cache[ctx.mantissa_bits]

    @property
    def is_linear(self) -> bool:
        return all(v == 0 for q in self.Q for row in q for v in row)


def _check_square(m, n: int, where: str) -> None:
    if len(m) != n:
        raise SystemFormatError(f"{where}: expected {n} rows, got {len(m)}")
    for i, row in enumerate(m):
        if len(row) != n:
            raise SystemFormatError(f"{where}[{i}]: expected {n} columns, got {len(row)} (matrix must be square)")


def _col_norm(m: Matrix) -> Fraction:
    n = len(m)
    return max(sum(abs(m[i][j]) for i in range(n)) for j in range(n))


class RealizedSystem:
    """A :class:`QuadSystem` rounded into one precision context.

    ``a_entries`` and ``q_entries`` list the non-zero coefficients in
    row-major order; every arithmetic routine walks them in that order.
    """

    def __init__(self, system: QuadSystem, ctx: PrecisionContext):
        self.system = system
        self.ctx = ctx
        self.n = system.n
        r = ctx.real
        self.a_entries = [
            (i, j, r(v)) for i, row in enumerate(system.A) for j, v in enumerate(row) if v != 0
        ]
        self.q_entries = [
            (p, i, j, r(v))
            for p, q in enumerate(system.Q)
            for i, row in enumerate(q)
            for j, v in enumerate(row)
            if v != 0
        ]
        self.norm_A = r(system.norm_A)
        self.mu = r(system.mu)
        # rounded once from the exact rational
        self.c1 = r(system.norm_A + 2 * system.mu)
        self.h2low = r(system.norm_A + system.mu)
        self.center = tuple(r(c) for c in system.ball.center)
        self.radius = r(system.ball.radius)
        self.radius2 = r(system.ball.radius**2)


@dataclass(frozen=True)
class ConvergenceBounds:
    norm_A: mpfr
    mu: mpfr
    h1: mpfr
    h2: mpfr
    tau: mpfr
    delta: mpfr


def state_norm(x: Sequence[mpfr]) -> mpfr:
    """1-norm, summed in index order."""
    h1 = mpfr(0)
    for v in x:
        h1 = h1 + abs(v)
    return h1


def radius_from_norm(rsys: RealizedSystem, h1: mpfr, delta: mpfr) -> tuple[mpfr, mpfr]:
    """(h2, tau) for a state of 1-norm ``h1``; caller holds the context."""
    if h1 > 1:
        h2 = rsys.mu * h1 * h1 + rsys.c1 * h1
    else:
        h2 = rsys.h2low
    return h2, 1 / (h2 + delta)


def compute_bounds(sys: QuadSystem, x0: Sequence[mpfr], delta=DEFAULT_DELTA) -> ConvergenceBounds:
    ctx = context_of(x0)
    if len(x0) != sys.n:
        raise ValueError(f"x0 has {len(x0)} coordinates, system has {sys.n}")
    with ctx.local():
        d = ctx.real(delta)
        if not d > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        rsys = sys.realize(ctx)
        h1 = state_norm(x0)
        h2, tau = radius_from_norm(rsys, h1, d)
    return ConvergenceBounds(rsys.norm_A, rsys.mu, h1, h2, tau, d)


def eval_rhs(sys: QuadSystem, x: Sequence[mpfr]) -> tuple[mpfr, ...]:
    """A x + Phi(x); bit-identical to the first Taylor coefficient at x."""
    if len(x) != sys.n:
        raise ValueError(f"x has {len(x)} coordinates, system has {sys.n}")
    ctx = context_of(x)
    with ctx.local():
        rsys = sys.realize(ctx)
        au = [mpfr(0)] * sys.n
        phi = [mpfr(0)] * sys.n
        for i, j, v in rsys.a_entries:
            au[i] = au[i] + v * x[j]
        for p, i, j, v in rsys.q_entries:
            phi[p] = phi[p] + v * (mpfr(0) + x[i] * x[j])
        return tuple(au[p] + phi[p] for p in range(sys.n))


def extend_variational(sys: QuadSystem) -> QuadSystem:
    """State plus tangent dynamics as one 2n-dimensional quadratic system.

    Coordinates n..2n-1 carry a perturbation Z; their equations are
    Z' = A Z + J_Phi(X) Z, written as quadratic forms that couple the state
    block (rows) with the perturbation block (columns).
    """
    n = sys.n
    zero = Fraction(0)
    A2 = [[zero] * (2 * n) for _ in range(2 * n)]
    for i in range(n):
        for j in range(n):
            A2[i][j] = sys.A[i][j]
            A2[n + i][n + j] = sys.A[i][j]
    Q2 = []
    for p in range(n):
        m = [[zero] * (2 * n) for _ in range(2 * n)]
        for i in range(n):
            for j in range(n):
                m[i][j] = sys.Q[p][i][j]
        Q2.append(m)
    for p in range(n):
        q = sys.Q[p]
        m = [[zero] * (2 * n) for _ in range(2 * n)]
        for i in range(n):
            for j in range(n):
                m[i][n + j] = q[i][j] + q[j][i]
        Q2.append(m)
    ball = TrappingBall(sys.ball.center + (zero,) * n, sys.ball.radius + PERTURBATION_BOUND)
    return QuadSystem(
        2 * n,
        tuple(map(tuple, A2)),
        tuple(tuple(map(tuple, m)) for m in Q2),
        ball,
        name=f"{sys.name} (variational)" if sys.name else "variational",
        params=dict(sys.params),
    )


# -- bundled systems ---------------------------------------------------------

DONG_PARAMS = {"a": "7", "b": "50", "c": "3", "d": "10", "e": "5", "f": "5", "k": "1.5"}


def dong_system(params: dict | None = None, radius="200") -> QuadSystem:
    """Four-dimensional dissipative system with nonlinearities x1*x3, x1*x2, x2*x3."""
    p = {**DONG_PARAMS, **(params or {})}
    a, b, c, d, e, f, k = (exact(p[s], s) for s in "abcdefk")
    z = 0
    A = [
        [-a, a, z, -e],
        [b, -1, z, -f],
        [z, z, -c, z],
        [z, z, z, -d],
    ]
    Q = [[[z] * 4 for _ in range(4)] for _ in range(4)]
    Q[1][0][2] = -1
    Q[2][0][1] = 1
    Q[3][1][2] = k
    return QuadSystem.build(A, Q, [0, 0, 0, 0], radius, name="dong2019", params={s: p[s] for s in "abcdefk"})


# -- file format -------------------------------------------------------------


def system_to_dict(sys: QuadSystem) -> dict:
    doc: dict[str, Any] = {}
    if sys.name:
        doc["name"] = sys.name
    doc["n"] = sys.n
    doc["A"] = [[decimal_string(v) for v in row] for row in sys.A]
    doc["Q"] = [[[decimal_string(v) for v in row] for row in q] for q in sys.Q]
    doc["ball"] = {
        "center": [decimal_string(v) for v in sys.ball.center],
        "radius": decimal_string(sys.ball.radius),
    }
    if sys.params:
        doc["params"] = sys.params
    return doc


def system_from_dict(doc: Any, source: str = "<system>") -> QuadSystem:
    def fail(msg: str) -> SystemFormatError:
        return SystemFormatError(f"{source}: {msg}")

    if not isinstance(doc, dict):
        raise fail("top level must be a JSON object")
    for key in ("n", "A", "Q", "ball"):
        if key not in doc:
            raise fail(f"missing required field {key!r}")
    n = doc["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise fail(f"field 'n' must be a positive integer, got {n!r}")

    def number(v, where):
        if isinstance(v, float):
            raise fail(f"{where}: binary floats are not allowed, use a decimal string")
        if not isinstance(v, (int, str)) or isinstance(v, bool):
            raise fail(f"{where}: expected a decimal string or integer, got {v!r}")
        try:
            return exact(v, where)
        except SystemFormatError as err:
            raise fail(str(err)) from None

    def matrix(m, where):
        if not isinstance(m, list):
            raise fail(f"{where}: expected an array of rows")
        if len(m) != n:
            raise fail(f"{where}: expected {n} rows for n={n}, got {len(m)}")
        rows = []
        for i, row in enumerate(m):
            if not isinstance(row, list):
                raise fail(f"{where}[{i}]: expected an array")
            if len(row) != n:
                raise fail(f"{where}[{i}]: expected {n} columns, got {len(row)} (matrix must be square)")
            rows.append(tuple(number(v, f"{where}[{i}][{j}]") for j, v in enumerate(row)))
        return tuple(rows)

    A = matrix(doc["A"], "A")
    if not isinstance(doc["Q"], list):
        raise fail("Q: expected an array of matrices")
    if len(doc["Q"]) != n:
        raise fail(f"Q: expected {n} quadratic matrices for n={n}, got {len(doc['Q'])}")
    Q = tuple(matrix(m, f"Q[{p}]") for p, m in enumerate(doc["Q"]))
    ball = doc["ball"]
    if not isinstance(ball, dict) or "center" not in ball or "radius" not in ball:
        raise fail("ball: expected an object with 'center' and 'radius'")
    if not isinstance(ball["center"], list) or len(ball["center"]) != n:
        raise fail(f"ball.center: expected {n} coordinates")
    center = tuple(number(v, f"ball.center[{i}]") for i, v in enumerate(ball["center"]))
    radius = number(ball["radius"], "ball.radius")
    if radius <= 0:
        raise fail("ball.radius must be positive")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise fail("params: expected an object")
    name = doc.get("name", "")
    if not isinstance(name, str):
        raise fail("name: expected a string")
    return QuadSystem(n, A, Q, TrappingBall(center, radius), name, params)


def load_system(path) -> QuadSystem:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise SystemFormatError(f"{path}: cannot read system file ({err.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise SystemFormatError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
    return system_from_dict(doc, str(path))


def save_system(sys: QuadSystem, path) -> None:
    Path(path).write_text(json.dumps(system_to_dict(sys), indent=2) + "\n")


def bundled_system(name: str) -> QuadSystem:
    """Load one of the system files shipped in ``quadseries/data``."""
    from importlib.resources import files

    stem = name[:-5] if name.endswith(".json") else name
    resource = files("quadseries") / "data" / f"{stem}.json"
    if not resource.is_file():
        raise SystemFormatError(f"no bundled system named {name!r}")
    return system_from_dict(json.loads(resource.read_text()), f"bundled:{stem}.json")


__all__ = [
    "ConvergenceBounds",
    "QuadSystem",
    "RealizedSystem",
    "TrappingBall",
    "bundled_system",
    "compute_bounds",
    "dong_system",
    "eval_rhs",
    "extend_variational",
    "load_system",
    "save_system",
]
