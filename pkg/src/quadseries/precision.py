"""Configurable-mantissa real numbers on top of MPFR (via gmpy2).

Every numeric routine in the package runs inside a :class:`PrecisionContext`.
Scalars are plain ``gmpy2.mpfr`` values; the context fixes their mantissa
width and the rounding mode (round-to-nearest-even), and refuses operands
created at a different width.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import PrecisionError

MIN_MANTISSA_BITS = 24

_DECIMAL_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


@dataclass(frozen=True)
class PrecisionContext:
    """A mantissa width ``mantissa_bits`` and everything derived from it."""

    mantissa_bits: int

    def __post_init__(self) -> None:
        if isinstance(self.mantissa_bits, bool) or not isinstance(self.mantissa_bits, int):
            raise PrecisionError(f"mantissa_bits must be an integer, got {self.mantissa_bits!r}")
        if self.mantissa_bits < MIN_MANTISSA_BITS:
            raise PrecisionError(
                f"mantissa_bits={self.mantissa_bits} gives insufficient precision; "
                f"at least {MIN_MANTISSA_BITS} bits are required"
            )

    @property
    def machine_epsilon(self) -> mpfr:
        """2**(1 - mantissa_bits), exact."""
        return gmpy2.mul_2exp(mpfr(1, self.mantissa_bits), 1 - self.mantissa_bits)

    @property
    def decimal_digits(self) -> int:
        """Significant digits that guarantee an exact decimal round trip."""
        return math.ceil(self.mantissa_bits * math.log10(2)) + 1

    def gmpy_context(self) -> gmpy2.context:
        return gmpy2.context(
            precision=self.mantissa_bits,
            round=gmpy2.RoundToNearest,
            subnormalize=False,
        )

    def local(self) -> gmpy2.context:
        """Context manager making this precision current for gmpy2 arithmetic."""
        return self.gmpy_context()

    def real(self, value) -> mpfr:
        """Round ``value`` (str, int, Fraction, mpfr of the same width) into this context."""
        if isinstance(value, str):
            return parse_decimal(value, self)
        if isinstance(value, bool):
            raise TypeError("booleans are not reals")
        if isinstance(value, int):
            return mpfr(value, self.mantissa_bits)
        if isinstance(value, Fraction):
            return mpfr(gmpy2.mpq(value.numerator, value.denominator), self.mantissa_bits)
        if isinstance(value, float):
            # binary64 values are exact at >= 53 bits; below that they are rounded once
            return mpfr(value, self.mantissa_bits)
        if type(value) is type(mpfr(0)):
            if value.precision != self.mantissa_bits:
                raise PrecisionError(
                    f"value carries {value.precision} bits, context expects {self.mantissa_bits}"
                )
            return value
        raise TypeError(f"cannot convert {type(value).__name__} to a real")

    def vector(self, values: Iterable) -> tuple[mpfr, ...]:
        return tuple(self.real(v) for v in values)

    def check(self, *values) -> None:
        """Raise :class:`PrecisionError` if any mpfr operand has a foreign width."""
        for v in _flatten(values):
            if v.precision != self.mantissa_bits:
                raise PrecisionError(
                    f"mixed-precision operands: {v.precision} bits in a "
                    f"{self.mantissa_bits}-bit context"
                )


def _flatten(values) -> Iterable[mpfr]:
    for v in values:
        if isinstance(v, (list, tuple)):
            yield from _flatten(v)
        else:
            yield v


def make_context(mantissa_bits: int) -> PrecisionContext:
    return PrecisionContext(mantissa_bits)


def context_of(values: Sequence[mpfr]) -> PrecisionContext:
    """Infer the context of a non-empty collection of mpfr values."""
    flat = list(_flatten(values))
    if not flat:
        raise PrecisionError("cannot infer precision from an empty collection")
    ctx = PrecisionContext(flat[0].precision)
    ctx.check(flat)
    return ctx


def parse_decimal(text: str, ctx: PrecisionContext) -> mpfr:
    """Correctly rounded value of a decimal numeral at ``ctx`` precision."""
    s = text.strip() if isinstance(text, str) else text
    if not isinstance(s, str) or not _DECIMAL_RE.match(s):
        raise ValueError(f"malformed decimal numeral: {text!r}")
    return mpfr(s, ctx.mantissa_bits)


def format_decimal(value: mpfr) -> str:
    """Decimal string that parses back to exactly ``value`` at its own width."""
    if gmpy2.is_zero(value):
        return "-0" if gmpy2.is_signed(value) else "0"
    if not gmpy2.is_finite(value):
        raise ValueError(f"non-finite value {value!r} has no decimal form")
    ndigits = math.ceil(value.precision * math.log10(2)) + 1
    mant, exp, _ = value.digits(10, ndigits)
    sign = ""
    if mant.startswith("-"):
        sign, mant = "-", mant[1:]
    mant = mant.rstrip("0") or "0"
    # value = 0.mant * 10**exp
    point = exp
    if -5 < point <= 21:
        if point <= 0:
            body = "0." + "0" * (-point) + mant
        elif point >= len(mant):
            body = mant + "0" * (point - len(mant))
        else:
            body = mant[:point] + "." + mant[point:]
        return sign + body
    body = mant[0] + ("." + mant[1:] if len(mant) > 1 else "")
    return f"{sign}{body}e{point - 1:+d}"


def to_hex(value: mpfr) -> str:
    """Exact hexadecimal form, used to hand values to the compiled kernel."""
    return format(value, "a")


def from_hex(text: str, ctx: PrecisionContext) -> mpfr:
    return mpfr(text, ctx.mantissa_bits, 16)
