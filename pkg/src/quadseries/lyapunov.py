"""Lyapunov spectrum by repeated propagation and Gram-Schmidt renormalization.

Every macro-step of length ``tau_M`` integrates the variational extension
once per perturbation vector, starting from the shared base state, then
re-orthonormalizes the perturbations and accumulates the logarithms of the
residual lengths.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .errors import BallEscapeError, DegeneracyError, QuadSeriesError
from .fgbfi import EPS_MARGIN, ESCAPE_ADVICE, IntegrationConfig
from .precision import PrecisionContext, make_context
from .qsystem import DEFAULT_DELTA, QuadSystem, extend_variational
from .series import DEFAULT_MAX_DEGREE
from .stepper import ESCAPED, make_stepper

Vector = tuple[mpfr, ...]


@dataclass(frozen=True)
class BenettinConfig:
    """Horizon ``T`` split into ``M`` macro-steps of length ``tau_M = T/M``."""

    context: PrecisionContext
    T: mpfr
    M: int
    seed: int = 1
    eps_pw: mpfr = None
    delta: mpfr = None
    max_degree: int = DEFAULT_MAX_DEGREE

    def __post_init__(self) -> None:
        ctx = self.context
        if isinstance(self.M, bool) or not isinstance(self.M, int) or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M!r}")
        object.__setattr__(self, "T", ctx.real(self.T))
        object.__setattr__(self, "eps_pw", ctx.real("1e-20" if self.eps_pw is None else self.eps_pw))
        object.__setattr__(self, "delta", ctx.real(DEFAULT_DELTA if self.delta is None else self.delta))
        if not self.T > 0:
            raise ValueError("T must be positive")
        with ctx.local():
            tau = self.T / self.M
            if tau * self.M != self.T:
                raise ValueError(
                    f"T/M is not exact enough at {ctx.mantissa_bits} bits (tau_M*M != T); "
                    "choose T and M with a representable ratio"
                )
        object.__setattr__(self, "_tau", tau)
        # reuse the integration checks on eps_pw and delta
        self.integration()

    @classmethod
    def create(cls, mantissa_bits: int = 128, T="100", M: int = 20000, seed: int = 1,
               eps_pw="1e-20", delta=DEFAULT_DELTA, max_degree: int = DEFAULT_MAX_DEGREE) -> BenettinConfig:
        ctx = make_context(mantissa_bits)
        return cls(ctx, ctx.real(T), M, seed, ctx.real(eps_pw), ctx.real(delta), max_degree)

    @property
    def tau_M(self) -> mpfr:
        return self._tau

    def integration(self) -> IntegrationConfig:
        return IntegrationConfig(self.context, self.eps_pw, self._tau, 1, self.delta, self.max_degree)


def _dot(u: Sequence[mpfr], v: Sequence[mpfr]) -> mpfr:
    s = mpfr(0)
    for a, b in zip(u, v):
        s = s + a * b
    return s


def gram_deviation(Z: Sequence[Sequence[mpfr]]) -> mpfr:
    """Largest entry of |Z Z^T - I|."""
    ctx_bits = Z[0][0].precision
    with make_context(ctx_bits).local():
        worst = mpfr(0)
        for i in range(len(Z)):
            for j in range(i, len(Z)):
                g = _dot(Z[i], Z[j])
                dev = abs(g - 1) if i == j else abs(g)
                if dev > worst:
                    worst = dev
    return worst


def _orthonormalize(ctx: PrecisionContext, Z: Sequence[Sequence[mpfr]]):
    """Classical Gram-Schmidt in index order; returns (vectors, residual norms)."""
    floor = ctx.machine_epsilon * EPS_MARGIN
    out: list[Vector] = []
    norms: list[mpfr] = []
    for p, z in enumerate(Z):
        coef = [_dot(z, e) for e in out]
        s = list(z)
        for c, e in zip(coef, out):
            s = [si - c * ei for si, ei in zip(s, e)]
        length = gmpy2.sqrt(_dot(s, s))
        if length < floor:
            raise DegeneracyError(
                f"perturbation {p + 1} collapsed (|S|={float(length):.3g}); "
                "use a larger mantissa width or a shorter macro-step"
            )
        out.append(tuple(v / length for v in s))
        norms.append(length)
    return out, norms


def gram_schmidt_step(Z: Sequence[Sequence[mpfr]], sums: Sequence[mpfr]):
    """Orthonormalize ``Z`` and add log|S_p| to ``sums[p]``."""
    ctx = make_context(Z[0][0].precision)
    with ctx.local():
        out, norms = _orthonormalize(ctx, Z)
        new = [s + gmpy2.log(r) for s, r in zip(sums, norms)]
    return out, new


def init_perturbations(n: int, seed: int, ctx: PrecisionContext) -> list[Vector]:
    """``n`` orthonormal vectors from uniform [0, 1] draws of a seeded generator."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    last = None
    for _ in range(2):
        draw = rng.random((n, n))
        with ctx.local():
            Z = [tuple(ctx.real(float(v)) for v in row) for row in draw]
            try:
                return _orthonormalize(ctx, Z)[0]
            except DegeneracyError as exc:
                last = exc
    raise DegeneracyError(f"random perturbations were rank-deficient twice: {last}")


class _Propagator:
    """One reusable stepper on the extension; the ball test covers the base block only."""

    def __init__(self, ext: QuadSystem, n: int, cfg: BenettinConfig, backend: str | None):
        self.n = n
        self.cfg = cfg
        rsys = ext.realize(cfg.context)
        self.st = make_stepper(rsys, cfg.eps_pw, cfg.delta, cfg.max_degree, n, backend)

    def __call__(self, Y: Sequence[mpfr], Z: Sequence[mpfr]) -> tuple[Vector, Vector]:
        self.st.reset(tuple(Y) + tuple(Z), self.cfg.tau_M, 1)
        if self.st.run() == ESCAPED:
            raise BallEscapeError(f"base state left the trapping ball. {ESCAPE_ADVICE}")
        out = self.st.state
        return out[: self.n], out[self.n:]


def propagate_pair(ext: QuadSystem, Y: Sequence, Z_p: Sequence, tau_M, cfg: BenettinConfig,
                   backend: str | None = None) -> tuple[Vector, Vector]:
    """Integrate the extension from ``(Y, Z_p)`` over ``tau_M`` and split the result."""
    n = len(Y)
    if ext.n != 2 * n or len(Z_p) != n:
        raise ValueError("Y and Z_p must each have half the extension's dimension")
    ctx = cfg.context
    step_cfg = cfg if ctx.real(tau_M) == cfg.tau_M else BenettinConfig(
        ctx, ctx.real(tau_M), 1, cfg.seed, cfg.eps_pw, cfg.delta, cfg.max_degree)
    prop = _Propagator(ext, n, step_cfg, backend)
    return prop([ctx.real(v) for v in Y], [ctx.real(v) for v in Z_p])


@dataclass(frozen=True)
class LyapunovRun:
    config: BenettinConfig
    exponents: tuple[mpfr, ...]
    sums: tuple[mpfr, ...]
    trace: tuple[tuple[mpfr, ...], ...]
    final_state: Vector
    final_perturbations: tuple[Vector, ...]
    max_gram_deviation: mpfr
    max_base_spread: mpfr

    @property
    def sorted_exponents(self) -> tuple[mpfr, ...]:
        return tuple(sorted(self.exponents, reverse=True))

    def running(self, k: int) -> tuple[mpfr, ...]:
        """Running estimate after macro-step ``k`` (1-based)."""
        return self.trace[k - 1]


def lyapunov_spectrum(sys: QuadSystem, x_star: Sequence, cfg: BenettinConfig, *,
                      backend: str | None = None, workers: int = 1,
                      progress: Callable[[int, int], None] | None = None) -> LyapunovRun:
    """Exponents in production order plus the running estimates after each macro-step.

    With ``workers > 1`` the n propagations of a macro-step run on a thread
    pool (the compiled kernel releases the GIL); results do not depend on it.

    ``max_base_spread`` records how far apart (1-norm) the n copies of the
    base state end up after a macro-step; they differ only through the
    perturbation-dependent step sizes.
    """
    n = sys.n
    ctx = cfg.context
    if len(x_star) != n:
        raise ValueError(f"x_star has {len(x_star)} coordinates, system has {n}")
    ext = extend_variational(sys)
    props = [_Propagator(ext, n, cfg, backend) for _ in range(n)]
    pool = ThreadPoolExecutor(min(workers, n)) if workers > 1 else None
    Y = tuple(ctx.real(v) for v in x_star)
    Z = init_perturbations(n, cfg.seed, ctx)
    zero = mpfr(0, ctx.mantissa_bits)
    sums = [zero] * n
    trace = []
    gram_worst = gram_deviation(Z)
    spread = zero
    tau = cfg.tau_M
    for k in range(1, cfg.M + 1):
        try:
            if pool is None:
                moved = [props[p](Y, Z[p]) for p in range(n)]
            else:
                moved = list(pool.map(lambda p: props[p](Y, Z[p]), range(n)))
            with ctx.local():
                for y, _ in moved[:-1]:
                    d = mpfr(0)
                    for a, b in zip(y, moved[-1][0]):
                        d = d + abs(a - b)
                    spread = max(spread, d)
                Z, norms = _orthonormalize(ctx, [z for _, z in moved])
                sums = [s + gmpy2.log(r) for s, r in zip(sums, norms)]
                elapsed = tau * k
                trace.append(tuple(s / elapsed for s in sums))
        except QuadSeriesError as exc:
            exc.args = (f"macro-step {k}: {exc}",) + exc.args[1:]
            if pool is not None:
                pool.shutdown()
            raise
        Y = moved[-1][0]
        gram_worst = max(gram_worst, gram_deviation(Z))
        if progress is not None:
            progress(k, cfg.M)
    if pool is not None:
        pool.shutdown()
    return LyapunovRun(
        config=cfg,
        exponents=trace[-1],
        sums=tuple(sums),
        trace=tuple(trace),
        final_state=Y,
        final_perturbations=tuple(Z),
        max_gram_deviation=gram_worst,
        max_base_spread=spread,
    )
