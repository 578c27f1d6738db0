"""Step engines: a pure-Python reference and an adapter for the MPFR kernel.

Both expose the same small interface and produce bit-identical numbers; the
higher layers (integration, recurrence scans, Lyapunov spectra) never care
which one they drive.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import TruncationError
from .precision import PrecisionContext, from_hex, to_hex
from .qsystem import RealizedSystem, radius_from_norm, state_norm
from .series import _horner, _truncate

try:
    from . import _kernel
except ImportError:  # pragma: no cover - exercised only without a compiler
    _kernel = None

RUNNING, DONE, ESCAPED, TRUNCATION_FAILED = 0, 1, 2, 3

BACKEND_ENV = "QUADSERIES_BACKEND"


@dataclass(frozen=True)
class StepInfo:
    """Clock, last step and running statistics of a stepper."""

    status: int
    t: mpfr
    tstart: mpfr
    dt: mpfr
    dtabs: mpfr
    degree: int
    N: int
    n_max: int
    l_max: int
    d_max: int
    dtabs_max: mpfr
    t_at_nmax: mpfr
    t_at_dtmax: mpfr
    l_max_last: int
    t_at_nmax_last: mpfr


def _truncation_error(eps: mpfr, max_degree: int) -> TruncationError:
    return TruncationError(
        f"series tail above eps_pw={float(eps):.3g} after {max_degree} terms; "
        "use a smaller step or a larger eps_pw"
    )


class PyStepper:
    """Reference implementation of the certified-step loop."""

    backend = "python"

    def __init__(self, rsys: RealizedSystem, eps_pw: mpfr, delta: mpfr, max_degree: int, ball_dims: int):
        self.rsys = rsys
        self.ctx = rsys.ctx
        self.n = rsys.n
        self.eps = eps_pw
        self.delta = delta
        self.max_degree = max_degree
        self.ball_dims = ball_dims
        self.center = rsys.center[:ball_dims]
        self.r2 = rsys.radius2
        self.status = DONE
        self.way = 1
        z = mpfr(0, self.ctx.mantissa_bits)
        self.T = z
        self.x: tuple[mpfr, ...] = ()
        self._reset_clock(z)

    def _reset_clock(self, z: mpfr) -> None:
        self.t = self.tstart = self.dt = self.dtabs = z
        self.dtabs_max = self.t_at_nmax = self.t_at_dtmax = self.t_at_nmax_last = z
        self.coeffs: list[tuple[mpfr, ...]] = [self.x] if self.x else []
        self.degree = 0
        self.N = self.n_max = self.l_max = self.l_max_last = self.d_max = 0

    def reset(self, x0: Sequence[mpfr], T: mpfr, way: int) -> None:
        if way not in (1, -1):
            raise ValueError("way must be +1 or -1")
        if len(x0) != self.n:
            raise ValueError(f"x0: expected {self.n} values")
        self.ctx.check(x0, T)
        self.x = tuple(x0)
        self.T = T
        self.way = way
        self._reset_clock(mpfr(0, self.ctx.mantissa_bits))
        self.status = RUNNING

    def _inside(self) -> bool:
        if not self.ball_dims:
            return True
        s = mpfr(0)
        for i in range(self.ball_dims):
            d = self.x[i] - self.center[i]
            s = s + d * d
        return s <= self.r2

    def step(self) -> int:
        if self.status != RUNNING:
            return self.status
        with self.ctx.local():
            _, tau = radius_from_norm(self.rsys, state_norm(self.x), self.delta)
            rem = self.T - self.t
            tstart = self.t
            final = False
            if tau > rem:
                dtabs, final = rem, True
            else:
                tnew = self.t + tau
                if tnew > self.T:
                    dtabs, final = rem, True
                else:
                    dtabs, final = tau, tnew == self.T
            dt = dtabs if self.way > 0 else -dtabs
            self.tstart = tstart
            try:
                coeffs = _truncate(self.rsys, self.x, dtabs, self.eps, self.max_degree)
            except TruncationError:
                raise _truncation_error(self.eps, self.max_degree) from None
            self.coeffs = coeffs
            self.degree = len(coeffs) - 1
            self.dt, self.dtabs = dt, dtabs
            self.x = _horner(coeffs, dt)
            self.t = self.T if final else tstart + dtabs
            self.N += 1
            signed_t = self.t if self.way > 0 else -self.t
            if self.N == 1 or self.degree > self.n_max:
                self.n_max, self.l_max, self.t_at_nmax = self.degree, self.N, signed_t
            if self.degree == self.n_max:
                self.l_max_last, self.t_at_nmax_last = self.N, signed_t
            if self.N == 1 or dtabs > self.dtabs_max:
                self.dtabs_max, self.d_max, self.t_at_dtmax = dtabs, self.N, signed_t
            if not self._inside():
                self.status = ESCAPED
            elif final:
                self.status = DONE
        return self.status

    def run(self, max_steps: int = 0) -> int:
        k = 0
        while self.status == RUNNING and (max_steps <= 0 or k < max_steps):
            self.step()
            k += 1
        return self.status

    @property
    def state(self) -> tuple[mpfr, ...]:
        return self.x

    def info(self) -> StepInfo:
        return StepInfo(
            self.status, self.t, self.tstart, self.dt, self.dtabs, self.degree, self.N,
            self.n_max, self.l_max, self.d_max, self.dtabs_max, self.t_at_nmax, self.t_at_dtmax,
            self.l_max_last, self.t_at_nmax_last,
        )

    def coefficients(self) -> list[tuple[mpfr, ...]]:
        return list(self.coeffs)

    def eval(self, s: mpfr) -> tuple[mpfr, ...]:
        with self.ctx.local():
            return _horner(self.coeffs, s)

    def sample(self, k0: int, dtP: mpfr, k_last: int, origin: Sequence[mpfr] | None):
        out = []
        k = k0
        with self.ctx.local():
            while k <= k_last:
                tk = dtP * k
                if tk > self.t or (tk == self.t and self.status == RUNNING):
                    break
                off = tk - self.tstart
                if self.way < 0:
                    off = -off
                xs = _horner(self.coeffs, off)
                if origin is None:
                    out.append(xs)
                else:
                    s = mpfr(0)
                    for p in range(self.n):
                        d = xs[p] - origin[p]
                        s = s + d * d
                    out.append(gmpy2.sqrt(s))
                k += 1
        return k, out

    def scan(self, origin: Sequence[mpfr], dtP: mpfr, k_last: int, threshold: mpfr):
        """Run to the horizon reporting grid rapprochements with ``origin``.

        Returns ``(status, k_next, [(k, d_k), ...])`` for every interior grid
        index with ``d[k-1] > d[k] < d[k+1]`` and ``d[k] < threshold``.
        """
        events = []
        k = 0
        window: list[mpfr] = []
        with self.ctx.local():
            while self.status == RUNNING:
                self.step()
                while k <= k_last:
                    tk = dtP * k
                    if tk > self.t or (tk == self.t and self.status == RUNNING):
                        break
                    off = tk - self.tstart
                    xs = _horner(self.coeffs, -off if self.way < 0 else off)
                    s = mpfr(0)
                    for p in range(self.n):
                        d = xs[p] - origin[p]
                        s = s + d * d
                    window = window[-2:] + [gmpy2.sqrt(s)]
                    if len(window) == 3:
                        d0, d1, d2 = window
                        if d0 > d1 and d1 < d2 and d1 < threshold:
                            events.append((k - 1, d1))
                    k += 1
        return self.status, k, events


class KernelStepper:
    """Adapter converting between gmpy2 values and the compiled stepper."""

    backend = "mpfr-c"

    def __init__(self, rsys: RealizedSystem, eps_pw: mpfr, delta: mpfr, max_degree: int, ball_dims: int):
        self.rsys = rsys
        self.ctx: PrecisionContext = rsys.ctx
        self.n = rsys.n
        self.eps = eps_pw
        self.max_degree = max_degree
        h = to_hex
        self._k = _kernel.Stepper(
            self.ctx.mantissa_bits,
            rsys.n,
            [(i, j, h(v)) for i, j, v in rsys.a_entries],
            [(p, i, j, h(v)) for p, i, j, v in rsys.q_entries],
            h(rsys.mu), h(rsys.c1), h(rsys.h2low), h(delta), h(eps_pw),
            max_degree,
            [h(c) for c in rsys.center[:ball_dims]],
            h(rsys.radius2),
        )

    def _real(self, text: str) -> mpfr:
        return from_hex(text, self.ctx)

    def _check(self, status: int) -> int:
        if status == TRUNCATION_FAILED:
            raise _truncation_error(self.eps, self.max_degree)
        return status

    def reset(self, x0: Sequence[mpfr], T: mpfr, way: int) -> None:
        if len(x0) != self.n:
            raise ValueError(f"x0: expected {self.n} values")
        self.ctx.check(x0, T)
        self._k.reset([to_hex(v) for v in x0], to_hex(T), way)

    def step(self) -> int:
        return self._check(self._k.step())

    def run(self, max_steps: int = 0) -> int:
        return self._check(self._k.run(max_steps))

    @property
    def status(self) -> int:
        return self._k.info()["status"]

    @property
    def state(self) -> tuple[mpfr, ...]:
        return tuple(self._real(v) for v in self._k.state())

    def info(self) -> StepInfo:
        d = self._k.info()
        r = self._real
        return StepInfo(
            d["status"], r(d["t"]), r(d["tstart"]), r(d["dt"]), r(d["dtabs"]), d["degree"], d["N"],
            d["n_max"], d["l_max"], d["d_max"], r(d["dtabs_max"]), r(d["t_at_nmax"]), r(d["t_at_dtmax"]),
            d["l_max_last"], r(d["t_at_nmax_last"]),
        )

    def coefficients(self) -> list[tuple[mpfr, ...]]:
        return [tuple(self._real(v) for v in row) for row in self._k.coefficients()]

    def eval(self, s: mpfr) -> tuple[mpfr, ...]:
        return tuple(self._real(v) for v in self._k.eval(to_hex(s)))

    def sample(self, k0: int, dtP: mpfr, k_last: int, origin: Sequence[mpfr] | None):
        org = None if origin is None else [to_hex(v) for v in origin]
        k, raw = self._k.sample(k0, to_hex(dtP), k_last, org)
        r = self._real
        if origin is None:
            return k, [tuple(r(v) for v in row) for row in raw]
        return k, [r(v) for v in raw]

    def scan(self, origin: Sequence[mpfr], dtP: mpfr, k_last: int, threshold: mpfr):
        status, k, raw = self._k.scan([to_hex(v) for v in origin], to_hex(dtP), k_last, to_hex(threshold))
        self._check(status)
        return status, k, [(i, self._real(d)) for i, d in raw]


def _py_max_distance(coarse: PyStepper, fine: PyStepper, interior: int):
    gap = mpfr(0, coarse.ctx.mantissa_bits)
    with coarse.ctx.local():
        while coarse.status == RUNNING:
            if coarse.step() == ESCAPED:
                break
            for i in range(1, interior + 2):
                if i <= interior:
                    off = coarse.dtabs * i / (interior + 1)
                    u = coarse.tstart + off
                    xc = _horner(coarse.coeffs, off if coarse.way > 0 else -off)
                else:
                    u, xc = coarse.t, coarse.x
                while fine.status == RUNNING and fine.t < u:
                    fine.step()
                if fine.status == ESCAPED or fine.N == 0:
                    return gap, coarse.status, fine.status
                at = u - fine.tstart
                xf = _horner(fine.coeffs, at if fine.way > 0 else -at)
                dist = mpfr(0)
                for p in range(coarse.n):
                    dist = dist + abs(xc[p] - xf[p])
                if dist > gap:
                    gap = dist
    return gap, coarse.status, fine.status


def max_distance(coarse, fine, interior: int = 10):
    """Largest 1-norm gap between two runs sampled on the coarse run's steps.

    Both steppers must be freshly reset on the same problem; each is run to
    completion.  Returns ``(gap, coarse_status, fine_status)``.
    """
    if isinstance(coarse, KernelStepper) and isinstance(fine, KernelStepper):
        gap, cst, fst = _kernel.max_distance(coarse._k, fine._k, interior)
        coarse._check(cst)
        fine._check(fst)
        return from_hex(gap, coarse.ctx), cst, fst
    if isinstance(coarse, PyStepper) and isinstance(fine, PyStepper):
        return _py_max_distance(coarse, fine, interior)
    raise TypeError("both steppers must use the same backend")


def kernel_available() -> bool:
    return _kernel is not None


def default_backend() -> str:
    choice = os.environ.get(BACKEND_ENV, "auto").lower()
    if choice == "python" or (choice == "auto" and _kernel is None):
        return "python"
    if _kernel is None:
        raise RuntimeError("the compiled MPFR kernel is not available")
    return "mpfr-c"


def make_stepper(rsys: RealizedSystem, eps_pw: mpfr, delta: mpfr, max_degree: int,
                 ball_dims: int | None = None, backend: str | None = None):
    """Build a stepper; ``ball_dims`` limits the ball test to leading coordinates."""
    dims = rsys.n if ball_dims is None else ball_dims
    backend = backend or default_backend()
    cls = {"python": PyStepper, "mpfr-c": KernelStepper}.get(backend)
    if cls is None:
        raise ValueError(f"unknown backend {backend!r}")
    if cls is KernelStepper and _kernel is None:
        raise RuntimeError("the compiled MPFR kernel is not available")
    return cls(rsys, eps_pw, delta, max_degree, dims)
