"""Forward/backward integration with a certified step, plus accuracy checks.

Each step expands the solution in a Taylor series at the current state,
takes the step ``tau = 1/(h2 + delta)`` inside the guaranteed convergence
radius (clipped so the run lands exactly on ``T``), truncates the series by
the tail criterion and moves to the polynomial's value at the step end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

from gmpy2 import mpfr

from .errors import BallEscapeError, PrecisionError
from .precision import PrecisionContext, make_context
from .qsystem import DEFAULT_DELTA, QuadSystem, exact
from .series import DEFAULT_MAX_DEGREE
from .stepper import ESCAPED, RUNNING, make_stepper, max_distance

ESCAPE_ADVICE = "Decrease the value ε_pw and/or ε_m"

EPS_MARGIN = 10**6


@dataclass(frozen=True)
class IntegrationConfig:
    """Numerical parameters of one run.

    ``eps_pw`` must stay well above the machine epsilon: the constructor
    enforces ``eps_pw >= 1e6 * eps_m``.
    """

    context: PrecisionContext
    eps_pw: mpfr
    T: mpfr
    way: int = 1
    delta: mpfr = None
    max_degree: int = DEFAULT_MAX_DEGREE

    def __post_init__(self) -> None:
        ctx = self.context
        if self.delta is None:
            object.__setattr__(self, "delta", ctx.real(DEFAULT_DELTA))
        for name in ("eps_pw", "T", "delta"):
            object.__setattr__(self, name, ctx.real(getattr(self, name)))
        if self.way not in (1, -1):
            raise ValueError(f"way must be +1 or -1, got {self.way}")
        if self.T < 0:
            raise ValueError("T must be non-negative; use way=-1 to integrate backward")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_degree < 1:
            raise ValueError("max_degree must be at least 1")
        with ctx.local():
            floor = ctx.machine_epsilon * EPS_MARGIN
        if self.eps_pw < floor:
            raise PrecisionError(
                f"eps_pw={float(self.eps_pw):.3g} is too close to the machine epsilon "
                f"({float(ctx.machine_epsilon):.3g} at {ctx.mantissa_bits} bits); "
                "raise the mantissa width or loosen eps_pw"
            )

    @classmethod
    def create(cls, mantissa_bits: int = 128, eps_pw="1e-20", T="1", way: int = 1,
               delta=DEFAULT_DELTA, max_degree: int = DEFAULT_MAX_DEGREE) -> IntegrationConfig:
        ctx = make_context(mantissa_bits)
        return cls(ctx, ctx.real(eps_pw), ctx.real(T), way, ctx.real(delta), max_degree)

    def replace(self, **changes) -> IntegrationConfig:
        vals = dict(context=self.context, eps_pw=self.eps_pw, T=self.T, way=self.way,
                    delta=self.delta, max_degree=self.max_degree)
        vals.update(changes)
        return IntegrationConfig(**vals)


@dataclass(frozen=True)
class StepRecord:
    """One step; times are signed (``way * t``)."""

    t_start: mpfr
    t_end: mpfr
    dt: mpfr
    degree: int
    state: tuple[mpfr, ...]


@dataclass(frozen=True)
class ArcStats:
    """Step count, largest degree and largest step with their 1-based indices and end times.

    ``l_max`` is the first step reaching the largest degree and
    ``l_max_last`` the last one; long runs usually reach it many times.
    """

    N: int
    n_max: int
    l_max: int
    dt_max: mpfr
    d_max: int
    t_at_nmax: mpfr
    t_at_dtmax: mpfr
    l_max_last: int = 0
    t_at_nmax_last: mpfr = None

    @property
    def t_mid_nmax(self) -> mpfr:
        """Midpoint of the first and last times at the largest degree; invariant under reversal."""
        last = self.t_at_nmax if self.t_at_nmax_last is None else self.t_at_nmax_last
        with make_context(self.t_at_nmax.precision).local():
            return (self.t_at_nmax + last) / 2


@dataclass(frozen=True)
class TrajectoryArc:
    x0: tuple[mpfr, ...]
    direction: int
    T: mpfr
    steps: tuple[StepRecord, ...]
    stats: ArcStats
    final_state: tuple[mpfr, ...]
    final_time: mpfr
    escaped_ball: bool = False
    message: str = ""

    @property
    def endpoint(self) -> tuple[mpfr, ...]:
        return self.final_state

    def raise_if_escaped(self) -> TrajectoryArc:
        if self.escaped_ball:
            raise BallEscapeError(self.message, arc=self)
        return self


def _prepare(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig):
    ctx = cfg.context
    if len(x0) != sys.n:
        raise ValueError(f"x0 has {len(x0)} coordinates, system has {sys.n}")
    x = tuple(ctx.real(v) for v in x0)
    rsys = sys.realize(ctx)
    return rsys, x


def _inside(sys: QuadSystem, x, dims: int) -> bool:
    ball = sys.ball
    d2 = sum((Fraction(*v.as_integer_ratio()) - c) ** 2 for v, c in zip(x[:dims], ball.center))
    return d2 <= ball.radius**2


def _stats(info) -> ArcStats:
    return ArcStats(info.N, info.n_max, info.l_max, info.dtabs_max, info.d_max,
                    info.t_at_nmax, info.t_at_dtmax, info.l_max_last, info.t_at_nmax_last)


def _escape_message(t: mpfr) -> str:
    return f"trajectory left the trapping ball at t={float(t):.6g}. {ESCAPE_ADVICE}"


def _signed(t: mpfr, way: int) -> mpfr:
    # elapsed time -> way * t, keeping t = 0 unsigned
    return -t if way < 0 and t != 0 else t


def integrate(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, *, record: bool = True,
              on_step: Callable[[StepRecord], None] | None = None,
              grid=None, on_sample: Callable[[mpfr, tuple[mpfr, ...]], None] | None = None,
              ball_dims: int | None = None, backend: str | None = None) -> TrajectoryArc:
    """Integrate from ``x0`` over ``[0, way*T]``.

    With ``record`` the arc keeps every step; ``on_step`` receives each step as
    it is produced.  Leaving the trapping ball ends the arc early with
    ``escaped_ball`` set; call :meth:`TrajectoryArc.raise_if_escaped` to turn
    that into an exception.

    With ``grid`` (a positive spacing ``h``) the local polynomials are also
    evaluated at ``t = way * k * h`` for ``k = 0 .. floor(T/h)`` and each
    sample is passed to ``on_sample(t, X)``.
    """
    rsys, x = _prepare(sys, x0, cfg)
    ctx = cfg.context
    if grid is not None:
        h = ctx.real(grid)
        if not h > 0:
            raise ValueError("grid spacing must be positive")
        k_last = math.floor(exact(cfg.T) / exact(grid, "grid"))
        k_next = 0
    dims = sys.n if ball_dims is None else ball_dims
    if dims and not _inside(sys, x, dims):
        raise ValueError("x0 lies outside the trapping ball")
    st = make_stepper(rsys, cfg.eps_pw, cfg.delta, cfg.max_degree, dims, backend)
    st.reset(x, cfg.T, cfg.way)
    steps: list[StepRecord] = []
    if record or on_step is not None or grid is not None:
        while st.status == RUNNING:
            st.step()
            info = st.info()
            if grid is not None:
                k0 = k_next
                k_next, rows = st.sample(k0, h, k_last, None)
                if on_sample is not None:
                    with ctx.local():
                        for i, row in enumerate(rows):
                            t = h * (k0 + i)
                            on_sample(_signed(t, cfg.way), row)
            rec = StepRecord(
                _signed(info.tstart, cfg.way),
                _signed(info.t, cfg.way),
                info.dt,
                info.degree,
                st.state,
            )
            if record:
                steps.append(rec)
            if on_step is not None:
                on_step(rec)
    else:
        st.run()
    info = st.info()
    escaped = info.status == ESCAPED
    if grid is not None and not escaped and k_next == k_last and on_sample is not None:
        # k_last * h rounded just past T; the end point is that sample
        on_sample(_signed(cfg.T, cfg.way), st.state)
    t_end = _signed(info.t, cfg.way)
    return TrajectoryArc(
        x0=x,
        direction=cfg.way,
        T=cfg.T,
        steps=tuple(steps),
        stats=_stats(info),
        final_state=st.state,
        final_time=t_end,
        escaped_ball=escaped,
        message=_escape_message(t_end) if escaped else "",
    )


def distance_1(a: Sequence[mpfr], b: Sequence[mpfr]) -> mpfr:
    s = mpfr(0)
    for u, v in zip(a, b):
        s = s + abs(u - v)
    return s


@dataclass(frozen=True)
class ForwardCheck:
    passed: bool
    delta_a: mpfr
    eps_a: mpfr
    eps_pw: mpfr
    eps_pw_fine: mpfr
    message: str = ""


def tightened_tolerance(cfg: IntegrationConfig) -> mpfr:
    """The larger of ``eps_pw**2`` and ``eps_pw * 1e-5``; must clear ``1e6 * eps_m``."""
    ctx = cfg.context
    with ctx.local():
        fine = max(cfg.eps_pw * cfg.eps_pw, cfg.eps_pw * ctx.real("1e-5"))
        floor = ctx.machine_epsilon * EPS_MARGIN
    if fine < floor:
        raise PrecisionError(
            f"tightened tolerance {float(fine):.3g} is not attainable at "
            f"{ctx.mantissa_bits} bits; raise the mantissa width"
        )
    return fine


def verify_forward(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, eps_a, *,
                   interior: int = 10, backend: str | None = None) -> ForwardCheck:
    """Compare the run at ``eps_pw`` with one at a tighter tolerance (higher degrees).

    The gap ``delta_a`` is the largest 1-norm distance over the coarse run's
    step ends and ``interior`` evenly spaced points inside each step.
    """
    if cfg.way != 1:
        raise ValueError("verify_forward expects a forward configuration (way=+1)")
    ctx = cfg.context
    eps_a = ctx.real(eps_a)
    fine_eps = tightened_tolerance(cfg)
    rsys, x = _prepare(sys, x0, cfg)
    coarse = make_stepper(rsys, cfg.eps_pw, cfg.delta, cfg.max_degree, sys.n, backend)
    fine = make_stepper(rsys, fine_eps, cfg.delta, cfg.max_degree, sys.n, backend)
    coarse.reset(x, cfg.T, 1)
    fine.reset(x, cfg.T, 1)
    gap, cst, fst = max_distance(coarse, fine, interior)
    msg = ""
    if ESCAPED in (cst, fst):
        msg = f"a comparison run left the trapping ball. {ESCAPE_ADVICE}"
    passed = not msg and eps_a > 0 and gap <= eps_a
    return ForwardCheck(passed, gap, eps_a, cfg.eps_pw, fine_eps, msg)


@dataclass(frozen=True)
class BackwardCheck:
    passed: bool
    return_distance: mpfr | None
    eps_R: mpfr
    forward_arc: TrajectoryArc
    backward_arc: TrajectoryArc | None
    message: str = ""


def verify_backward(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, eps_R, *,
                    record: bool = False, backend: str | None = None) -> BackwardCheck:
    """Integrate forward over ``[0, T]``, then backward from the end point.

    Passes when the backward run returns within ``eps_R`` (1-norm) of ``x0``.
    """
    if cfg.way != 1:
        raise ValueError("verify_backward expects a forward configuration (way=+1)")
    eps_R = cfg.context.real(eps_R)
    fwd = integrate(sys, x0, cfg, record=record, backend=backend)
    if fwd.escaped_ball:
        return BackwardCheck(False, None, eps_R, fwd, None, "forward run: " + fwd.message)
    back = integrate(sys, fwd.final_state, cfg.replace(way=-1), record=record, backend=backend)
    with cfg.context.local():
        dist = distance_1(back.final_state, fwd.x0)
    if back.escaped_ball:
        return BackwardCheck(False, dist, eps_R, fwd, back, "backward run: " + back.message)
    return BackwardCheck(dist < eps_R, dist, eps_R, fwd, back)


@dataclass(frozen=True)
class ConfigurationCheck:
    name: str
    forward: object
    backward: object
    target: object
    passed: bool
    informational: bool = False


@dataclass(frozen=True)
class ConfigurationReport:
    checks: tuple[ConfigurationCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)


def _close(a, b, rel_tol) -> bool:
    a, b = float(a), float(b)
    return abs(a - b) <= rel_tol * max(abs(a), abs(b))


def compare_configurations(forward: ArcStats, backward: ArcStats, T, rel_tol: float = 0.05) -> ConfigurationReport:
    """Check that a forward arc and its backward return have matching shapes.

    The step at index ``l`` forward is met again near index ``N - l + 1``
    backward, so the index sum ``d_max(+) + d_max(-)`` is compared with ``N``
    as an informational check. The largest degree is usually reached on a
    plateau of many steps, so its time is taken as the plateau midpoint,
    which does not depend on the direction of travel.
    """
    T = float(T)
    out = [
        ConfigurationCheck("N", forward.N, backward.N, None, _close(forward.N, backward.N, rel_tol)),
        ConfigurationCheck("n_max", forward.n_max, backward.n_max, None,
                           _close(forward.n_max, backward.n_max, rel_tol)),
    ]
    for name, a, b in (
        ("t_at_nmax", forward.t_mid_nmax, backward.t_mid_nmax),
        ("t_at_dtmax", forward.t_at_dtmax, backward.t_at_dtmax),
    ):
        total = abs(float(a)) + abs(float(b))
        out.append(ConfigurationCheck(name + " sum", a, b, T, _close(total, T, rel_tol)))
    out.append(ConfigurationCheck(
        "d_max index sum (informational)", forward.d_max, backward.d_max, forward.N,
        _close(forward.d_max + backward.d_max, forward.N, rel_tol), informational=True,
    ))
    return ConfigurationReport(tuple(out))
