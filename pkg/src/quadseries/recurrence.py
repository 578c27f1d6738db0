"""Poincaré recurrences: returns of a trajectory close to its starting point.

The trajectory is sampled on the uniform grid ``t_k = k * dt_P`` by
evaluating each step's Taylor polynomial (dense output, no extra steps), and
a grid point counts as a rapprochement when its distance to the start is a
strict local minimum below a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import BallEscapeError
from .fgbfi import ESCAPE_ADVICE, IntegrationConfig, _prepare
from .precision import make_context
from .qsystem import QuadSystem, exact
from .stepper import ESCAPED, RUNNING, make_stepper

REGULARITY_CV = 0.01
REFINE_FACTOR = 10
REFINE_REL_CHANGE = 0.1
DEFAULT_MIN_DT = "1e-6"


@dataclass(frozen=True)
class RecurrenceScanConfig:
    """Grid step ``dt_P``, horizon ``T_P`` and rapprochement ceiling.

    Both times are kept as exact rationals, so the number of grid intervals
    ``floor(T_P / dt_P)`` does not depend on binary rounding.
    """

    dt_P: Fraction
    T_P: Fraction
    threshold: Fraction = Fraction(1)

    def __post_init__(self) -> None:
        for name in ("dt_P", "T_P", "threshold"):
            object.__setattr__(self, name, exact(getattr(self, name), name))
        if self.dt_P <= 0 or self.threshold <= 0:
            raise ValueError("dt_P and threshold must be positive")
        if not self.dt_P < self.T_P:
            raise ValueError("dt_P must be smaller than T_P")

    @property
    def N_P(self) -> int:
        return math.floor(self.T_P / self.dt_P)

    def with_step(self, dt_P) -> RecurrenceScanConfig:
        return RecurrenceScanConfig(dt_P, self.T_P, self.threshold)


@dataclass(frozen=True)
class RecurrenceEvent:
    t_star: mpfr
    d_star: mpfr
    k_star: int


@dataclass(frozen=True)
class GridTable:
    """Rows ``(t_k, X_k)`` for k = 0..N_P; row 0 is the start point itself."""

    times: tuple[mpfr, ...]
    states: tuple[tuple[mpfr, ...], ...]

    def __len__(self) -> int:
        return len(self.times)


def _grid(cfg: IntegrationConfig, scan: RecurrenceScanConfig):
    ctx = cfg.context
    dtP = ctx.real(scan.dt_P)
    with ctx.local():
        horizon = dtP * scan.N_P
    return dtP, horizon


def _arc_stepper(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, horizon: mpfr, backend):
    if cfg.way != 1:
        raise ValueError("recurrence scans run forward in time (way=+1)")
    rsys, x = _prepare(sys, x0, cfg)
    st = make_stepper(rsys, cfg.eps_pw, cfg.delta, cfg.max_degree, sys.n, backend)
    st.reset(x, horizon, 1)
    return st, x


def iter_grid(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, scan: RecurrenceScanConfig, *,
              backend: str | None = None) -> Iterator[tuple[mpfr, tuple[mpfr, ...]]]:
    """Stream ``(t_k, X_k)`` without holding the whole table."""
    dtP, horizon = _grid(cfg, scan)
    st, _ = _arc_stepper(sys, x0, cfg, horizon, backend)
    k, last = 0, scan.N_P
    while st.status == RUNNING:
        st.step()
        k_next, rows = st.sample(k, dtP, last, None)
        with cfg.context.local():
            for i, row in enumerate(rows):
                yield dtP * (k + i), row
        k = k_next
    if st.status == ESCAPED:
        raise BallEscapeError(f"trajectory left the trapping ball during the scan. {ESCAPE_ADVICE}")


def sample_grid(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, scan: RecurrenceScanConfig, *,
                backend: str | None = None) -> GridTable:
    """Dense output of one forward arc on ``t_k = k * dt_P``, k = 0..N_P."""
    times, states = [], []
    for t, x in iter_grid(sys, x0, cfg, scan, backend=backend):
        times.append(t)
        states.append(x)
    return GridTable(tuple(times), tuple(states))


def _euclid(a: Sequence[mpfr], b: Sequence[mpfr]) -> mpfr:
    s = mpfr(0)
    for u, v in zip(a, b):
        d = u - v
        s = s + d * d
    return gmpy2.sqrt(s)


def distances(table: GridTable) -> list[mpfr]:
    """Euclidean distance of every row to row 0."""
    if not table.states:
        return []
    origin = table.states[0]
    with make_context(origin[0].precision).local():
        return [_euclid(x, origin) for x in table.states]


def scan_recurrences(table: GridTable, threshold=1) -> list[RecurrenceEvent]:
    """Interior rows whose distance to the start is a strict local minimum below ``threshold``."""
    d = distances(table)
    if len(d) < 3:
        return []
    thr = make_context(d[0].precision).real(threshold)
    return [
        RecurrenceEvent(table.times[k], d[k], k)
        for k in range(1, len(d) - 1)
        if d[k - 1] > d[k] and d[k] < d[k + 1] and d[k] < thr
    ]


def scan_trajectory(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, scan: RecurrenceScanConfig, *,
                    backend: str | None = None) -> list[RecurrenceEvent]:
    """Streaming equivalent of ``scan_recurrences(sample_grid(...))`` for long grids."""
    dtP, horizon = _grid(cfg, scan)
    st, x = _arc_stepper(sys, x0, cfg, horizon, backend)
    thr = cfg.context.real(scan.threshold)
    status, _, found = st.scan(x, dtP, scan.N_P, thr)
    if status == ESCAPED:
        raise BallEscapeError(f"trajectory left the trapping ball during the scan. {ESCAPE_ADVICE}")
    with cfg.context.local():
        return [RecurrenceEvent(dtP * k, d, k) for k, d in found]


@dataclass(frozen=True)
class ReturnStats:
    events: tuple[RecurrenceEvent, ...]
    intervals: tuple[mpfr, ...]
    mean_interval: mpfr | None
    stddev_interval: mpfr | None
    period_estimate: mpfr | None

    @property
    def variation(self) -> float | None:
        """Coefficient of variation of the return intervals."""
        if self.mean_interval is None or self.mean_interval == 0:
            return None
        return float(self.stddev_interval / self.mean_interval)

    @property
    def min_distance(self) -> mpfr | None:
        return min((e.d_star for e in self.events), default=None)


def return_statistics(events: Sequence[RecurrenceEvent], regularity: float = REGULARITY_CV) -> ReturnStats:
    """Intervals between returns, their mean and (population) standard deviation.

    A period is reported when the coefficient of variation is below ``regularity``.
    """
    events = tuple(events)
    if len(events) < 2:
        return ReturnStats(events, (), None, None, None)
    with make_context(events[0].t_star.precision).local():
        iv = tuple(b.t_star - a.t_star for a, b in zip(events, events[1:]))
        mean = sum(iv, mpfr(0)) / len(iv)
        var = sum(((v - mean) ** 2 for v in iv), mpfr(0)) / len(iv)
        sd = gmpy2.sqrt(var)
        period = mean if mean > 0 and sd / mean < regularity else None
    return ReturnStats(events, iv, mean, sd, period)


@dataclass(frozen=True)
class RefinementLevel:
    dt_P: Fraction
    events: int
    min_distance: mpfr | None


@dataclass(frozen=True)
class Refinement:
    stats: ReturnStats
    dt_P: Fraction
    trail: tuple[RefinementLevel, ...] = field(default_factory=tuple)
    stopped_by: str = "converged"

    @property
    def floor(self) -> bool:
        return self.stopped_by == "floor"


def _stable(a: mpfr | None, b: mpfr | None, rel: float) -> bool:
    if a is None and b is None:
        return True
    if a is None or b is None:
        return False
    return abs(float(b) - float(a)) < rel * abs(float(a))


def refine_scan(sys: QuadSystem, x0: Sequence, cfg: IntegrationConfig, scan: RecurrenceScanConfig, *,
                min_dt=DEFAULT_MIN_DT, factor: int = REFINE_FACTOR, rel_change: float = REFINE_REL_CHANGE,
                backend: str | None = None) -> Refinement:
    """Rescan with ``dt_P / factor`` until the closest return moves by less than ``rel_change``.

    Stops at the floor ``max(min_dt, 10 * eps_m * T_P)`` and flags it.
    """
    eps_m = Fraction(*cfg.context.machine_epsilon.as_integer_ratio())
    floor = max(exact(min_dt, "min_dt"), 10 * eps_m * scan.T_P)
    if scan.dt_P < floor:
        raise ValueError(f"dt_P={float(scan.dt_P):.3g} is already below the refinement floor {float(floor):.3g}")
    trail: list[RefinementLevel] = []
    current = scan
    prev = None
    while True:
        stats = return_statistics(scan_trajectory(sys, x0, cfg, current, backend=backend))
        trail.append(RefinementLevel(current.dt_P, len(stats.events), stats.min_distance))
        if prev is not None and _stable(prev.min_distance, stats.min_distance, rel_change):
            return Refinement(stats, current.dt_P, tuple(trail), "converged")
        nxt = current.dt_P / factor
        if nxt < floor:
            return Refinement(stats, current.dt_P, tuple(trail), "floor")
        prev = stats
        current = current.with_step(nxt)
