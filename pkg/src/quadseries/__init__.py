"""Multiprecision power-series integration of quadratic ODE systems.

Main entry points: :func:`quadseries.fgbfi.integrate` for trajectories,
:func:`quadseries.recurrence.scan_trajectory` for returns to the start point
and :func:`quadseries.lyapunov.lyapunov_spectrum` for exponents.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BallEscapeError,
    DegeneracyError,
    PrecisionError,
    QuadSeriesError,
    SystemFormatError,
    TruncationError,
)
from .fgbfi import IntegrationConfig, integrate  # noqa: E402
from .lyapunov import BenettinConfig, lyapunov_spectrum  # noqa: E402
from .precision import PrecisionContext, format_decimal, make_context, parse_decimal  # noqa: E402
from .qsystem import QuadSystem, bundled_system, dong_system, load_system  # noqa: E402
from .recurrence import RecurrenceScanConfig, return_statistics, scan_trajectory  # noqa: E402

__all__ = [
    "BallEscapeError",
    "BenettinConfig",
    "DegeneracyError",
    "IntegrationConfig",
    "PrecisionContext",
    "PrecisionError",
    "QuadSeriesError",
    "QuadSystem",
    "RecurrenceScanConfig",
    "SystemFormatError",
    "TruncationError",
    "bundled_system",
    "dong_system",
    "format_decimal",
    "integrate",
    "load_system",
    "lyapunov_spectrum",
    "make_context",
    "parse_decimal",
    "return_statistics",
    "scan_trajectory",
]
