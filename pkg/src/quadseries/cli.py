"""Command-line front end.

Every command writes its data files plus ``manifest.json`` into ``--out``.
The manifest records the resolved value of every flag and the hash of the
system file, and ``quadseries replay manifest.json --out DIR`` reruns the
command; data files come out byte-identical (only the manifest carries a
timestamp).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
import tempfile
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path
from typing import Iterator, List, Optional

from . import __version__
from .errors import BallEscapeError, QuadSeriesError, SystemFormatError
from .fgbfi import (
    IntegrationConfig,
    compare_configurations,
    integrate,
    verify_backward,
    verify_forward,
)
from .lyapunov import BenettinConfig, lyapunov_spectrum
from .precision import format_decimal, make_context, parse_decimal
from .qsystem import DEFAULT_DELTA, QuadSystem, decimal_string, exact, system_from_dict
from .recurrence import (
    DEFAULT_MIN_DT,
    RecurrenceScanConfig,
    refine_scan,
    return_statistics,
    scan_trajectory,
)
from .series import DEFAULT_MAX_DEGREE

BITS_ENV = "QUADSERIES_BM"
DEFAULT_BITS = 128
MANIFEST = "manifest.json"
# flags that only say where to write, not what to compute
_NOT_RECORDED = {"out", "command", "handler", "progress"}


class UsageError(QuadSeriesError, ValueError):
    exit_code = 2


# -- output helpers ----------------------------------------------------------


@contextmanager
def atomic_open(path: Path, newline: str | None = None) -> Iterator[io.TextIOBase]:
    """Write to a temporary sibling and rename over ``path`` on success."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline=newline) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_json(path: Path, doc) -> None:
    with atomic_open(path) as fh:
        json.dump(doc, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


@contextmanager
def csv_writer(path: Path, header: List[str]):
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        yield w


def dec(v) -> str | None:
    return None if v is None else format_decimal(v)


def decs(vs) -> List[str]:
    return [format_decimal(v) for v in vs]


# -- argument parsing --------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _decimal(text: str) -> str:
    """Keep decimals as the user wrote them; they are parsed at the run's width."""
    try:
        exact(text, "value")
    except (ValueError, QuadSeriesError):
        raise argparse.ArgumentTypeError(f"malformed decimal numeral: {text!r}") from None
    return text.strip()


def _way(text: str) -> int:
    if text not in ("1", "+1", "-1"):
        raise argparse.ArgumentTypeError("way must be 1 or -1")
    return int(text)


def _default_bits() -> int:
    raw = os.environ.get(BITS_ENV)
    if raw is None:
        return DEFAULT_BITS
    try:
        return _positive_int(raw)
    except argparse.ArgumentTypeError as err:
        raise UsageError(f"{BITS_ENV}: {err}") from None


def _common(p: argparse.ArgumentParser, bits: int) -> None:
    p.add_argument("--system", required=True,
                   help="system JSON file, or the name of a bundled system (dong2019, riccati)")
    p.add_argument("--x0", required=True, help="start point, comma-separated decimals")
    p.add_argument("--bm", type=_positive_int, default=bits,
                   help=f"mantissa bits (default {bits}; env {BITS_ENV})")
    p.add_argument("--eps-pw", type=_decimal, default="1e-20", help="series truncation tolerance")
    p.add_argument("--delta", type=_decimal, default=DEFAULT_DELTA, help="step safety margin")
    p.add_argument("--max-degree", type=_positive_int, default=DEFAULT_MAX_DEGREE)
    p.add_argument("--backend", choices=("auto", "mpfr-c", "python"), default="auto",
                   help="stepping backend; both give identical results")
    p.add_argument("--out", default=".", help="output directory (created if missing)")


def build_parser() -> argparse.ArgumentParser:
    bits = _default_bits()
    p = argparse.ArgumentParser(prog="quadseries",
                                description="Power-series integration of quadratic ODE systems.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("integrate", help="integrate one arc and write the step end points")
    _common(q, bits)
    q.add_argument("--T", type=_decimal, required=True, help="arc length (>= 0)")
    q.add_argument("--way", type=_way, default=1, help="1 forward, -1 backward")
    q.add_argument("--grid", type=_decimal, default=None, help="also resample on t = way*k*GRID")
    q.add_argument("--every", type=_positive_int, default=1,
                   help="keep every N-th step end point (the last one is always kept)")
    q.set_defaults(handler=cmd_integrate)

    q = sub.add_parser("verify", help="run the forward, backward and configuration checks")
    _common(q, bits)
    q.add_argument("--T", type=_decimal, required=True)
    q.add_argument("--eps-a", type=_decimal, default="1e-12", help="forward comparison tolerance")
    q.add_argument("--eps-R", type=_decimal, default="1e-10", help="backward return tolerance")
    q.add_argument("--rel-tol", type=_decimal, default="0.05", help="step-configuration tolerance")
    q.set_defaults(handler=cmd_verify)

    q = sub.add_parser("recur", help="scan for returns close to the start point")
    _common(q, bits)
    q.add_argument("--reach-T", type=_decimal, default="0",
                   help="integrate this long first and scan from where the arc ends")
    q.add_argument("--TP", type=_decimal, required=True, help="scan horizon")
    q.add_argument("--dtP", type=_decimal, required=True, help="grid spacing")
    q.add_argument("--threshold", type=_decimal, default="1")
    q.add_argument("--refine", action="store_true",
                   help="divide dtP by 10 until the closest return settles")
    q.add_argument("--min-dtP", type=_decimal, default=DEFAULT_MIN_DT, help="refinement floor")
    q.set_defaults(handler=cmd_recur)

    q = sub.add_parser("lyapunov", help="Lyapunov spectrum by repeated re-orthonormalization")
    _common(q, bits)
    q.add_argument("--reach-T", type=_decimal, default="0")
    q.add_argument("--T", type=_decimal, required=True)
    q.add_argument("--M", type=_positive_int, required=True, help="number of macro-steps")
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--workers", type=_positive_int, default=1, help="threads per macro-step")
    q.add_argument("--progress", action="store_true", help="report progress on stderr")
    q.set_defaults(handler=cmd_lyapunov)

    q = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    q.add_argument("manifest")
    q.add_argument("--out", required=True)
    q.set_defaults(handler=cmd_replay)
    return p


# -- shared setup ------------------------------------------------------------


def resolve_system(ref: str) -> tuple[QuadSystem, str]:
    """Load a system from a path or a bundled name; also return the SHA-256 of its bytes."""
    path = Path(ref)
    if path.is_file():
        raw = path.read_bytes()
        source = str(path)
    else:
        from importlib.resources import files

        stem = ref[:-5] if ref.endswith(".json") else ref
        res = files("quadseries") / "data" / f"{stem}.json"
        if os.sep in ref or not res.is_file():
            raise SystemFormatError(f"{ref}: no such file or bundled system")
        raw = res.read_bytes()
        source = f"bundled:{stem}.json"
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as err:
        raise SystemFormatError(f"{source}: line {err.lineno} column {err.colno}: {err.msg}") from None
    return system_from_dict(doc, source), hashlib.sha256(raw).hexdigest()


def parse_point(text: str, n: int, ctx):
    parts = [s for s in text.replace(";", ",").split(",")]
    if len(parts) != n:
        raise UsageError(f"--x0 has {len(parts)} coordinates, the system has {n}")
    try:
        return tuple(parse_decimal(s, ctx) for s in parts)
    except ValueError as err:
        raise UsageError(f"--x0: {err}") from None


def _backend(args) -> str | None:
    return None if args.backend == "auto" else args.backend


def _config(args, T, way: int = 1) -> IntegrationConfig:
    try:
        return IntegrationConfig.create(args.bm, args.eps_pw, T, way, args.delta, args.max_degree)
    except QuadSeriesError:
        raise
    except ValueError as err:
        raise UsageError(str(err)) from None


def _start(args, sys_: QuadSystem, ctx):
    """Start point, optionally pushed forward by --reach-T."""
    x = parse_point(args.x0, sys_.n, ctx)
    reach = getattr(args, "reach_T", "0")
    if exact(reach) == 0:
        return x
    arc = integrate(sys_, x, _config(args, reach), record=False, backend=_backend(args))
    arc.raise_if_escaped()
    return arc.final_state


def _manifest(args, digest: str, outputs: List[str], derived: dict) -> dict:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}
    return {
        "command": args.command,
        "parameters": params,
        "derived": derived,
        "system": {"source": args.system, "sha256": digest},
        "outputs": outputs,
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _finish(args, out: Path, digest: str, outputs: List[str], derived: dict | None = None) -> None:
    write_json(out / MANIFEST, _manifest(args, digest, outputs, derived or {}))


# -- commands ----------------------------------------------------------------


def cmd_integrate(args, out: Path) -> int:
    sys_, digest = resolve_system(args.system)
    cfg = _config(args, args.T, args.way)
    x0 = parse_point(args.x0, sys_.n, cfg.context)
    header = ["t"] + [f"x{i + 1}" for i in range(sys_.n)]
    outputs = ["trajectory.csv", "stats.json"]
    if args.grid is not None:
        outputs.insert(1, "grid.csv")
    with csv_writer(out / "trajectory.csv", header) as traj:
        pending = []
        count = [0]

        def on_step(rec):
            count[0] += 1
            if count[0] % args.every == 0:
                traj.writerow([format_decimal(rec.t_end)] + decs(rec.state))
                pending.clear()
            else:
                pending[:] = [rec]

        if args.grid is None:
            arc = integrate(sys_, x0, cfg, record=False, on_step=on_step, backend=_backend(args))
        else:
            with csv_writer(out / "grid.csv", header) as grid:
                arc = integrate(sys_, x0, cfg, record=False, on_step=on_step, grid=args.grid,
                                on_sample=lambda t, x: grid.writerow([format_decimal(t)] + decs(x)),
                                backend=_backend(args))
        for rec in pending:
            traj.writerow([format_decimal(rec.t_end)] + decs(rec.state))
    s = arc.stats
    write_json(out / "stats.json", {
        "manifest": MANIFEST,
        "N": s.N,
        "n_max": s.n_max,
        "l_max": s.l_max,
        "dt_max": dec(s.dt_max),
        "d_max": s.d_max,
        "t_at_nmax": dec(s.t_at_nmax),
        "t_at_dtmax": dec(s.t_at_dtmax),
        "l_max_last": s.l_max_last,
        "t_at_nmax_last": dec(s.t_at_nmax_last),
        "final_time": dec(arc.final_time),
        "final_state": decs(arc.final_state),
        "escaped_ball": arc.escaped_ball,
        "message": arc.message,
    })
    _finish(args, out, digest, outputs)
    if arc.escaped_ball:
        raise BallEscapeError(arc.message)
    print(f"{s.N} steps, final t={format_decimal(arc.final_time)}")
    print("X = " + " ".join(decs(arc.final_state)))
    return 0


def cmd_verify(args, out: Path) -> int:
    sys_, digest = resolve_system(args.system)
    cfg = _config(args, args.T)
    x0 = parse_point(args.x0, sys_.n, cfg.context)
    be = _backend(args)
    fwd = verify_forward(sys_, x0, cfg, parse_decimal(args.eps_a, cfg.context), backend=be)
    back = verify_backward(sys_, x0, cfg, parse_decimal(args.eps_R, cfg.context), backend=be)
    report = {"manifest": MANIFEST}
    report["forward"] = {
        "passed": fwd.passed,
        "delta_a": dec(fwd.delta_a),
        "eps_a": dec(fwd.eps_a),
        "eps_pw": dec(fwd.eps_pw),
        "eps_pw_fine": dec(fwd.eps_pw_fine),
        "message": fwd.message,
    }
    report["backward"] = {
        "passed": back.passed,
        "return_distance": dec(back.return_distance),
        "eps_R": dec(back.eps_R),
        "message": back.message,
    }
    if back.backward_arc is not None and not back.backward_arc.escaped_ball:
        conf = compare_configurations(back.forward_arc.stats, back.backward_arc.stats, cfg.T,
                                      float(Fraction(args.rel_tol)))
        report["configuration"] = {
            "passed": conf.passed,
            "checks": [
                {
                    "name": c.name,
                    "forward": _plain(c.forward),
                    "backward": _plain(c.backward),
                    "target": _plain(c.target),
                    "passed": c.passed,
                    "informational": c.informational,
                }
                for c in conf.checks
            ],
        }
    else:
        report["configuration"] = {"passed": False, "checks": [],
                                   "message": "no complete backward arc to compare"}
    report["passed"] = all(report[k]["passed"] for k in ("forward", "backward", "configuration"))
    write_json(out / "verify.json", report)
    _finish(args, out, digest, ["verify.json"])
    for key in ("forward", "backward", "configuration"):
        print(f"{key:14s} {'pass' if report[key]['passed'] else 'FAIL'}")
    return 0


def _plain(v):
    if v is None or isinstance(v, int):
        return v
    if isinstance(v, float):
        return repr(v)
    return format_decimal(v)


def cmd_recur(args, out: Path) -> int:
    sys_, digest = resolve_system(args.system)
    try:
        scan = RecurrenceScanConfig(args.dtP, args.TP, args.threshold)
    except ValueError as err:
        raise UsageError(str(err)) from None
    cfg = _config(args, "1")
    x = _start(args, sys_, cfg.context)
    be = _backend(args)
    trail = []
    if args.refine:
        try:
            ref = refine_scan(sys_, x, cfg, scan, min_dt=args.min_dtP, backend=be)
        except ValueError as err:
            raise UsageError(str(err)) from None
        stats, dtP, stopped = ref.stats, ref.dt_P, ref.stopped_by
        trail = [{"dt_P": decimal_string(lv.dt_P), "events": lv.events,
                  "min_distance": dec(lv.min_distance)} for lv in ref.trail]
    else:
        stats = return_statistics(scan_trajectory(sys_, x, cfg, scan, backend=be))
        dtP, stopped = scan.dt_P, None
    with csv_writer(out / "recurrences.csv", ["t_star", "d_star", "k_star"]) as w:
        for e in stats.events:
            w.writerow([format_decimal(e.t_star), format_decimal(e.d_star), e.k_star])
    doc = {
        "manifest": MANIFEST,
        "start": decs(x),
        "dt_P": decimal_string(dtP),
        "T_P": args.TP,
        "grid_intervals": scan.with_step(dtP).N_P,
        "events": len(stats.events),
        "intervals": decs(stats.intervals),
        "mean_interval": dec(stats.mean_interval),
        "stddev_interval": dec(stats.stddev_interval),
        "variation": None if stats.variation is None else repr(stats.variation),
        "period_estimate": dec(stats.period_estimate),
        "min_distance": dec(stats.min_distance),
    }
    if not stats.events:
        doc["note"] = "no return below the threshold within the scan horizon"
    if args.refine:
        doc["refinement"] = {"stopped_by": stopped, "levels": trail}
    write_json(out / "recurrence_stats.json", doc)
    _finish(args, out, digest, ["recurrences.csv", "recurrence_stats.json"],
            {"N_P": scan.with_step(dtP).N_P})
    print(f"{len(stats.events)} returns at dt_P={decimal_string(dtP)}")
    if stats.period_estimate is not None:
        print(f"period ~ {float(stats.period_estimate):.8f}")
    return 0


def cmd_lyapunov(args, out: Path) -> int:
    sys_, digest = resolve_system(args.system)
    ctx = make_context(args.bm)
    try:
        cfg = BenettinConfig(ctx, ctx.real(args.T), args.M, args.seed,
                             ctx.real(args.eps_pw), ctx.real(args.delta), args.max_degree)
    except QuadSeriesError:
        raise
    except ValueError as err:
        raise UsageError(str(err)) from None
    x = _start(args, sys_, ctx)
    step = max(1, args.M // 100)

    def show(k, m):
        if k % step == 0 or k == m:
            print(f"\rmacro-step {k}/{m}", end="", file=sys.stderr, flush=True)

    progress = show if args.progress else None

    run = lyapunov_spectrum(sys_, x, cfg, backend=_backend(args), workers=args.workers,
                            progress=progress)
    if progress is not None:
        print(file=sys.stderr)
    n = sys_.n
    with csv_writer(out / "lyapunov_trace.csv", ["k", "t"] + [f"LE{p + 1}" for p in range(n)]) as w:
        with ctx.local():
            for k, row in enumerate(run.trace, 1):
                w.writerow([k, format_decimal(cfg.tau_M * k)] + decs(row))
    with ctx.local():
        total = sum(run.exponents, ctx.real(0))
    write_json(out / "spectrum.json", {
        "manifest": MANIFEST,
        "start": decs(x),
        "tau_M": dec(cfg.tau_M),
        "exponents": decs(run.exponents),
        "sorted_exponents": decs(run.sorted_exponents),
        "sum": dec(total),
        "log_sums": decs(run.sums),
        "final_state": decs(run.final_state),
        "max_gram_deviation": dec(run.max_gram_deviation),
        "max_base_spread": dec(run.max_base_spread),
    })
    _finish(args, out, digest, ["spectrum.json", "lyapunov_trace.csv"], {"tau_M": dec(cfg.tau_M)})
    print("LE = " + " ".join(f"{float(v):.6f}" for v in run.exponents))
    print(f"sum = {float(total):.6f}")
    return 0


def replay_argv(manifest: dict) -> List[str]:
    """Rebuild the command line recorded in a manifest."""
    command = manifest.get("command")
    params = manifest.get("parameters")
    if not isinstance(params, dict):
        raise UsageError("manifest has no parameter block")
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subs.choices or command == "replay":
        raise UsageError(f"manifest names an unknown command {command!r}")
    argv = [command]
    for action in subs.choices[command]._actions:
        if not action.option_strings or action.dest in _NOT_RECORDED or action.dest == "help":
            continue
        if action.dest not in params:
            raise UsageError(f"manifest lacks parameter {action.dest!r}")
        value = params[action.dest]
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            # "--x0=-1,2" form so negative values are not taken for flags
            argv.append(f"{flag}={value}")
    return argv


def cmd_replay(args, out: Path) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"{args.manifest}: cannot read manifest ({err})") from None
    argv = replay_argv(manifest)
    _, digest = resolve_system(manifest["parameters"]["system"])
    if digest != manifest.get("system", {}).get("sha256"):
        raise UsageError("the system file changed since the manifest was written (hash mismatch)")
    return main(argv + ["--out", args.out])


def main(argv: Optional[List[str]] = None) -> int:
    try:
        parser = build_parser()
    except UsageError as err:
        print(f"quadseries: error: {err}", file=sys.stderr)
        return err.exit_code
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.handler(args, out)
    except QuadSeriesError as err:
        print(f"quadseries: error: {err}", file=sys.stderr)
        return err.exit_code
    except ValueError as err:
        print(f"quadseries: error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"quadseries: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
