"""Shortened versions of the documented commands, and a replay comparison."""

import json

from conftest import END_15, END_40
from quadseries.cli import main


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as stop:
        return stop.code


P10 = ",".join(END_15)
P11 = ",".join(END_40)

# scaled-down forms of the documented example commands
EXAMPLES = {
    "integrate": ["integrate", "--system", "dong2019", "--x0", P10, "--T", "0.02"],
    "integrate-back": ["integrate", "--system", "dong2019", "--x0", P10, "--T", "0.02", "--way", "-1"],
    "integrate-grid": ["integrate", "--system", "riccati.json", "--x0", "0.5,0", "--T", "1", "--grid", "0.1"],
    "verify": ["verify", "--system", "riccati", "--x0", "0.5,0", "--T", "1", "--eps-a", "1e-15", "--eps-R", "1e-15"],
    "recur": ["recur", "--system", "dong2019", "--x0", P11, "--TP", "0.8", "--dtP", "1e-3"],
    "recur-refine": ["recur", "--system", "dong2019", "--x0", P11, "--TP", "0.4", "--dtP", "1e-2",
                     "--refine", "--min-dtP", "1e-3"],
    "lyapunov": ["lyapunov", "--system", "dong2019", "--x0", P11, "--T", "0.02", "--M", "4", "--seed", "3"],
}


def replay_differences(argv, tmp_path) -> list:
    """Run a command, replay its manifest and list every output that differs."""
    first, second = tmp_path / "a", tmp_path / "b"
    if run(list(argv) + ["--out", first]) != 0:
        return ["first run failed"]
    if run(["replay", first / "manifest.json", "--out", second]) != 0:
        return ["replay failed"]
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((second / "manifest.json").read_text())
    bad = [name for name in m1["outputs"] if (first / name).read_bytes() != (second / name).read_bytes()]
    if not m1["outputs"] or m1["outputs"] != m2["outputs"]:
        bad.append("output list")
    m1.pop("timestamp"), m2.pop("timestamp")
    if m1 != m2:
        bad.append("manifest")
    return bad
