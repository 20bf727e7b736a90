"""Command-line entry point: ``robocoord {run,sweep,check-config}``.

Exit codes: 0 success, 1 configuration error, 2 safety violation recorded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import sim
from .errors import ConfigError

log = logging.getLogger("robocoord")

TRAJECTORY_COLUMNS = ("t", "cav_id", "path", "p_nom", "v_nom", "u_nom", "p_act", "v_act")
TUBE_COLUMNS = ("cav_id", "plan_version", "p", "t_nom", "e_lo", "e_hi", "f_lo", "f_hi", "g_lo", "g_hi")
EVENT_COLUMNS = ("t", "type", "cav_id", "tf_new", "plan_version")

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def tube_rows(result: sim.SimResult):
    for cav_id, version, tube in result.tubes:
        for k in range(tube.p.size):
            yield (cav_id, version, tube.p[k], tube.t_nom[k], tube.e_lo[k], tube.e_hi[k],
                   tube.f_lo[k], tube.f_hi[k], tube.g_lo[k], tube.g_hi[k])


def write_outputs(result: sim.SimResult, out_dir: Path):
    out_dir = Path(out_dir)
    _atomic_write(out_dir / "trajectories.csv", _csv(TRAJECTORY_COLUMNS, result.trajectories))
    _atomic_write(out_dir / "tube.csv", _csv(TUBE_COLUMNS, tube_rows(result)))
    events = ((e.t, e.kind, e.cav_id, e.tf_new, e.plan_version) for e in result.events)
    _atomic_write(out_dir / "events.csv", _csv(EVENT_COLUMNS, events))
    _atomic_write(out_dir / "metrics.json", json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")


def has_violation(metrics: dict) -> bool:
    return metrics["violations"] > 0 or metrics["bound_crossings"] > 0


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["scenario.seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        out["scenario.mode"] = args.mode
    if getattr(args, "out_dir", None) is not None:
        out["output.out_dir"] = args.out_dir
    if getattr(args, "sample_period", None) is not None:
        out["output.sample_period"] = args.sample_period
    return out


def _load(args):
    try:
        return cfgmod.load(args.config, _overrides(args))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return None


def cmd_run(args) -> int:
    rc = _load(args)
    if rc is None:
        return EXIT_CONFIG
    result = sim.run(rc.scenario)
    write_outputs(result, rc.out_dir)
    m = result.metrics
    print(f"{m['mode']}: {m['violations']} actual violations, {m['bound_crossings']} tube crossings, "
          f"mean travel time {m['mean_travel_time']:.3f} s -> {rc.out_dir}")
    return EXIT_VIOLATION if has_violation(m) else EXIT_OK


def _run_mode(scenario, out_dir):
    result = sim.run(scenario)
    write_outputs(result, out_dir)
    return result.metrics, [(a.t0, a.path_id, a.v0) for a in result.arrivals]


def cmd_sweep(args) -> int:
    rc = _load(args)
    if rc is None:
        return EXIT_CONFIG
    runs = {}
    with ProcessPoolExecutor(max_workers=2) as pool:
        futures = {mode: pool.submit(_run_mode, replace(rc.scenario, mode=mode), rc.out_dir / mode)
                   for mode in cfgmod.MODES}
        for mode, fut in futures.items():
            runs[mode] = fut.result()
    summary = {}
    for mode, (m, _) in runs.items():
        summary[mode] = {k: m[k] for k in ("min_lateral_slack", "min_rear_end_slack", "lateral_violations",
                                           "rear_end_violations", "violations", "bound_crossings",
                                           "mean_travel_time", "infeasible_cavs")}
    det, rob = summary["deterministic"], summary["robust"]
    comparison = {
        "seed": rc.scenario.seed,
        "same_arrivals": runs["deterministic"][1] == runs["robust"][1],
        "modes": summary,
        "travel_time_delta": rob["mean_travel_time"] - det["mean_travel_time"],
    }
    _atomic_write(rc.out_dir / "comparison.json", json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    print(f"robust: {rob['violations']} violations, {rob['bound_crossings']} tube crossings; "
          f"deterministic: {det['violations']} violations, {det['bound_crossings']} tube crossings; "
          f"travel time delta {comparison['travel_time_delta']:+.3f} s")
    return EXIT_OK


def cmd_check_config(args) -> int:
    rc = _load(args)
    if rc is None:
        return EXIT_CONFIG
    sys.stdout.write(rc.to_ini())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robocoord", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one mode and write CSV/JSON outputs")
    sweep = sub.add_parser("sweep", help="run both modes on the same seed and compare")
    check = sub.add_parser("check-config", help="validate a config and print it normalized")
    for p in (run, sweep, check):
        p.add_argument("--config", required=True, type=Path)
    for p in (run, sweep):
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--sample-period", dest="sample_period", type=float)
    run.add_argument("--mode", choices=cfgmod.MODES)
    run.set_defaults(func=cmd_run)
    sweep.set_defaults(func=cmd_sweep)
    check.set_defaults(func=cmd_check_config)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ROBOCOORD_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
