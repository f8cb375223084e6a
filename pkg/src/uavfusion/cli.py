"""Command-line entry point.

Errors exit nonzero and print a one-line JSON object with an ``error``
category to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .experiment import (RunError, eval_reconstruction, eval_table1, flight_log, reconstruction_csv,
                         run_mission)
from .msgbus import BusError
from .world import WorldError

EXIT_CODES = {"usage": 2, "config": 3, "world": 4, "artifact": 5, "run": 6, "bus": 7, "internal": 70}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(path: str | None, configuration: str | None, seed: int | None) -> tuple[RunConfig, Path | None]:
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError("config", f"config file not found: {p}")
        cfg = RunConfig.loads(p.read_text())
        base = p.parent
    else:
        cfg = RunConfig()
        base = None
    if configuration:
        cfg = RunConfig.from_document({**_strip(cfg.to_document()), "configuration": configuration,
                                       "metadata": None})
    if seed is not None:
        cfg.seed = seed
    return cfg, base


def _strip(doc: dict) -> dict:
    doc = dict(doc)
    doc.pop("schema", None)
    return doc


def cmd_run(args) -> int:
    cfg, base = _load_config(args.config, args.configuration, args.seed)
    # World errors must surface before any simulation work.
    cfg.load_world(base)
    report, _ = run_mission(cfg, args.out, base)
    sys.stdout.write(report.to_json())
    return 0


def cmd_table1(args) -> int:
    configs = [c.strip() for c in args.configs.split(",") if c.strip()]
    jobs = args.jobs if args.jobs > 0 else (os.cpu_count() or 1)
    res = eval_table1(configs, range(args.seed0, args.seed0 + args.seeds), jobs=jobs)
    text = res.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if res.ordering:
        n = len(res.seeds)
        for key, ok in res.ordering.items():
            sys.stderr.write(f"ordering C<=B<=A {key}: {ok}/{n} seeds\n")
    return 0


def cmd_recon(args) -> int:
    for d in args.distances:
        if not 0 < d <= 10:
            raise CliError("usage", f"distance {d} outside (0, 10]")
    rows = eval_reconstruction(args.distances, range(args.seeds))
    text = reconstruction_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_flight_log(args) -> int:
    try:
        summary = flight_log(args.run)
    except FileNotFoundError as exc:
        raise CliError("artifact", str(exc)) from exc
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bus_stats(args) -> int:
    p = Path(args.run) / "bus_stats.csv"
    if not p.exists():
        raise CliError("artifact", f"missing artifact {p}")
    sys.stdout.write(p.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uavfusion", description="Indoor UAV sensor-fusion simulator and evaluations.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one mission and write its artifacts")
    p.add_argument("--config", help="run configuration JSON (defaults: configuration C, default world)")
    p.add_argument("--configuration", choices=["A", "B", "C"], help="override the sensor configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval-table1", help="configuration comparison table as CSV")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--configs", default="A,B,C")
    p.add_argument("--jobs", type=int, default=0, help="worker processes (0 = one per CPU)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_table1)

    p = sub.add_parser("eval-recon", help="reconstruction percentage against target distance")
    p.add_argument("--distances", type=_floats, default=[0.25, 0.5, 1, 2, 3, 4, 5, 6])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_recon)

    p = sub.add_parser("flight-log", help="steady-state attitude error summary of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_flight_log)

    p = sub.add_parser("bus-stats", help="per-topic rate and bandwidth of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_bus_stats)
    return ap


def _fail(category: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else _fail("usage", "invalid arguments")
    try:
        return args.fn(args)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except WorldError as exc:
        return _fail("world", str(exc))
    except RunError as exc:
        return _fail("run", str(exc))
    except BusError as exc:
        return _fail("bus", str(exc))
    except ValueError as exc:
        return _fail("usage", str(exc))
    except Exception as exc:
        return _fail("internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
