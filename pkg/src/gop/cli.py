"""Command-line entry point: ``gop {run,overlap,table,check}``.

Exit codes: 0 success, 1 a run whose summary reports a constraint violation,
2 usage or validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import overlap as ov
from .mpc import ConfigError, MpcConfig, run_scenario
from .scenario import ScenarioError, load_scenario, parse_scenario, summary_json, write_trace

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def bundled_scenarios() -> list:
    root = resources.files("gop") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _load(name: str):
    """Load a scenario from a path, or by the name of a bundled scenario."""
    path = Path(name)
    if path.exists():
        return load_scenario(path)
    if name in bundled_scenarios():
        text = (resources.files("gop") / "scenarios" / f"{name}.json").read_bytes()
        return parse_scenario(text)
    raise UsageError(f"scenario file not found: {name}")


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.replace(" ", "").split(",")])
    except ValueError:
        raise UsageError(f"cannot read vector {text!r}") from None


def _matrix(text: str) -> np.ndarray:
    """Rows separated by ';', entries by ','."""
    try:
        rows = [[float(x) for x in row.split(",")] for row in text.replace(" ", "").split(";")]
        return np.array(rows)
    except ValueError:
        raise UsageError(f"cannot read matrix {text!r}") from None


def _seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get("GOP_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GOP_SEED must be an integer, got {env!r}") from None


def cmd_run(args) -> int:
    sc = _load(args.scenario)
    seed = _seed(args.seed)
    if seed is not None:
        sc.seed = seed
    config = MpcConfig.from_scenario(sc, record_timing=args.timing)
    callback = None
    if args.verbose:
        def scp_log(rec):
            print(json.dumps({"scp": rec}, sort_keys=True), file=sys.stderr)

        config.scp.callback = scp_log

        def callback(rec, m):
            ct = ", ".join(f"{c:.4f}" for c in rec.contour)
            print(f"t={rec.t:.2f} pos={np.array2string(rec.pos, precision=3)} ct=[{ct}] "
                  f"iters={rec.scp_iters} braked={rec.braked}", file=sys.stderr)

    trace = run_scenario(sc, config, max_steps=args.max_steps, callback=callback)
    if args.out:
        write_trace(trace, args.out)
    sys.stdout.write(summary_json(trace))
    return EXIT_VIOLATION if trace.summary["constraint_violated"] else EXIT_OK


def cmd_overlap(args) -> int:
    try:
        g1 = ov.Gaussian(_vector(args.mean1), _matrix(args.cov1))
        g2 = ov.Gaussian(_vector(args.mean2), _matrix(args.cov2))
    except ov.DomainError as exc:
        raise UsageError(str(exc)) from None
    sep = ov.solve_lambda(g1, g2)
    print(f"lambda {sep.lam:.10g}")
    print(f"eta1 {sep.eta1:.10g}")
    print(f"eta2 {sep.eta2:.10g}")
    print(f"upsilon {sep.overlap:.6f}")
    print(f"c_t {sep.contour:.6f}")
    return EXIT_OK


def cmd_table(args) -> int:
    sys.stdout.write(ov.format_table_csv(ov.contour_table(args.dim)))
    return EXIT_OK


def cmd_check(args) -> int:
    sc = _load(args.scenario)
    print(sc.describe())
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gop", description="Gaussian-overlap collision avoidance planner")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="simulate a scenario")
    p.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    p.add_argument("--out", help="trace CSV path; the summary is also written next to it")
    p.add_argument("--seed", type=int, help="seed recorded in the summary (default: GOP_SEED)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--timing", action="store_true", help="record solve times (makes traces non-reproducible)")
    p.add_argument("--verbose", action="store_true", help="per-step and per-iteration diagnostics on stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("overlap", help="minmax overlap of two Gaussians")
    for k in ("1", "2"):
        p.add_argument(f"--mean{k}", required=True, help="comma separated, e.g. 0,0")
        p.add_argument(f"--cov{k}", required=True, help="rows split by ';', e.g. '1,0;0,1'")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("table", help="contour level to overlap table")
    p.add_argument("--dim", type=int, choices=(2, 3), required=True)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("check", help="validate a scenario without running it")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"gop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, ConfigError, OSError) as exc:
        print(f"gop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
