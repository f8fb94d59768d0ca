"""Command line entry point: run, sweep, analyze, oracle and aggregate."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import analytics, exc, oracle, protocol, sweep
from ._version import __version__
from .types import load_config
from .utils import rng_stream

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_FILE = 2


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    parser.add_argument(
        "--horizon", type=int, default=None, help="slots per run"
    )
    parser.add_argument(
        "--out-dir", type=Path, default=Path("."), help="output directory"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subnetra",
        description="Deadline-constrained random access in in-X subnetworks",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="single simulation run")
    run.add_argument("config", type=Path)
    _common(run)
    run.add_argument(
        "--event-log", type=Path, default=None, help="CSV of protocol events"
    )

    sweep_ = commands.add_parser("sweep", help="replicated parameter sweep")
    sweep_.add_argument("config", type=Path)
    _common(sweep_)
    sweep_.add_argument("--workers", type=int, default=1)

    analyze = commands.add_parser("analyze", help="closed-form evaluation")
    analyze.add_argument("--p-arr", type=float, default=None)
    analyze.add_argument("--lambda", dest="lambda_succ", type=float)
    analyze.add_argument("--D", type=int, default=None)
    analyze.add_argument("--psi", type=Path, default=None, help="psi CSV")
    analyze.add_argument("--p-act", type=float, default=None)

    oracle_ = commands.add_parser("oracle", help="simulator vs analysis")
    oracle_.add_argument("--seed", type=int, default=0)
    oracle_.add_argument("--slots", type=int, default=1_000_000)
    oracle_.add_argument("--instances", type=int, default=20)
    oracle_.add_argument("--queue-updates", type=int, default=1_000_000)
    oracle_.add_argument("--D", type=int, default=20)
    oracle_.add_argument("--psi", type=Path, default=None, help="psi CSV")
    oracle_.add_argument("--p-act", type=float, default=None)
    oracle_.add_argument(
        "--brute",
        nargs=3,
        metavar=("K", "M", "P_ACT"),
        default=None,
        help="only run one brute force search",
    )

    aggregate = commands.add_parser(
        "aggregate", help="re-aggregate a raw sweep CSV"
    )
    aggregate.add_argument("raw", type=Path)
    aggregate.add_argument("--out", type=Path, default=None)
    return parser


def _print_values(values):
    for key, value in values:
        print(f"{key} = {protocol.format_value(value)}")


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, horizon=args.horizon)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.event_log is not None:
        with open(args.event_log, "w", newline="", encoding="utf-8") as f:
            log = protocol.EventLog(f, cfg.M)
            metrics = protocol.engine_run(cfg, event_log=log)
    else:
        metrics = protocol.engine_run(cfg)
    row = metrics.csv_row(cfg)
    path = args.out_dir / "metrics.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        protocol.write_metrics_csv([row], f)
    print(",".join(row[k] for k in protocol.METRICS_FIELDS))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = sweep.load_sweep(args.config, seed=args.seed, horizon=args.horizon)
    result = sweep.run_sweep(spec, args.out_dir, workers=args.workers)
    print(f"{len(result.raw)} runs written to {result.out_dir}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    values = []
    lambda_succ = args.lambda_succ
    if args.psi is not None:
        if args.p_act is None:
            raise exc.ConfigError(violations=["--p-act required with --psi"])
        psi = analytics.load_psi(args.psi)
        lambda_succ = analytics.success_prob(psi, args.p_act)
        per_lap = analytics.per_lap_success_prob(psi, args.p_act)
        values += [("K", psi.K), ("M", psi.M), ("lambda", lambda_succ)]
        values += [(f"per_lap[{n}]", p) for n, p in enumerate(per_lap)]
    if args.p_arr is not None:
        if lambda_succ is None:
            msg = "--lambda or --psi required with --p-arr"
            raise exc.ConfigError(violations=[msg])
        state = analytics.queue_steady_state(args.p_arr, lambda_succ)
        values += [("rho", state.rho), ("Q0", state.q0), ("Q1", state.q1)]
        values.append(
            ("f_T(1)", analytics.delay_pmf(args.p_arr, lambda_succ, 1))
        )
        if args.D is not None:
            p_d = analytics.deadline_violation(args.p_arr, lambda_succ, args.D)
            values += [("P_D", p_d), ("P_timely", 1.0 - p_d)]
    if not values:
        raise exc.ConfigError(
            violations=["nothing to analyze: give --psi/--p-act or --p-arr"]
        )
    _print_values(values)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.brute is not None:
        K, M, p_act = args.brute
        rng = rng_stream(args.seed, "oracle")
        results = oracle.check_brute_force(
            int(K), int(M), float(p_act), args.slots, rng
        )
    elif args.psi is not None:
        if args.p_act is None:
            raise exc.ConfigError(violations=["--p-act required with --psi"])
        psi = analytics.load_psi(args.psi)
        results = oracle.check_psi_file(
            psi, args.p_act, args.slots, args.seed
        )
    else:
        results = oracle.run_all(
            seed=args.seed,
            instances=args.instances,
            slots=args.slots,
            queue_updates=args.queue_updates,
            D=args.D,
        )
    for result in results:
        print(result)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_aggregate(args) -> int:
    table = sweep.aggregate_csv(args.raw)
    sweep.write_csv(table, sys.stdout if args.out is None else args.out)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "oracle": cmd_oracle,
    "aggregate": cmd_aggregate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except exc.ConfigError as e:
        print(f"error: invalid configuration:\n{e}", file=sys.stderr)
        return EXIT_FAILURE
    except (exc.SubnetraError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
