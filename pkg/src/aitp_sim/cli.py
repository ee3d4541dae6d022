"""Command-line entry point: ``aitp-sim run`` and ``aitp-sim sweep``.

Exit status: 0 success, 1 invalid input, 2 runtime failure, 3 wall-clock abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .engine import run_simulation, sweep
from .errors import AitpError, ParseError, ValidationError
from .output import emit_outputs
from .scenario import Mode, ScenarioConfig, load_scenario, parse_failure_plan

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_ABORT = 0, 1, 2, 3
DEFAULT_SWEEP = "50,100,200,300,400,500"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; bad input is status 1 here
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _device_list(text: str) -> list[int]:
    try:
        counts = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None
    if not counts:
        raise argparse.ArgumentTypeError("empty device list")
    return counts


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aitp-sim", description="Clustered edge-network transmission protocol simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--scenario", help="scenario file (key = value lines); built-in defaults if omitted")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--rounds", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, help="thread pool size for per-device training")
    common.add_argument("--no-dp", action="store_true", help="disable differential-privacy noise")

    run = sub.add_parser("run", parents=[common], help="simulate one scenario")
    run.add_argument("--mode", choices=["aitp", "caip", "nap", "all"])
    run.add_argument("--devices", type=int)
    run.add_argument("--failure", action="append", default=[], metavar="ROUND:KIND:ID")
    run.add_argument("--strict-paper-combine", action="store_true",
                     help="plain mean of aggregator deltas instead of the weighted combine")

    sw = sub.add_parser("sweep", parents=[common], help="device-count grid for every mode")
    sw.add_argument("--devices", type=_device_list, default=_device_list(DEFAULT_SWEEP))
    sw.add_argument("--modes", default="aitp,caip,nap")
    return p


def _config(args) -> ScenarioConfig:
    cfg = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.no_dp:
        changes["dp_enabled"] = False
    if args.command == "run":
        if args.devices is not None:
            changes["n_devices"] = args.devices
        if args.failure:
            changes["failure_plan"] = cfg.failure_plan + parse_failure_plan(";".join(args.failure))
        if args.strict_paper_combine:
            changes["strict_paper_combine"] = True
    return cfg.replace(**changes) if changes else cfg


def _print_summary(reports) -> None:
    print(f"{'mode':<5} {'N':>5} {'latency_ms':>11} {'thr_gbps':>9} {'EE_bpj':>10} "
          f"{'privacy':>8} {'robust':>7} {'acc':>6}")
    for r in reports:
        s = r.summary
        print(f"{r.mode:<5} {r.n_devices:>5} {s['latency_ms']:>11.2f} {s['throughput_gbps']:>9.3f} "
              f"{s['energy_efficiency_bpj']:>10.3e} {s['privacy_loss']:>8.3f} {s['robustness']:>7.3f} "
              f"{s['final_accuracy']:>6.3f}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            mode = args.mode or cfg.mode.value.lower()
            modes = list(Mode) if mode == "all" else [Mode(mode.upper())]
        else:
            modes = [Mode(m.strip().upper()) for m in args.modes.split(",") if m.strip()]
    except (ParseError, ValidationError, ValueError) as exc:
        print(f"aitp-sim: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "run":
            reports = [run_simulation(cfg.replace(mode=m)) for m in modes]
        else:
            reports = sweep(cfg, args.devices, modes)
    except (AitpError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"aitp-sim: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        emit_outputs(reports, args.out)
    except AitpError as exc:
        print(f"aitp-sim: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print_summary(reports)
    if any(r.aborted for r in reports):
        print("aitp-sim: wall-clock limit reached; outputs are partial", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
