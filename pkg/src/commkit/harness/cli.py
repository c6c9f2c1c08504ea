"""``commkit-harness``: run, fuzz or replay fault-injection scenarios."""
from __future__ import annotations

import argparse
import sys
import time
from typing import List, Optional

from ..exceptions import ScenarioError, TraceMismatch
from .runner import replay_trace, run_scenario, write_trace
from .scenario import load_scenario, random_scenario


def _run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.stress:
        from .stress import stress_scenario

        report = stress_scenario(scenario, time_scale=args.time_scale)
    else:
        report = run_scenario(scenario)
        if args.trace:
            write_trace(scenario, report, args.trace)
    print(report.summary())
    return 0 if report.passed else 1


def _fuzz(args) -> int:
    started = time.perf_counter()
    failures = 0
    tasks = 0
    for seed in range(args.start, args.start + args.seeds):
        report = run_scenario(random_scenario(seed, args.size), record_trace=False)
        tasks += len(report.outcomes)
        if not report.passed:
            failures += 1
            print(report.summary())
            if failures >= args.max_failures:
                print(f"stopping after {failures} failing seeds")
                break
    elapsed = time.perf_counter() - started
    print(f"fuzz: {args.seeds} seeds from {args.start}, {tasks} tasks, {failures} failing, {elapsed:.1f} s")
    return 0 if failures == 0 else 1


def _replay(args) -> int:
    try:
        report = replay_trace(args.trace)
    except TraceMismatch as exc:
        print(f"trace mismatch at record {exc.index}")
        print(f"  expected: {exc.expected}")
        print(f"  actual:   {exc.actual}")
        return 1
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commkit-harness", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one scenario file and audit it")
    run.add_argument("scenario", help="scenario in JSON-lines form")
    run.add_argument("--trace", metavar="FILE", help="write the replayable trace here")
    run.add_argument("--stress", action="store_true", help="use real threads and wall-clock time")
    run.add_argument("--time-scale", type=float, default=1.0, help="real ms per virtual ms in stress mode")
    run.set_defaults(func=_run)

    fuzz = sub.add_parser("fuzz", help="audit many seeded random scenarios")
    fuzz.add_argument("--seeds", type=int, default=1000)
    fuzz.add_argument("--start", type=int, default=0, help="first seed")
    fuzz.add_argument("--size", type=int, default=12, help="events per scenario")
    fuzz.add_argument("--max-failures", type=int, default=10)
    fuzz.set_defaults(func=_fuzz)

    replay = sub.add_parser("replay", help="re-run a trace and demand identical transitions")
    replay.add_argument("trace")
    replay.set_defaults(func=_replay)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
