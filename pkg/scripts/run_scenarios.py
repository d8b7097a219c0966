#!/usr/bin/env python3
"""Run every bundled scenario and print one summary row per file."""

import argparse
import logging
import sys
import time
from pathlib import Path

from agora.scenario import ScenarioError, run_scenario

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", type=Path, default=ROOT / "scenarios")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="write logs and reports under this directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    failed = 0
    print(f"{'scenario':<20} {'result':<6} {'asserts':>7} {'msgs':>6} {'wall_s':>7}")
    for path in sorted(args.dir.glob("*.scn")):
        log_dir = args.out / path.stem if args.out else None
        t0 = time.perf_counter()
        try:
            _, report = run_scenario(path, seed=args.seed, log_dir=log_dir)
        except ScenarioError as exc:
            failed += 1
            print(f"{path.stem:<20} ERROR  {exc}")
            continue
        wall = time.perf_counter() - t0
        ok = report.passed
        failed += not ok
        n_ok = sum(a["ok"] for a in report.assertions)
        print(f"{path.stem:<20} {'PASS' if ok else 'FAIL':<6} "
              f"{n_ok:>3}/{len(report.assertions):<3} {report.messages:>6} {wall:>7.3f}")
        for a in report.failures:
            print(f"    line {a.get('line')}: {a.get('probe')} {a.get('op')} {a.get('expected')}, got {a.get('actual')}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
