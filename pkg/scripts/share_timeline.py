#!/usr/bin/env python3
"""Export per-host share and price timelines from a scenario run as CSV."""

import argparse
import csv
import sys
from pathlib import Path

from agora.report import load_report
from agora.scenario import run_scenario


def rows(report):
    for host, points in sorted(report.shares.items()):
        for t, shares in points:
            for bid_id, share in sorted(shares.items()):
                yield {"host": host, "t": t, "series": "share", "key": bid_id, "value": share}
    for host, points in sorted(report.prices.items()):
        for t, price in points:
            yield {"host": host, "t": t, "series": "price", "key": "", "value": price}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", type=Path, help=".scn file to run")
    src.add_argument("--report", type=Path, help="existing report.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--output", type=Path, help="CSV path (default stdout)")
    args = ap.parse_args(argv)

    report = run_scenario(args.scenario, seed=args.seed)[1] if args.scenario else load_report(args.report)
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=["host", "t", "series", "key", "value"])
        w.writeheader()
        w.writerows(rows(report))
    finally:
        if args.output:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
