#!/usr/bin/env python3
"""Best-response convergence across seeds: when does the last adjustment happen?"""

import argparse
import statistics
import sys
from pathlib import Path

from agora.scenario import run_scenario
from agora.simnet import Envelope

ROOT = Path(__file__).resolve().parent.parent


def last_adjust(path: Path, seed: int) -> float:
    runner, _ = run_scenario(path, seed=seed)
    times = [e.sent_at for e in map(Envelope.from_line, runner.world.bus.log)
             if e.msg_type == "auc.adjust"]
    return max(times, default=0.0)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", type=Path, default=ROOT / "scenarios" / "best_response.scn")
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--bound", type=float, default=50.0)
    args = ap.parse_args(argv)

    lasts = [last_adjust(args.scenario, s) for s in range(args.seeds)]
    late = [s for s, t in enumerate(lasts) if t > args.bound]
    print(f"seeds={args.seeds} min={min(lasts):.2f} median={statistics.median(lasts):.2f} "
          f"max={max(lasts):.2f} bound={args.bound:g} late={late}")
    return 1 if late else 0


if __name__ == "__main__":
    sys.exit(main())
