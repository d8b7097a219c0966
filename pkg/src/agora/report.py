"""Run reports, recomputed from a message log and nothing else."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from .simnet import Envelope


class ReportError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass
class RunReport:
    scenario: Optional[str] = None
    seed: Optional[int] = None
    shares: Dict[str, List[list]] = field(default_factory=dict)
    prices: Dict[str, List[list]] = field(default_factory=dict)
    balances: List[list] = field(default_factory=list)
    cpu_seconds: Dict[str, float] = field(default_factory=dict)
    assertions: List[dict] = field(default_factory=list)
    messages: int = 0

    @property
    def passed(self) -> bool:
        return all(a["ok"] for a in self.assertions)

    @property
    def failures(self) -> List[dict]:
        return [a for a in self.assertions if not a["ok"]]


def parse_log(lines: Iterable[str]) -> List[Envelope]:
    out = []
    for i, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            out.append(Envelope.from_line(line))
        except (ValueError, TypeError, KeyError) as exc:
            raise ReportError(i, f"malformed log line: {exc}") from None
    return out


def build_report(lines: Iterable[str]) -> RunReport:
    report = RunReport()
    for env in parse_log(lines):
        report.messages += 1
        body = env.body
        t = env.sent_at
        kind = env.msg_type
        if kind == "mon.run":
            report.scenario = body.get("scenario")
            report.seed = body.get("seed")
        elif kind == "mon.alloc":
            host = body["host_id"]
            report.shares.setdefault(host, []).append([t, dict(sorted(body["shares"].items()))])
            report.prices.setdefault(host, []).append([t, body["price"]])
        elif kind == "mon.assert":
            report.assertions.append(dict(body))
        elif kind == "mon.snapshot":
            report.cpu_seconds = dict(sorted(body["cpu_seconds"].items()))
        elif kind.startswith("bank.") and kind.endswith(".reply") and body.get("balances"):
            report.balances.append([t, dict(sorted(body["balances"].items()))])
    return report


def load_report(path: Path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return build_report(fh)


def render_json(report: RunReport) -> str:
    data = asdict(report)
    data["passed"] = report.passed
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def render_text(report: RunReport) -> str:
    out = [f"scenario: {report.scenario}", f"seed: {report.seed}", f"messages: {report.messages}"]
    for host, timeline in sorted(report.shares.items()):
        out.append(f"host {host}: {len(timeline)} reallocations")
        for t, shares in timeline:
            cells = " ".join(f"{b}={s:.6f}" for b, s in shares.items()) or "(idle)"
            out.append(f"  t={t:<10g} {cells}")
    if report.balances:
        final: Dict[str, str] = {}
        for _, bal in report.balances:
            final.update(bal)
        out.append("final balances:")
        out.extend(f"  {acct}: {amount}" for acct, amount in sorted(final.items()))
    if report.cpu_seconds:
        out.append("cpu seconds:")
        out.extend(f"  {vm}: {secs:.6f}" for vm, secs in report.cpu_seconds.items())
    for a in report.assertions:
        mark = "PASS" if a["ok"] else "FAIL"
        line = f"{mark} line {a['line']}: {a['probe']} {a['op']} {a['expected']}"
        if not a["ok"]:
            line += f"  (actual {a['actual']}, tol {a['tol']:g})"
        out.append(line)
    if report.assertions:
        out.append(f"{len(report.assertions) - len(report.failures)}/{len(report.assertions)} assertions passed")
    return "\n".join(out) + "\n"
