"""Deployments that outlive one CLI invocation.

The simulation is deterministic, so a session stores only its inputs (seed,
hosts, optional market prelude and the timed deploy/terminate commands) and
rebuilds the world by replaying them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from . import descriptor
from .lifecycle import Deployment, Engine, NodeState
from .scenario import Scenario, ScenarioRunner, load_scenario

logger = logging.getLogger(__name__)

SESSION_FILE = "session.json"
SETTLE_LIMIT = 600.0


@dataclass
class HostSpec:
    host_id: str
    cpu: float = 1.0
    mem: int = 4096

    @classmethod
    def parse(cls, text: str) -> "HostSpec":
        """``id[:cpu[:mem]]``"""
        parts = text.split(":")
        if not parts[0] or len(parts) > 3:
            raise ValueError(f"bad host spec {text!r}; want id[:cpu[:mem]]")
        cpu = float(parts[1]) if len(parts) > 1 else 1.0
        mem = int(parts[2]) if len(parts) > 2 else 4096
        return cls(parts[0], cpu, mem)


@dataclass
class Command:
    t: float
    cmd: str
    deployment: str
    file: Optional[str] = None


@dataclass
class Session:
    seed: int = 0
    hosts: List[HostSpec] = field(default_factory=list)
    market: Optional[str] = None
    include: List[str] = field(default_factory=list)
    commands: List[Command] = field(default_factory=list)
    now: float = 0.0

    @classmethod
    def load(cls, log_dir: Path) -> "Session":
        path = Path(log_dir) / SESSION_FILE
        if not path.exists():
            raise FileNotFoundError(f"no session in {log_dir}; run deploy first")
        raw = json.loads(path.read_text(encoding="utf-8"))
        return cls(raw["seed"], [HostSpec(**h) for h in raw["hosts"]], raw.get("market"),
                   raw.get("include", []), [Command(**c) for c in raw["commands"]], raw["now"])

    def save(self, log_dir: Path) -> None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        (log_dir / SESSION_FILE).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")

    def next_id(self) -> str:
        used = {c.deployment for c in self.commands}
        n = 1
        while f"d{n}" in used:
            n += 1
        return f"d{n}"

    # -- replay -----------------------------------------------------------
    def replay(self, until: Optional[float] = None) -> Tuple[ScenarioRunner, Engine]:
        """Rebuild the world and apply every recorded command up to `until`."""
        scenario = load_scenario(Path(self.market)) if self.market else Scenario("session", [])
        runner = ScenarioRunner(scenario, self.seed, tuple(Path(p) for p in self.include))
        runner.run()
        for h in self.hosts:
            if h.host_id not in runner.world.hosts:
                runner.world.add_host(h.host_id, cpu_capacity=h.cpu, memory_total=h.mem)
        engine = runner.engine
        for c in self.commands:
            if c.t > runner.world.now:
                runner.world.advance(c.t)
            if c.cmd == "deploy":
                engine.deploy(self._load(c.file), c.deployment)
            elif c.cmd == "terminate":
                engine.terminate(c.deployment)
        end = self.now if until is None else until
        if end > runner.world.now:
            runner.world.advance(end)
        return runner, engine

    def _load(self, file: str):
        path = Path(file)
        doc = descriptor.parse(path.read_text(encoding="utf-8"))
        return descriptor.resolve(doc, [Path(p) for p in self.include] + [path.parent])


def settled(dep: Deployment) -> bool:
    if dep.root.state is NodeState.TERMINATED:
        return True
    return all(n.state is NodeState.STARTED for n in dep.nodes())


def run_until_settled(runner: ScenarioRunner, dep: Deployment, limit: float = SETTLE_LIMIT) -> float:
    clock = runner.world.clock
    end = clock.now + limit
    while not settled(dep):
        nxt = clock.peek()
        if nxt is None or nxt > end:
            break
        clock.step()
    # Finish the current instant so a replay to this time sees the same state.
    clock.advance(clock.now)
    return clock.now


def status_table(dep: Deployment) -> dict:
    return {
        "deployment": dep.deployment_id,
        "nodes": [{"node": n.name, "kind": n.kind.value, "state": n.state.value,
                   "host": n.host_id, "vm": n.vm_id} for n in dep.nodes()],
    }
