"""Scenario files: scripted runs of the whole market on the virtual clock.

A scenario is a list of directives, one per line, ``#`` starting a comment::

    name two_bidders
    spawn bank
    spawn sls
    spawn host h1 cpu=1.0 mem=4096
    spawn auctioneer h1
    open alice 300.00
    bid b1 alice h1 amount=300.00 duration=100
    at 50 adjust b1 h1 duration=120
    inject vm_kill h1/vm-b1 at=80
    advance 100
    assert cpu:vm-b1 75.0 1e-3
    assert last:auc.adjust <= 50

Everything a run does goes through the message log, including the
assertion outcomes, so the report can be rebuilt from the log alone.
"""

from __future__ import annotations

import fnmatch
import logging
import shlex
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from . import descriptor
from .auctioneer import Auctioneer
from .bank import BankService
from .bidder import BidderAgent, BidPolicy
from .directory import DirectoryService
from .lifecycle import Engine, LifecycleError, check_trace_order
from .market import Bid, MalformedBid, credit
from .simnet import Envelope, FaultError, HostError, Service, VmSpec, World

logger = logging.getLogger(__name__)

MONITOR = "monitor"
CONTROL = "ctl"

SPAWN_ROLES = ("bank", "sls", "host", "auctioneer", "bidder")
FAULTS = {"vm_kill": "VM_KILL", "message_drop": "MESSAGE_DROP", "service_crash": "SERVICE_CRASH"}
OPS = ("==", "<=", ">=", "<", ">", "!=")
DEFAULT_TOL = 1e-9


class ScenarioError(Exception):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Directive:
    line: int
    verb: str
    args: List[str] = field(default_factory=list)
    opts: Dict[str, str] = field(default_factory=dict)
    when: Optional[float] = None
    inner: Optional["Directive"] = None

    def opt(self, key: str, default=None, conv: Callable = str):
        if key not in self.opts:
            return default
        try:
            return conv(self.opts[key])
        except (ValueError, InvalidOperation):
            raise ScenarioError(f"bad value for {key}: {self.opts[key]!r}", self.line) from None


@dataclass
class Scenario:
    name: str
    directives: List[Directive]
    base_dir: Path = Path(".")


# -- parsing -----------------------------------------------------------------

_ARITY = {
    # verb: (min positional, max positional, allowed options)
    "name": (1, 1, ()),
    "open": (2, 2, ()),
    "bid": (3, 3, ("amount", "duration", "mem", "vcpus", "image", "disk", "swap", "notify")),
    "adjust": (2, 2, ("duration",)),
    "deploy": (1, 1, ("id",)),
    "terminate": (1, 1, ()),
    "restart": (1, 1, ()),
    "latency": (3, 3, ()),
    "advance": (1, 1, ()),
    "assert": (2, 4, ()),
}
_SPAWN_OPTS = {
    "bank": (0, ("supply",)),
    "sls": (0, ("window",)),
    "host": (1, ("cpu", "mem", "disk", "boot")),
    "auctioneer": (1, ("provider", "heartbeat", "endpoint")),
    "bidder": (1, ("target", "budget", "duration", "interval", "mem", "vcpus", "host", "auto")),
}
_FAULT_OPTS = {
    "vm_kill": ("at",),
    "message_drop": ("at", "recipient", "sender", "count"),
    "service_crash": ("at", "restart"),
}


def _number(text: str, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ScenarioError(f"{what} must be a number, got {text!r}", line) from None


def parse_directive(tokens: List[str], line: int) -> Directive:
    verb = tokens[0]
    rest = tokens[1:]
    if verb == "at":
        if len(rest) < 2:
            raise ScenarioError("usage: at <time> <directive>", line)
        inner = parse_directive(rest[1:], line)
        if inner.verb in ("at", "advance", "name"):
            raise ScenarioError(f"'{inner.verb}' cannot be scheduled with 'at'", line)
        return Directive(line, "at", when=_number(rest[0], line, "time"), inner=inner)
    if verb == "assert":
        return Directive(line, verb, list(rest)) if 2 <= len(rest) <= 4 else _bad(verb, line)
    args = [t for t in rest if "=" not in t]
    opts = dict(t.split("=", 1) for t in rest if "=" in t)
    if verb == "spawn":
        if not args or args[0] not in _SPAWN_OPTS:
            raise ScenarioError(f"spawn needs one of {', '.join(SPAWN_ROLES)}", line)
        nargs, allowed = _SPAWN_OPTS[args[0]]
        if len(args) - 1 != nargs:
            raise ScenarioError(f"spawn {args[0]} takes {nargs} positional argument(s)", line)
    elif verb == "inject":
        if not args or args[0] not in _FAULT_OPTS or len(args) != 2:
            raise ScenarioError(f"usage: inject {{{'|'.join(FAULTS)}}} <target> [options]", line)
        allowed = _FAULT_OPTS[args[0]]
    elif verb in _ARITY:
        lo, hi, allowed = _ARITY[verb]
        if not lo <= len(args) <= hi:
            _bad(verb, line)
    else:
        raise ScenarioError(f"unknown directive {verb!r}", line)
    unknown = sorted(set(opts) - set(allowed))
    if unknown:
        raise ScenarioError(f"{verb}: unknown option(s) {', '.join(unknown)}", line)
    d = Directive(line, verb, args, opts)
    if verb == "advance":
        _number(args[0], line, "advance target")
    return d


def _bad(verb: str, line: int):
    raise ScenarioError(f"wrong number of arguments for {verb!r}", line)


def parse_scenario(text: str, name: str = "scenario", base_dir: Path = Path(".")) -> Scenario:
    directives = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ScenarioError(str(exc), lineno) from None
        if not tokens:
            continue
        d = parse_directive(tokens, lineno)
        if d.verb == "name":
            name = d.args[0]
            continue
        directives.append(d)
    return Scenario(name, directives, base_dir)


def load_scenario(path: Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from None
    return parse_scenario(text, path.stem, path.parent)


# -- running -----------------------------------------------------------------

class Monitor(Service):
    """Sink endpoint for `mon.*` records; they matter only in the log."""

    prefix = "mon"

    def on_alloc(self, env: Envelope) -> None:
        pass

    on_run = on_assert = on_snapshot = on_alloc


class Controller(Service):
    """Issues scripted requests on behalf of the scenario and keeps the replies."""

    def __init__(self, world: World):
        super().__init__(world.bus, CONTROL)
        self.replies: Dict[str, dict] = {}

    def ask(self, key: str, recipient: str, msg_type: str, body: dict, timeout=5.0) -> None:
        fut = self.request(recipient, msg_type, body, timeout=timeout)
        fut.add_done_callback(lambda f: self.replies.__setitem__(key, f.result()))


@dataclass
class AssertResult:
    line: int
    probe: str
    op: str
    expected: str
    actual: object
    tol: float
    ok: bool


class ScenarioRunner:
    def __init__(self, scenario: Scenario, seed: int = 0, include: Tuple[Path, ...] = (),
                 message_sink=None):
        self.scenario = scenario
        self.seed = seed
        self.include = tuple(include)
        self.world = World(seed)
        if message_sink is not None:
            self.world.bus.add_sink(message_sink)
        self.monitor = Monitor(self.world.bus, MONITOR)
        self.ctl = Controller(self.world)
        self.engine = Engine(self.world)
        self.bank: Optional[BankService] = None
        self.sls: Optional[DirectoryService] = None
        self.auctioneers: Dict[str, Auctioneer] = {}
        self.bidders: Dict[str, BidderAgent] = {}
        self.snapshots: Dict[str, bytes] = {}
        self.results: List[AssertResult] = []
        self._failure: Optional[ScenarioError] = None

    # -- driver -----------------------------------------------------------
    def run(self, until: Optional[float] = None) -> List[AssertResult]:
        self.ctl.send(MONITOR, "mon.run", {"scenario": self.scenario.name, "seed": self.seed})
        for d in self.scenario.directives:
            self.execute(d)
            self._check_failure()
        if until is not None and until > self.world.now:
            self.world.advance(until)
            self._check_failure()
        self.ctl.send(MONITOR, "mon.snapshot", {"cpu_seconds": self.cpu_table(),
                                                "passed": all(r.ok for r in self.results)})
        return self.results

    def _check_failure(self) -> None:
        if self._failure is not None:
            raise self._failure

    def _deferred(self, d: Directive) -> None:
        try:
            self.execute(d)
        except ScenarioError as exc:
            # Raised from inside the clock; surfaced after the current advance.
            if self._failure is None:
                self._failure = exc

    def execute(self, d: Directive) -> None:
        try:
            getattr(self, "do_" + d.verb)(d)
        except ScenarioError:
            raise
        except (ValueError, KeyError, HostError, FaultError, LifecycleError, MalformedBid,
                descriptor.DescriptorError) as exc:
            raise ScenarioError(f"{d.verb}: {exc}", d.line) from None

    # -- directives -------------------------------------------------------
    def do_at(self, d: Directive) -> None:
        if d.when < self.world.now:
            raise ScenarioError(f"time {d.when} is in the past (now {self.world.now})", d.line)
        self.world.clock.schedule(d.when, self._deferred, d.inner, label=f"scn:{d.line}")

    def do_advance(self, d: Directive) -> None:
        to = float(d.args[0])
        if to < self.world.now:
            raise ScenarioError(f"cannot advance backwards to {to}", d.line)
        self.world.advance(to)

    def do_spawn(self, d: Directive) -> None:
        role = d.args[0]
        w = self.world
        if role == "bank":
            if self.bank is not None:
                raise ScenarioError("bank already spawned", d.line)
            self.bank = BankService(w, supply=d.opt("supply", "1000000000.00", credit))
        elif role == "sls":
            if self.sls is not None:
                raise ScenarioError("sls already spawned", d.line)
            self.sls = DirectoryService(w, liveness_window=d.opt("window", 30.0, float))
        elif role == "host":
            host_id = d.args[1]
            host = w.add_host(host_id, cpu_capacity=d.opt("cpu", 1.0, float),
                              memory_total=d.opt("mem", 4096, int),
                              disk_total=d.opt("disk", 100_000, int),
                              boot_delay=d.opt("boot", 5.0, float))
            self.snapshots[host_id] = host.snapshot()
        elif role == "auctioneer":
            host_id = d.args[1]
            if host_id not in w.hosts:
                raise ScenarioError(f"unknown host {host_id}", d.line)
            provider = d.opt("provider", f"provider-{host_id}")
            self.ctl.ask(f"open:{provider}", "bank", "bank.open", {"account": provider, "grant": "0.00"})
            auc = Auctioneer(w, w.hosts[host_id], provider, endpoint=d.opt("endpoint"),
                             heartbeat_interval=d.opt("heartbeat", 10.0, float), monitor=MONITOR)
            self.auctioneers[host_id] = auc
            auc.start()
        elif role == "bidder":
            account = d.args[1]
            spec = VmSpec(vcpus=d.opt("vcpus", 1, int), memory=d.opt("mem", 512, int))
            policy = BidPolicy(d.opt("target", 0.5, float), d.opt("budget", "100.00", credit),
                               d.opt("duration", 100.0, float), d.opt("interval", 5.0, float), spec)
            agent = BidderAgent(w, account, policy, auto=d.opt("auto", "yes") in ("yes", "true", "1"),
                                host=d.opt("host"))
            self.bidders[account] = agent
            agent.start()

    def do_open(self, d: Directive) -> None:
        account, grant = d.args
        self.ctl.ask(f"open:{account}", "bank", "bank.open", {"account": account, "grant": str(credit(grant))})

    def do_bid(self, d: Directive) -> None:
        bid_id, account, host_id = d.args
        auc = self._auctioneer(host_id, d)
        if "amount" not in d.opts or "duration" not in d.opts:
            raise ScenarioError("bid needs amount= and duration=", d.line)
        bid = Bid(bid_id, account, d.opt("amount", conv=credit), d.opt("duration", conv=float),
                  self.world.now)
        spec = VmSpec(vcpus=d.opt("vcpus", 1, int), memory=d.opt("mem", 512, int),
                      image=d.opt("image", "default"), disk=d.opt("disk", 1024, int),
                      swap=d.opt("swap", 0, int))
        self.ctl.ask(f"bid:{bid_id}", auc.endpoint, "auc.submit",
                     {"bid": bid.to_wire(), "vm_spec": spec.to_wire()}, timeout=None)

    def do_adjust(self, d: Directive) -> None:
        bid_id, host_id = d.args
        auc = self._auctioneer(host_id, d)
        if "duration" not in d.opts:
            raise ScenarioError("adjust needs duration=", d.line)
        self.ctl.ask(f"adjust:{bid_id}", auc.endpoint, "auc.adjust",
                     {"bid_id": bid_id, "duration": d.opt("duration", conv=float)})

    def do_deploy(self, d: Directive) -> None:
        path = self.scenario.base_dir / d.args[0]
        try:
            doc = descriptor.parse(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ScenarioError(f"cannot read {path}: {exc}", d.line) from None
        include = self.include + (path.parent,)
        tree = descriptor.resolve(doc, include)
        self.engine.deploy(tree, d.opt("id"))

    def do_terminate(self, d: Directive) -> None:
        self.engine.terminate(d.args[0])

    def do_restart(self, d: Directive) -> None:
        self.world.restart(d.args[0])

    def do_latency(self, d: Directive) -> None:
        sender, recipient, value = d.args
        self.world.bus.set_link_latency(sender, recipient, _number(value, d.line, "latency"))

    def do_inject(self, d: Directive) -> None:
        kind, target = d.args
        opts = {}
        if kind == "message_drop":
            opts = {k: d.opts[k] for k in ("recipient", "sender") if k in d.opts}
            opts["count"] = d.opt("count", 1, int)
        elif kind == "service_crash" and "restart" in d.opts:
            opts["restart_at"] = d.opt("restart", conv=float)
        self.world.inject_fault(FAULTS[kind], target, at=d.opt("at", None, float), **opts)

    def do_assert(self, d: Directive) -> None:
        probe, rest = d.args[0], d.args[1:]
        op = "=="
        if rest[0] in OPS:
            op, rest = rest[0], rest[1:]
        if not rest or len(rest) > 2:
            raise ScenarioError("usage: assert <probe> [op] <expected> [tolerance]", d.line)
        expected = rest[0]
        tol = _number(rest[1], d.line, "tolerance") if len(rest) == 2 else DEFAULT_TOL
        actual = self.probe(probe, d)
        ok = compare(actual, op, expected, tol)
        result = AssertResult(d.line, probe, op, expected, actual, tol, ok)
        self.results.append(result)
        self.ctl.send(MONITOR, "mon.assert", {
            "line": d.line, "probe": probe, "op": op, "expected": expected,
            "actual": _wire(actual), "tol": tol, "ok": ok})

    # -- probes -----------------------------------------------------------
    def probe(self, spec: str, d: Directive):
        kind, _, arg = spec.partition(":")
        w = self.world
        if kind == "share":
            host_id, _, bid_id = arg.partition(":")
            return self._auctioneer(host_id, d).shares.get(bid_id, 0.0)
        if kind == "price":
            return self._auctioneer(arg, d).price
        if kind == "cpu":
            for host in w.hosts.values():
                if arg in host.vms or arg in host.retired:
                    return host.cpu_seconds(arg)
            raise ScenarioError(f"unknown vm {arg}", d.line)
        if kind == "vm":
            host = w.find_vm(arg)
            return host.vms[arg].state.value if host else "ABSENT"
        if kind == "balance":
            return self._bank(d).bank.balance(arg)
        if kind == "total":
            return self._bank(d).bank.total()
        if kind == "hosts":
            return len(self._sls(d).directory.query_ranked(10 ** 6))
        if kind == "ranked":
            return ",".join(r.host_id for r in self._sls(d).directory.query_ranked(10 ** 6))
        if kind == "restored":
            if arg not in self.snapshots:
                raise ScenarioError(f"unknown host {arg}", d.line)
            return "true" if w.hosts[arg].snapshot() == self.snapshots[arg] else "false"
        if kind == "node":
            dep_id, _, name = arg.partition(":")
            try:
                return self.engine.get(dep_id).node(name).state.value
            except KeyError:
                raise ScenarioError(f"unknown node {name} in {dep_id}", d.line) from None
        if kind == "placed":
            dep_id, _, name = arg.partition(":")
            return self.engine.get(dep_id).node(name).host_id or "none"
        if kind == "reply":
            reply = self.ctl.replies.get(arg)
            if reply is None:
                return "pending"
            return "ok" if reply.get("ok") else str(reply.get("error"))
        if kind == "msgs":
            return sum(1 for env in self._log() if _matches(env, arg))
        if kind == "last":
            times = [env.sent_at for env in self._log() if _matches(env, arg)]
            return max(times) if times else -1.0
        if kind == "bidder":
            account, _, field_ = arg.partition(":")
            agent = self.bidders.get(account)
            if agent is None:
                raise ScenarioError(f"unknown bidder {account}", d.line)
            return self._bidder_field(agent, field_, d)
        if kind == "trace":
            problems = []
            for dep in self.engine.deployments.values():
                problems += check_trace_order(dep.events, dep.root)
            return "ok" if not problems else "; ".join(problems)
        raise ScenarioError(f"unknown probe {spec!r}", d.line)

    def _bidder_field(self, agent: BidderAgent, field_: str, d: Directive):
        if field_ == "host":
            return agent.host_id or "none"
        if field_ == "actions":
            return len(agent.actions)
        if field_ == "error":
            return agent.error or "none"
        if field_ == "share":
            if agent.host_id is None or agent.bid is None:
                return 0.0
            return self.auctioneers[agent.host_id].shares.get(agent.bid.bid_id, 0.0)
        raise ScenarioError(f"unknown bidder field {field_!r}", d.line)

    def _log(self):
        return [Envelope.from_line(line) for line in self.world.bus.log]

    def _auctioneer(self, host_id: str, d: Directive) -> Auctioneer:
        try:
            return self.auctioneers[host_id]
        except KeyError:
            raise ScenarioError(f"no auctioneer on host {host_id}", d.line) from None

    def _bank(self, d: Directive) -> BankService:
        if self.bank is None:
            raise ScenarioError("no bank spawned", d.line)
        return self.bank

    def _sls(self, d: Directive) -> DirectoryService:
        if self.sls is None:
            raise ScenarioError("no sls spawned", d.line)
        return self.sls

    def cpu_table(self) -> Dict[str, float]:
        table = {}
        for host in self.world.hosts.values():
            for vm_id, secs in host.retired.items():
                table[vm_id] = secs
            for vm_id, vm in host.vms.items():
                table[vm_id] = vm.accumulated_cpu_seconds
        return dict(sorted(table.items()))


def _matches(env: Envelope, spec: str) -> bool:
    """``glob`` or ``glob@t0-t1`` over msg_type and send time."""
    pattern, _, window = spec.partition("@")
    if not fnmatch.fnmatchcase(env.msg_type, pattern):
        return False
    if window:
        lo, _, hi = window.partition("-")
        if lo and env.sent_at < float(lo):
            return False
        if hi and env.sent_at > float(hi):
            return False
    return True


def _wire(value):
    if isinstance(value, Decimal):
        return str(value)
    return value


def compare(actual, op: str, expected: str, tol: float = DEFAULT_TOL) -> bool:
    """Numeric comparison when both sides are numbers, else exact text."""
    try:
        a = Decimal(str(actual)) if not isinstance(actual, bool) else None
        e = Decimal(expected)
    except (InvalidOperation, ValueError):
        a = e = None
    if a is None or e is None or not a.is_finite() or not e.is_finite():
        text = str(actual).lower() if isinstance(actual, bool) else str(actual)
        if op == "==":
            return text == expected
        if op == "!=":
            return text != expected
        return False
    t = Decimal(repr(float(tol)))
    return {
        "==": abs(a - e) <= t,
        "!=": abs(a - e) > t,
        "<=": a <= e + t,
        ">=": a >= e - t,
        "<": a < e,
        ">": a > e,
    }[op]


def run_scenario(path: Path, seed: int = 0, until: Optional[float] = None,
                 log_dir: Optional[Path] = None, include: Tuple[Path, ...] = ()):
    """Run a scenario file; returns (runner, report). Writes artifacts to `log_dir` if given."""
    from .report import build_report, render_json

    scenario = load_scenario(path)
    runner = ScenarioRunner(scenario, seed, include)
    runner.run(until)
    lines = runner.world.bus.log
    report = build_report(lines)
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        (log_dir / "messages.ndjson").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        (log_dir / "trace.ndjson").write_text(
            "".join(l + "\n" for l in runner.world.trace_lines()), encoding="utf-8")
        (log_dir / "report.json").write_text(render_json(report), encoding="utf-8")
    return runner, report
