"""Command line entry point.

Exit codes: 0 success, 1 assertion or economic failure, 2 usage, parse or
internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import select
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__, descriptor
from .auctioneer import Auctioneer
from .bank import BankError, BankService
from .bidder import BidderAgent, BidPolicy
from .directory import DirectoryService
from .market import credit
from .lifecycle import CLASS_KINDS
from .report import ReportError, load_report, render_json, render_text
from .scenario import Scenario, ScenarioError, ScenarioRunner, load_scenario, run_scenario
from .session import Command, HostSpec, Session, run_until_settled, status_table
from .simnet import Envelope, VmSpec, World, canonical

logger = logging.getLogger("agora")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ENV_PREFIX = "AGORA_"


class UsageError(Exception):
    pass


# -- settings ----------------------------------------------------------------

@dataclass
class Settings:
    seed: int = 0
    until: Optional[float] = None
    log_dir: Optional[str] = None
    include: Sequence[str] = ()


_SETTING_TYPES = {"seed": int, "until": float, "log_dir": str}


def load_settings(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> Settings:
    """Flags > ``AGORA_*`` environment > JSON config file > defaults."""
    environ = os.environ if environ is None else environ
    merged: Dict[str, object] = {}
    config_path = getattr(args, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        unknown = set(raw) - set(_SETTING_TYPES) - {"include"}
        if unknown:
            raise UsageError(f"config {config_path}: unknown keys {sorted(unknown)}")
        merged.update(raw)
    for key in _SETTING_TYPES:
        value = environ.get(ENV_PREFIX + key.upper())
        if value is not None:
            merged[key] = value
    for key in _SETTING_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    out = Settings()
    for key, conv in _SETTING_TYPES.items():
        if merged.get(key) is not None:
            try:
                setattr(out, key, conv(merged[key]))
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {key}: {merged[key]!r}") from None
    include = list(merged.get("include", []) or [])
    include += list(getattr(args, "include", None) or [])
    out.include = tuple(include)
    return out


# -- commands ----------------------------------------------------------------

def cmd_scenario_run(args, settings: Settings) -> int:
    runner, report = run_scenario(Path(args.file), settings.seed, settings.until,
                                  Path(settings.log_dir) if settings.log_dir else None,
                                  tuple(Path(p) for p in settings.include))
    sys.stdout.write(render_json(report) if args.format == "json" else render_text(report))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_report(args, settings: Settings) -> int:
    report = load_report(Path(args.log))
    sys.stdout.write(render_json(report) if args.format == "json" else render_text(report))
    return EXIT_OK


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def cmd_daemon(args, settings: Settings) -> int:
    if args.role == "auctioneer" and (args.host_id is None or args.cpu is None or args.mem is None):
        raise UsageError("daemon auctioneer needs --host-id, --cpu and --mem")
    world = World(settings.seed)
    service = _make_service(world, args, peers=not args.stdio)
    if args.stdio:
        return _stdio_loop(world, service, settings.until)
    until = settings.until if settings.until is not None else 30.0
    world.advance(until)
    out = {"endpoint": service.endpoint, "now": world.now, "role": args.role}
    sls = world.services.get("sls")
    if sls is not None:
        out["directory"] = [r.to_wire() for r in sls.directory.query_ranked(10 ** 6)]
    if args.role == "bank":
        out["balances"] = {k: str(v) for k, v in service.bank.balances().items()}
    if args.role == "auctioneer":
        out["status"] = service.status()
    _print_json(out)
    return EXIT_OK


def _make_service(world: World, args, peers: bool):
    if args.role == "bank":
        journal = Path(args.journal) if args.journal else None
        return BankService(world, args.endpoint or "bank", supply=credit(args.supply), journal_path=journal)
    if args.role == "sls":
        return DirectoryService(world, args.endpoint or "sls", liveness_window=args.window)
    if peers:
        DirectoryService(world)
        BankService(world)
    host = world.add_host(args.host_id, cpu_capacity=args.cpu, memory_total=args.mem)
    auc = Auctioneer(world, host, args.provider or f"provider-{args.host_id}", endpoint=args.endpoint,
                     heartbeat_interval=args.heartbeat)
    auc.start()
    return auc


def _stdio_loop(world: World, service, until: Optional[float]) -> int:
    """Wall-clock mode: envelopes in on stdin, everything not local out on stdout."""
    local = set(world.services)

    def forward(env: Envelope) -> None:
        if env.recipient not in local:
            sys.stdout.write(env.to_line() + "\n")
            sys.stdout.flush()

    for peer in ("sls", "bank", "stdio"):
        if peer not in local and not world.bus.is_registered(peer):
            world.bus.register(peer, lambda env: None)
    world.bus.tap(forward)
    start = time.monotonic()
    while True:
        elapsed = time.monotonic() - start
        if until is not None and elapsed >= until:
            break
        world.advance(max(world.now, elapsed))
        ready, _, _ = select.select([sys.stdin], [], [], 0.2)
        if not ready:
            continue
        line = sys.stdin.readline()
        if not line:
            break
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            raw.setdefault("version", 1)
            raw.setdefault("sender", "stdio")
            raw.setdefault("recipient", service.endpoint)
            raw.setdefault("request_id", f"stdio#{time.monotonic_ns()}")
            raw.setdefault("sent_at", world.now)
            raw.setdefault("body", {})
            env = Envelope.from_line(canonical(raw))
        except (ValueError, AttributeError) as exc:
            sys.stderr.write(f"bad envelope: {exc}\n")
            continue
        world.bus._deliver(env)
    return EXIT_OK


def _market_runner(args, settings: Settings) -> ScenarioRunner:
    if args.market:
        runner = ScenarioRunner(load_scenario(Path(args.market)), settings.seed,
                                tuple(Path(p) for p in settings.include))
        runner.run()
        return runner
    runner = ScenarioRunner(Scenario("market", []), settings.seed)
    runner.run()
    w = runner.world
    runner.bank = BankService(w)
    runner.sls = DirectoryService(w)
    for spec in args.host or ["h1"]:
        h = HostSpec.parse(spec)
        host = w.add_host(h.host_id, cpu_capacity=h.cpu, memory_total=h.mem)
        runner.bank.bank.open_account(f"provider-{h.host_id}")
        auc = Auctioneer(w, host, f"provider-{h.host_id}", monitor="monitor")
        runner.auctioneers[h.host_id] = auc
        auc.start()
    w.advance(w.now + 1.0)
    return runner


def cmd_bid(args, settings: Settings) -> int:
    runner = _market_runner(args, settings)
    w = runner.world
    bank = runner.bank
    if bank is None or runner.sls is None:
        raise UsageError("the market needs a bank and an sls")
    budget = credit(args.budget)
    try:
        bank.bank.open_account(args.account, args.grant if args.grant is not None else budget)
    except BankError as exc:
        logger.info("account %s: %s", args.account, exc)
    policy = BidPolicy(args.target, budget, args.duration, args.interval,
                       VmSpec(vcpus=args.vcpus, memory=args.mem))
    agent = BidderAgent(w, args.account, policy, auto=args.mode == "auto", host=args.pin)
    agent.start()
    until = settings.until if settings.until is not None else w.now + (
        args.duration if args.mode == "auto" else 30.0)
    w.advance(until)
    share = 0.0
    if agent.bid is not None and agent.host_id in runner.auctioneers:
        share = runner.auctioneers[agent.host_id].shares.get(agent.bid.bid_id, 0.0)
    _print_json({
        "account": args.account, "mode": args.mode, "host": agent.host_id,
        "bid_id": agent.bid.bid_id if agent.bid else None, "vm_id": agent.vm_id,
        "share": share, "target": args.target, "adjustments": len(agent.actions),
        "notices": agent.notices, "error": agent.error, "now": w.now,
        "balance": str(bank.bank.balance(args.account)),
    })
    if settings.log_dir:
        _write_log(Path(settings.log_dir), w)
    return EXIT_FAIL if agent.error else EXIT_OK


def _write_log(log_dir: Path, world: World) -> None:
    log_dir.mkdir(parents=True, exist_ok=True)
    (log_dir / "messages.ndjson").write_text("".join(l + "\n" for l in world.bus.log), encoding="utf-8")
    (log_dir / "trace.ndjson").write_text("".join(l + "\n" for l in world.trace_lines()),
                                          encoding="utf-8")


def _session_dir(settings: Settings) -> Path:
    return Path(settings.log_dir or "agora-run")


def cmd_deploy(args, settings: Settings) -> int:
    log_dir = _session_dir(settings)
    try:
        session = Session.load(log_dir)
    except FileNotFoundError:
        session = Session(seed=settings.seed,
                          hosts=[HostSpec.parse(h) for h in (args.host or ([] if args.market else ["h1"]))],
                          market=str(Path(args.market).resolve()) if args.market else None,
                          include=[str(Path(p).resolve()) for p in settings.include])
    path = Path(args.file).resolve()
    # Fail fast on a bad file before touching the session.
    session._load(str(path))
    dep_id = args.id or session.next_id()
    if any(c.deployment == dep_id for c in session.commands):
        raise UsageError(f"deployment {dep_id} already exists")
    runner, engine = session.replay()
    session.commands.append(Command(runner.world.now, "deploy", dep_id, str(path)))
    dep = engine.deploy(session._load(str(path)), dep_id)
    session.now = run_until_settled(runner, dep)
    session.save(log_dir)
    _write_log(log_dir, runner.world)
    _print_json(status_table(dep) | {"now": session.now})
    return EXIT_OK if dep.root.state.value == "STARTED" else EXIT_FAIL


def cmd_terminate(args, settings: Settings) -> int:
    log_dir = _session_dir(settings)
    session = Session.load(log_dir)
    runner, engine = session.replay()
    dep = engine.get(args.deployment)
    session.commands.append(Command(runner.world.now, "terminate", args.deployment))
    engine.terminate(args.deployment)
    session.now = run_until_settled(runner, dep)
    session.save(log_dir)
    _write_log(log_dir, runner.world)
    _print_json(status_table(dep) | {"now": session.now})
    return EXIT_OK if dep.root.state.value == "TERMINATED" else EXIT_FAIL


def cmd_status(args, settings: Settings) -> int:
    session = Session.load(_session_dir(settings))
    until = settings.until if settings.until is not None and settings.until > session.now else None
    runner, engine = session.replay(until)
    _print_json(status_table(engine.get(args.deployment)) | {"now": runner.world.now})
    return EXIT_OK


def cmd_descriptor(args, settings: Settings) -> int:
    path = Path(args.file)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    try:
        return _descriptor_action(args, path, text, settings)
    except descriptor.DescriptorError as exc:
        # Bad input is a diagnostic here, not an internal failure.
        sys.stderr.write(f"{path}: {exc}\n")
        return EXIT_FAIL


def _descriptor_action(args, path: Path, text: str, settings: Settings) -> int:
    doc = descriptor.parse(text)
    include = [Path(p) for p in settings.include] + [path.parent]
    if args.action == "parse":
        sys.stdout.write(descriptor.to_text(doc))
        return EXIT_OK
    if args.action == "resolve":
        sys.stdout.write(descriptor.to_text(descriptor.resolve(doc, include)))
        return EXIT_OK
    if args.action == "fmt":
        formatted = descriptor.to_text(doc)
        if args.check:
            return EXIT_OK if formatted == text else EXIT_FAIL
        if args.write:
            path.write_text(formatted, encoding="utf-8")
        else:
            sys.stdout.write(formatted)
        return EXIT_OK
    problems = descriptor.lint(doc, include, known_classes=CLASS_KINDS)
    for p in problems:
        sys.stdout.write(f"{path}: {p}\n")
    return EXIT_FAIL if problems else EXIT_OK


# -- parser ------------------------------------------------------------------

def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=default, help="RNG seed (default 0)")
    g.add_argument("--until", type=float, default=default, help="virtual time to run to")
    g.add_argument("--log-dir", dest="log_dir", default=default, help="directory for logs and session state")
    g.add_argument("--config", default=default, help="JSON config file")
    g.add_argument("-I", "--include", action="append", default=default,
                   help="prototype search path (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=default)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="agora", parents=[_common(suppress=False)],
                                     description="Proportional-share CPU market on simulated hosts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("daemon", parents=[common], help="run one market service")
    p.add_argument("role", choices=["bank", "sls", "auctioneer"])
    p.add_argument("--endpoint")
    p.add_argument("--stdio", action="store_true", help="wall-clock mode, ndjson envelopes on stdin/stdout")
    p.add_argument("--host-id", dest="host_id")
    p.add_argument("--cpu", type=float)
    p.add_argument("--mem", type=int)
    p.add_argument("--provider")
    p.add_argument("--heartbeat", type=float, default=10.0)
    p.add_argument("--supply", default="1000000000.00")
    p.add_argument("--journal")
    p.add_argument("--window", type=float, default=30.0)
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("scenario", help="scenario files")
    ssub = p.add_subparsers(dest="action", required=True)
    r = ssub.add_parser("run", parents=[common], help="run a .scn file")
    r.add_argument("file")
    r.add_argument("--format", choices=["text", "json"], default="text")
    r.set_defaults(func=cmd_scenario_run)

    p = sub.add_parser("bid", help="place a bid through the directory")
    bsub = p.add_subparsers(dest="mode", required=True)
    for mode in ("once", "auto"):
        b = bsub.add_parser(mode, parents=[common])
        b.add_argument("--account", required=True)
        b.add_argument("--target", type=float, required=True, help="target CPU share in (0, 1)")
        b.add_argument("--budget", required=True)
        b.add_argument("--duration", type=float, required=True)
        b.add_argument("--interval", type=float, default=5.0)
        b.add_argument("--mem", type=int, default=512)
        b.add_argument("--vcpus", type=int, default=1)
        b.add_argument("--grant", help="opening balance (default: the budget)")
        b.add_argument("--pin", help="only consider this host")
        b.add_argument("--market", help="scenario file that sets up the market")
        b.add_argument("--host", action="append", help="id[:cpu[:mem]] when no --market is given")
        b.set_defaults(func=cmd_bid)

    p = sub.add_parser("deploy", parents=[common], help="deploy a .sd description")
    p.add_argument("file")
    p.add_argument("--id")
    p.add_argument("--host", action="append", help="id[:cpu[:mem]] (default h1)")
    p.add_argument("--market", help="scenario file that sets up hosts and the market")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("terminate", parents=[common], help="terminate a deployment")
    p.add_argument("deployment")
    p.set_defaults(func=cmd_terminate)

    p = sub.add_parser("status", parents=[common], help="show a deployment")
    p.add_argument("deployment")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("report", parents=[common], help="rebuild a report from a message log")
    p.add_argument("log")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("descriptor", help="descriptor tools")
    dsub = p.add_subparsers(dest="action", required=True)
    for action in ("parse", "resolve", "fmt", "lint"):
        d = dsub.add_parser(action, parents=[common])
        d.add_argument("file")
        if action == "fmt":
            mx = d.add_mutually_exclusive_group()
            mx.add_argument("--check", action="store_true")
            mx.add_argument("--write", action="store_true")
        d.set_defaults(func=cmd_descriptor)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", None) or 0, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args)
        return args.func(args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"agora: error: {exc}\n")
        return EXIT_USAGE
    except (ScenarioError, ReportError, descriptor.DescriptorError, FileNotFoundError,
            ValueError) as exc:
        sys.stderr.write(f"agora: error: {exc}\n")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        sys.stderr.write(f"agora: internal error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
