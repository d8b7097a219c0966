"""A deterministic world: clock, bus, hosts, seeded RNG, faults and traces."""

from __future__ import annotations

import enum
import logging
import random
from typing import Dict, List, Optional

from .bus import Bus, BusError, DEFAULT_LATENCY, canonical
from .clock import ProcessGen, Process, VirtualClock, spawn
from .host import SimHost

logger = logging.getLogger(__name__)


class FaultKind(str, enum.Enum):
    VM_KILL = "VM_KILL"
    MESSAGE_DROP = "MESSAGE_DROP"
    SERVICE_CRASH = "SERVICE_CRASH"


class FaultError(ValueError):
    pass


class World:
    def __init__(self, seed: int = 0, latency: float = DEFAULT_LATENCY):
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = VirtualClock()
        self.bus = Bus(self.clock, latency=latency)
        self.hosts: Dict[str, SimHost] = {}
        self.trace: List[dict] = []
        self.services: Dict[str, object] = {}

    @property
    def now(self) -> float:
        return self.clock.now

    def record(self, kind: str, **fields) -> dict:
        entry = {"t": self.clock.now, "kind": kind, **fields}
        self.trace.append(entry)
        return entry

    def trace_lines(self) -> List[str]:
        return [canonical(e) for e in self.trace]

    def add_host(self, host_id: str, **kwargs) -> SimHost:
        if host_id in self.hosts:
            raise ValueError(f"host {host_id} already exists")
        host = SimHost(host_id, self.clock, **kwargs)
        self.hosts[host_id] = host
        host.subscribe(lambda vm_id, state, h=host_id: self.record(
            "vm", host=h, vm=vm_id, state=state.value))
        return host

    def host(self, host_id: str) -> SimHost:
        try:
            return self.hosts[host_id]
        except KeyError:
            raise ValueError(f"unknown host {host_id}") from None

    def find_vm(self, vm_id: str) -> Optional[SimHost]:
        for host in self.hosts.values():
            if vm_id in host.vms:
                return host
        return None

    def spawn(self, gen: ProcessGen, name: str = "process") -> Process:
        return spawn(self.clock, gen, name)

    def advance(self, to: float):
        return self.clock.advance(to)

    def run_for(self, dt: float):
        return self.clock.advance(self.clock.now + dt)

    # -- faults -----------------------------------------------------------
    def inject_fault(self, kind, target: str, at: Optional[float] = None, **opts) -> None:
        """Schedule a fault.

        VM_KILL targets a vm id (optionally ``host/vm``); MESSAGE_DROP a
        msg_type glob, with optional ``recipient``/``sender``/``count``;
        SERVICE_CRASH a bus endpoint, with optional ``restart_at``.
        """
        kind = FaultKind(kind)
        at = self.clock.now if at is None else float(at)
        if at < self.clock.now:
            raise FaultError(f"fault time {at} is in the past")
        if kind is FaultKind.VM_KILL:
            host_id, _, vm_id = target.rpartition("/")
            if host_id and host_id not in self.hosts:
                raise FaultError(f"unknown host {host_id}")
            if at == self.clock.now and self._locate(host_id, vm_id) is None:
                raise FaultError(f"unknown vm {target}")
            self.clock.schedule(at, self._kill, host_id, vm_id, label=f"fault:VM_KILL:{target}")
        elif kind is FaultKind.MESSAGE_DROP:
            count = int(opts.get("count", 1))
            self.clock.schedule(at, self._drop, target, opts.get("recipient"), opts.get("sender"),
                                count, label=f"fault:MESSAGE_DROP:{target}")
        elif kind is FaultKind.SERVICE_CRASH:
            if not self.bus.is_registered(target):
                raise FaultError(f"unknown service {target}")
            self.clock.schedule(at, self._crash, target, label=f"fault:SERVICE_CRASH:{target}")
            restart_at = opts.get("restart_at")
            if restart_at is not None:
                self.clock.schedule(float(restart_at), self._restart, target,
                                    label=f"restart:{target}")

    def _locate(self, host_id: str, vm_id: str) -> Optional[SimHost]:
        if host_id:
            host = self.hosts[host_id]
            return host if vm_id in host.vms else None
        return self.find_vm(vm_id)

    def _kill(self, host_id: str, vm_id: str) -> None:
        host = self._locate(host_id, vm_id)
        if host is None:
            self.record("fault", fault="VM_KILL", target=vm_id, hit=False)
            return
        self.record("fault", fault="VM_KILL", target=vm_id, hit=True)
        host.kill_vm(vm_id)

    def _drop(self, pattern, recipient, sender, count) -> None:
        self.record("fault", fault="MESSAGE_DROP", target=pattern)
        self.bus.drop_next(pattern, recipient=recipient, sender=sender, count=count)

    def _crash(self, endpoint: str) -> None:
        self.record("fault", fault="SERVICE_CRASH", target=endpoint)
        self.bus.crash(endpoint)
        svc = self.services.get(endpoint)
        if svc is not None and hasattr(svc, "on_crash"):
            svc.on_crash()

    def _restart(self, endpoint: str) -> None:
        self.record("restart", target=endpoint)
        self.bus.restart(endpoint)
        svc = self.services.get(endpoint)
        if svc is not None and hasattr(svc, "on_restart"):
            svc.on_restart()

    def restart(self, endpoint: str) -> None:
        if not self.bus.is_registered(endpoint):
            raise BusError(f"unknown service {endpoint}")
        self._restart(endpoint)
