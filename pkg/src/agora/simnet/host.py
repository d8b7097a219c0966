"""Simulated physical hosts and the VMs they run.

A host keeps a resource ledger (memory reservations, disk-backed image
tokens, VM table) that lifecycle tests snapshot and compare byte for byte.
CPU work is integrated from a piecewise-constant rate per VM.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .bus import canonical
from .clock import VirtualClock

logger = logging.getLogger(__name__)

RATE_TOLERANCE = 1e-9


class HostError(Exception):
    pass


class VmState(str, enum.Enum):
    PROVISIONING = "PROVISIONING"
    BOOTING = "BOOTING"
    RUNNING = "RUNNING"
    TERMINATING = "TERMINATING"
    DEAD = "DEAD"


_VM_EDGES = {
    VmState.PROVISIONING: {VmState.BOOTING, VmState.TERMINATING},
    VmState.BOOTING: {VmState.RUNNING, VmState.TERMINATING},
    VmState.RUNNING: {VmState.TERMINATING},
    VmState.TERMINATING: {VmState.DEAD},
    VmState.DEAD: set(),
}


@dataclass(frozen=True)
class VmSpec:
    vcpus: int = 1
    memory: int = 512
    image: str = "default"
    disk: int = 1024
    swap: int = 0

    def __post_init__(self):
        for name in ("vcpus", "memory", "disk"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"VmSpec.{name} must be positive")
        if int(self.swap) < 0:
            raise ValueError("VmSpec.swap must be non-negative")

    def to_wire(self) -> dict:
        return {"vcpus": self.vcpus, "memory": self.memory, "image": self.image,
                "disk": self.disk, "swap": self.swap}

    @classmethod
    def from_wire(cls, body: dict) -> "VmSpec":
        return cls(vcpus=int(body.get("vcpus", 1)), memory=int(body.get("memory", 512)),
                   image=str(body.get("image", "default")), disk=int(body.get("disk", 1024)),
                   swap=int(body.get("swap", 0)))


@dataclass
class VmInstance:
    vm_id: str
    host_id: str
    spec: VmSpec
    owner: str
    state: VmState = VmState.PROVISIONING
    cpu_rate: float = 0.0
    accumulated_cpu_seconds: float = 0.0
    history: List[tuple] = field(default_factory=list)


Listener = Callable[[str, VmState], None]


class SimHost:
    def __init__(self, host_id: str, clock: VirtualClock, cpu_capacity: float = 1.0,
                 memory_total: int = 4096, disk_total: int = 100_000, boot_delay: float = 5.0):
        if not cpu_capacity > 0:
            raise HostError("cpu_capacity must be positive")
        self.host_id = host_id
        self.clock = clock
        self.cpu_capacity = float(cpu_capacity)
        self.memory_total = int(memory_total)
        self.disk_total = int(disk_total)
        self.boot_delay = float(boot_delay)
        self.vms: Dict[str, VmInstance] = {}
        self.memory_reserved: Dict[str, int] = {}
        self.images: Dict[str, dict] = {}
        # CPU-seconds of VMs already removed from the table.
        self.retired: Dict[str, float] = {}
        self._listeners: List[Listener] = []
        clock.on_time_advance(self._integrate)

    # -- accounting -------------------------------------------------------
    def _integrate(self, old: float, new: float) -> None:
        dt = new - old
        for vm in self.vms.values():
            if vm.state is VmState.RUNNING and vm.cpu_rate > 0:
                vm.accumulated_cpu_seconds += vm.cpu_rate * dt

    def cpu_seconds(self, vm_id: str) -> float:
        if vm_id in self.vms:
            return self.vms[vm_id].accumulated_cpu_seconds
        if vm_id in self.retired:
            return self.retired[vm_id]
        raise HostError(f"{self.host_id}: unknown vm {vm_id}")

    @property
    def memory_free(self) -> int:
        return self.memory_total - sum(self.memory_reserved.values())

    @property
    def disk_free(self) -> int:
        return self.disk_total - sum(img["disk"] + img["swap"] for img in self.images.values())

    def total_rate(self) -> float:
        return sum(vm.cpu_rate for vm in self.vms.values())

    def snapshot(self) -> bytes:
        """Canonical bytes of the resource ledger."""
        ledger = {
            "host": self.host_id,
            "memory_reserved": self.memory_reserved,
            "images": self.images,
            "vms": {vid: {"state": vm.state.value, "owner": vm.owner, "spec": vm.spec.to_wire()}
                    for vid, vm in self.vms.items()},
        }
        return canonical(ledger).encode("utf-8")

    # -- listeners --------------------------------------------------------
    def subscribe(self, fn: Listener) -> None:
        self._listeners.append(fn)

    def _set_state(self, vm: VmInstance, state: VmState, forced: bool = False) -> None:
        if not forced and state not in _VM_EDGES[vm.state]:
            raise HostError(f"{vm.vm_id}: illegal transition {vm.state.value} -> {state.value}")
        vm.history.append((self.clock.now, vm.state.value, state.value))
        vm.state = state
        for fn in list(self._listeners):
            fn(vm.vm_id, state)

    # -- storage ----------------------------------------------------------
    def prepare_image(self, token: str, image: str, disk: int, swap: int = 0) -> None:
        if token in self.images:
            raise HostError(f"{self.host_id}: image token {token} already prepared")
        if disk + swap > self.disk_free:
            raise HostError(f"{self.host_id}: insufficient disk for {token} "
                            f"({disk + swap} MiB wanted, {self.disk_free} free)")
        self.images[token] = {"image": image, "disk": int(disk), "swap": int(swap)}

    def release_image(self, token: str) -> None:
        self.images.pop(token, None)

    # -- VM lifecycle -----------------------------------------------------
    def create_vm(self, vm_id: str, spec: VmSpec, owner: str) -> VmInstance:
        if vm_id in self.vms or vm_id in self.retired:
            raise HostError(f"{self.host_id}: vm id {vm_id} already used")
        if spec.memory > self.memory_free:
            raise HostError(f"{self.host_id}: insufficient memory for {vm_id} "
                            f"({spec.memory} MiB wanted, {self.memory_free} free)")
        vm = VmInstance(vm_id, self.host_id, spec, owner)
        self.vms[vm_id] = vm
        self.memory_reserved[vm_id] = spec.memory
        return vm

    def boot_vm(self, vm_id: str, delay: Optional[float] = None) -> None:
        vm = self._get(vm_id)
        self._set_state(vm, VmState.BOOTING)
        delay = self.boot_delay if delay is None else float(delay)
        self.clock.call_later(delay, self._booted, vm_id, label=f"boot:{vm_id}")

    def _booted(self, vm_id: str) -> None:
        vm = self.vms.get(vm_id)
        if vm is not None and vm.state is VmState.BOOTING:
            self._set_state(vm, VmState.RUNNING)

    def ping(self, vm_id: str) -> Optional[VmState]:
        vm = self.vms.get(vm_id)
        return None if vm is None else vm.state

    def kill_vm(self, vm_id: str) -> None:
        """Abrupt death (fault injection); the record stays until removed."""
        vm = self._get(vm_id)
        if vm.state is VmState.DEAD:
            return
        vm.cpu_rate = 0.0
        self._set_state(vm, VmState.DEAD, forced=True)

    def shutdown_vm(self, vm_id: str) -> None:
        vm = self.vms.get(vm_id)
        if vm is None or vm.state in (VmState.DEAD, VmState.TERMINATING):
            return
        vm.cpu_rate = 0.0
        self._set_state(vm, VmState.TERMINATING)
        self._set_state(vm, VmState.DEAD)

    def remove_vm(self, vm_id: str) -> None:
        """Drop the VM record and its memory reservation. Idempotent."""
        vm = self.vms.get(vm_id)
        if vm is None:
            return
        if vm.state is not VmState.DEAD:
            self.shutdown_vm(vm_id)
        # A DEAD listener may already have removed it.
        if self.vms.pop(vm_id, None) is not None:
            self.memory_reserved.pop(vm_id, None)
            self.retired[vm_id] = vm.accumulated_cpu_seconds

    # -- scheduler --------------------------------------------------------
    def set_rates(self, rates: Dict[str, float]) -> None:
        """Replace the CPU allocation; VMs not named get rate 0."""
        for vm_id in rates:
            self._get(vm_id)
        total = sum(rates.values())
        if total > self.cpu_capacity + RATE_TOLERANCE:
            raise HostError(f"{self.host_id}: rates sum {total} exceeds capacity {self.cpu_capacity}")
        for vm_id, vm in self.vms.items():
            vm.cpu_rate = 0.0 if vm.state is VmState.DEAD else float(rates.get(vm_id, 0.0))

    def _get(self, vm_id: str) -> VmInstance:
        try:
            return self.vms[vm_id]
        except KeyError:
            raise HostError(f"{self.host_id}: unknown vm {vm_id}") from None
