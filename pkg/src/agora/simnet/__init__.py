from .bus import Bus, BusError, Envelope, Service, canonical, UNDELIVERABLE
from .clock import At, ClockError, Future, Process, VirtualClock, resolved, spawn
from .host import HostError, SimHost, VmInstance, VmSpec, VmState
from .world import FaultError, FaultKind, World

__all__ = [
    "At", "Bus", "BusError", "ClockError", "Envelope", "FaultError", "FaultKind", "Future",
    "HostError", "Process", "Service", "SimHost", "UNDELIVERABLE", "VirtualClock", "VmInstance",
    "VmSpec", "VmState", "World", "canonical", "resolved", "spawn",
]
