"""Service location: a soft-state registry of provider hosts, ranked by price."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

from .market import HostCapacity
from .simnet import Envelope, Service, World

logger = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 10.0
LIVENESS_WINDOW = 3 * HEARTBEAT_INTERVAL


class DirectoryError(Exception):
    pass


class UnknownHost(DirectoryError):
    pass


@dataclass(frozen=True)
class HostRecord:
    host_id: str
    address: str
    capacity: HostCapacity
    current_price: float = 0.0
    last_heartbeat: float = 0.0
    # Not part of the ranking key; lets bidders filter on memory fit.
    memory_free: Optional[int] = None

    def to_wire(self) -> dict:
        return {
            "host_id": self.host_id,
            "address": self.address,
            "cpu_capacity": self.capacity.cpu_capacity,
            "memory_total": self.capacity.memory_total,
            "memory_free": self.memory_free,
            "current_price": self.current_price,
            "last_heartbeat": self.last_heartbeat,
        }

    @classmethod
    def from_wire(cls, body: dict) -> "HostRecord":
        try:
            capacity = HostCapacity(float(body["cpu_capacity"]), int(body.get("memory_total", 4096)))
        except (TypeError, ValueError) as exc:
            raise DirectoryError(f"malformed capacity: {exc}") from None
        mem_free = body.get("memory_free")
        return cls(
            host_id=str(body["host_id"]),
            address=str(body.get("address", body["host_id"])),
            capacity=capacity,
            current_price=float(body.get("current_price", 0.0)),
            last_heartbeat=float(body.get("last_heartbeat", 0.0)),
            memory_free=None if mem_free is None else int(mem_free),
        )


def rank_key(record: HostRecord):
    return (record.current_price, record.host_id)


class Directory:
    def __init__(self, now: Callable[[], float] = lambda: 0.0,
                 liveness_window: float = LIVENESS_WINDOW):
        self._now = now
        self.liveness_window = liveness_window
        self._records: Dict[str, HostRecord] = {}

    def _live(self, record: HostRecord) -> bool:
        return self._now() - record.last_heartbeat <= self.liveness_window

    def evict_stale(self) -> List[str]:
        stale = [hid for hid, rec in self._records.items() if not self._live(rec)]
        for hid in stale:
            del self._records[hid]
            logger.debug("evicted %s", hid)
        return stale

    def register(self, record: HostRecord) -> HostRecord:
        if not isinstance(record.capacity, HostCapacity):
            raise DirectoryError("malformed capacity")
        if record.current_price < 0:
            raise DirectoryError("price must be non-negative")
        stored = replace(record, last_heartbeat=self._now())
        self._records[record.host_id] = stored
        return stored

    def heartbeat(self, host_id: str, current_price: float,
                  memory_free: Optional[int] = None) -> HostRecord:
        self.evict_stale()
        if host_id not in self._records:
            raise UnknownHost(f"unknown host {host_id!r}; re-register")
        if current_price < 0:
            raise DirectoryError("price must be non-negative")
        rec = self._records[host_id]
        changes = {"current_price": float(current_price), "last_heartbeat": self._now()}
        if memory_free is not None:
            changes["memory_free"] = int(memory_free)
        rec = self._records[host_id] = replace(rec, **changes)
        return rec

    def query_ranked(self, limit: int) -> List[HostRecord]:
        if limit <= 0:
            raise DirectoryError("limit must be positive")
        self.evict_stale()
        return sorted(self._records.values(), key=rank_key)[:limit]

    def clear(self) -> None:
        self._records.clear()

    def __contains__(self, host_id: str) -> bool:
        rec = self._records.get(host_id)
        return rec is not None and self._live(rec)

    def __len__(self) -> int:
        return sum(1 for r in self._records.values() if self._live(r))


class DirectoryService(Service):
    """`sls.register`, `sls.heartbeat`, `sls.query` over the bus.

    State is soft: a restart forgets every record and hosts re-register
    when their next heartbeat is refused.
    """

    prefix = "sls"

    def __init__(self, world: World, endpoint: str = "sls",
                 liveness_window: float = LIVENESS_WINDOW):
        super().__init__(world.bus, endpoint)
        self.world = world
        self.directory = Directory(lambda: world.clock.now, liveness_window)
        world.services[endpoint] = self

    def on_restart(self) -> None:
        self.directory.clear()

    def on_register(self, env: Envelope) -> None:
        try:
            rec = self.directory.register(HostRecord.from_wire(env.body))
        except (DirectoryError, KeyError) as exc:
            self.reply(env, ok=False, error=str(exc))
            return
        self.reply(env, ok=True, host_id=rec.host_id)

    def on_heartbeat(self, env: Envelope) -> None:
        body = env.body
        try:
            rec = self.directory.heartbeat(body["host_id"], float(body["current_price"]),
                                           body.get("memory_free"))
        except UnknownHost as exc:
            self.reply(env, ok=False, error="unknown-host", detail=str(exc))
            return
        except DirectoryError as exc:
            self.reply(env, ok=False, error=str(exc))
            return
        self.reply(env, ok=True, host_id=rec.host_id)

    def on_query(self, env: Envelope) -> None:
        limit = int(env.body.get("limit", 10))
        try:
            hosts = self.directory.query_ranked(limit)
        except DirectoryError as exc:
            self.reply(env, ok=False, error=str(exc))
            return
        self.reply(env, ok=True, hosts=[h.to_wire() for h in hosts])
