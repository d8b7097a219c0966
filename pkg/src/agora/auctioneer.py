"""Per-host auctioneer: takes bids, settles them with the bank, boots VMs and
splits the host's CPU among active bids in proportion to their rates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

from . import market
from .market import Bid, HostCapacity, MalformedBid
from .simnet import Envelope, Future, Service, SimHost, VmSpec, VmState, World

logger = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 10.0


class AuctionError(Exception):
    pass


@dataclass
class ActiveBid:
    bid: Bid
    vm_id: str
    client: str
    notify: bool = False

    @property
    def t_end(self) -> float:
        return self.bid.t_end


class Auctioneer(Service):
    prefix = "auc"

    def __init__(self, world: World, host: SimHost, provider_account: str,
                 endpoint: Optional[str] = None, bank: str = "bank", sls: str = "sls",
                 heartbeat_interval: float = HEARTBEAT_INTERVAL, monitor: Optional[str] = None):
        super().__init__(world.bus, endpoint or f"auc:{host.host_id}")
        self.world = world
        self.host = host
        self.capacity = HostCapacity(host.cpu_capacity, host.memory_total)
        self.provider_account = provider_account
        self.bank = bank
        self.sls = sls
        self.monitor = monitor
        self.heartbeat_interval = heartbeat_interval
        self.active: Dict[str, ActiveBid] = {}
        self._pending_memory: Dict[str, int] = {}
        self._boot_waiters: Dict[str, Future] = {}
        self._vm_to_bid: Dict[str, str] = {}
        self.shares: Dict[str, float] = {}
        self.price = 0.0
        host.subscribe(self._on_vm_event)
        world.services[self.endpoint] = self

    @property
    def host_id(self) -> str:
        return self.host.host_id

    # -- service loop -----------------------------------------------------
    def start(self) -> None:
        self._register()
        self.clock.call_later(self.heartbeat_interval, self._tick, label=f"tick:{self.host_id}")

    def _tick(self) -> None:
        if self.up:
            self.expire_bids(self.clock.now)
            self._heartbeat()
        self.clock.call_later(self.heartbeat_interval, self._tick, label=f"tick:{self.host_id}")

    def _register(self) -> None:
        record = {
            "host_id": self.host_id, "address": self.endpoint,
            "cpu_capacity": self.capacity.cpu_capacity, "memory_total": self.capacity.memory_total,
            "memory_free": self.memory_free, "current_price": self.price,
        }
        self.request(self.sls, "sls.register", record)

    def _heartbeat(self) -> None:
        fut = self.request(self.sls, "sls.heartbeat", {
            "host_id": self.host_id, "current_price": self.price, "memory_free": self.memory_free})

        def done(f: Future) -> None:
            if self.up and f.result().get("error") == "unknown-host":
                self._register()
        fut.add_done_callback(done)

    @property
    def memory_free(self) -> int:
        return self.host.memory_free - sum(self._pending_memory.values())

    # -- operations -------------------------------------------------------
    def submit_bid(self, bid: Bid, vm_spec: VmSpec, client: str = "", notify: bool = False) -> Future:
        """Start settlement for `bid`; the future resolves with the reply body.

        The reply is sent once the VM is running, or as soon as the bid is
        rejected.
        """
        result = Future(f"submit:{bid.bid_id}")
        market.validate_bid(bid)
        if bid.bid_id in self.active or bid.bid_id in self._pending_memory:
            raise AuctionError(f"duplicate bid id {bid.bid_id}")
        if vm_spec.memory > self.memory_free:
            result.resolve({"ok": False, "error": "insufficient-memory", "bid_id": bid.bid_id,
                            "host_id": self.host_id})
            return result
        self._pending_memory[bid.bid_id] = vm_spec.memory
        fut = self.request(self.bank, "bank.settle",
                           {"bid": bid.to_wire(), "provider": self.provider_account})
        fut.add_done_callback(
            lambda f: self._settled(bid, vm_spec, client, notify, f.result(), result))
        return result

    def _settled(self, bid: Bid, spec: VmSpec, client: str, notify: bool, reply: dict,
                 result: Future) -> None:
        self._pending_memory.pop(bid.bid_id, None)
        if not reply.get("ok"):
            result.resolve({"ok": False, "error": reply.get("error", "settlement failed"),
                            "bid_id": bid.bid_id, "host_id": self.host_id})
            return
        now = self.clock.now
        granted = replace(bid, placed_at=now)
        vm_id = f"vm-{bid.bid_id}"
        self.host.create_vm(vm_id, spec, owner=self.endpoint)
        self.active[bid.bid_id] = ActiveBid(granted, vm_id, client, notify)
        self._vm_to_bid[vm_id] = bid.bid_id
        self._boot_waiters[vm_id] = result
        self.host.boot_vm(vm_id)
        self._schedule_expiry(granted.t_end)
        self.reallocate()

    def adjust_bid(self, bid_id: str, new_duration: float) -> Dict[str, float]:
        entry = self.active.get(bid_id)
        now = self.clock.now
        if entry is None or entry.t_end <= now:
            raise AuctionError(f"unknown or expired bid {bid_id}")
        new_duration = float(new_duration)
        if not new_duration > 0:
            raise AuctionError("duration must be positive")
        if entry.bid.placed_at + new_duration <= now:
            raise AuctionError(f"new end {entry.bid.placed_at + new_duration} is not after now {now}")
        entry.bid = entry.bid.with_duration(new_duration)
        self._schedule_expiry(entry.t_end)
        return self.reallocate()

    def expire_bids(self, now: float) -> List[str]:
        expired = [bid_id for bid_id, a in self.active.items() if a.t_end <= now]
        terminated = []
        for bid_id in expired:
            entry = self.active.pop(bid_id)
            self._vm_to_bid.pop(entry.vm_id, None)
            waiter = self._boot_waiters.pop(entry.vm_id, None)
            if waiter is not None:
                waiter.resolve({"ok": False, "error": "expired-before-boot", "bid_id": bid_id,
                                "host_id": self.host_id})
            self.host.remove_vm(entry.vm_id)
            terminated.append(entry.vm_id)
        if terminated:
            self.reallocate()
        return terminated

    def reallocate(self) -> Dict[str, float]:
        bids = [a.bid for a in self.active.values()]
        self.shares = market.compute_shares(bids)
        rates = {self.active[b].vm_id: s * self.capacity.cpu_capacity for b, s in self.shares.items()}
        self.host.set_rates(rates)
        self.price = market.host_price(bids, self.capacity)
        self._heartbeat()
        if self.monitor is not None:
            self.send(self.monitor, "mon.alloc", {
                "host_id": self.host_id, "shares": self.shares, "price": self.price,
                "vm_rates": rates,
            })
        status = None
        for entry in self.active.values():
            if entry.notify:
                status = status or self.status()
                self.send(entry.client, "auc.notify", status)
        return dict(self.shares)

    def status(self) -> dict:
        bids = []
        for bid_id, a in self.active.items():
            vm = self.host.vms.get(a.vm_id)
            bids.append({
                "bid_id": bid_id, "bidder": a.bid.bidder, "amount": str(a.bid.amount),
                "duration": a.bid.duration, "placed_at": a.bid.placed_at, "t_end": a.t_end,
                "rate": a.bid.rate(), "share": self.shares.get(bid_id, 0.0), "vm_id": a.vm_id,
                "vm_state": vm.state.value if vm else None,
                "cpu_rate": vm.cpu_rate if vm else 0.0,
            })
        return {"ok": True, "host_id": self.host_id, "now": self.clock.now, "price": self.price,
                "cpu_capacity": self.capacity.cpu_capacity, "memory_free": self.memory_free,
                "shares": dict(self.shares), "bids": bids}

    # -- internals --------------------------------------------------------
    def _schedule_expiry(self, t_end: float) -> None:
        self.clock.schedule(max(t_end, self.clock.now), self._expire_tick,
                            label=f"expire:{self.host_id}")

    def _expire_tick(self) -> None:
        if self.up:
            self.expire_bids(self.clock.now)

    def _on_vm_event(self, vm_id: str, state: VmState) -> None:
        bid_id = self._vm_to_bid.get(vm_id)
        if bid_id is None:
            return
        if state is VmState.RUNNING:
            waiter = self._boot_waiters.pop(vm_id, None)
            if waiter is not None:
                a = self.active[bid_id]
                waiter.resolve({"ok": True, "bid_id": bid_id, "vm_id": vm_id,
                                "host_id": self.host_id, "placed_at": a.bid.placed_at,
                                "t_end": a.t_end, "share": self.shares.get(bid_id, 0.0)})
        elif state is VmState.DEAD:
            # Died under us: the bid goes with it, credits stay with the provider.
            self._vm_to_bid.pop(vm_id, None)
            self.active.pop(bid_id, None)
            waiter = self._boot_waiters.pop(vm_id, None)
            if waiter is not None:
                waiter.resolve({"ok": False, "error": "vm-died", "bid_id": bid_id,
                                "host_id": self.host_id})
            self.host.remove_vm(vm_id)
            self.reallocate()

    # -- wire -------------------------------------------------------------
    def on_submit(self, env: Envelope) -> None:
        try:
            bid = Bid.from_wire(env.body["bid"])
            spec = VmSpec.from_wire(env.body.get("vm_spec", {}))
            fut = self.submit_bid(bid, spec, client=env.sender,
                                  notify=bool(env.body.get("notify", False)))
        except (AuctionError, MalformedBid, ValueError, KeyError) as exc:
            self.reply(env, ok=False, error=str(exc))
            return
        fut.add_done_callback(lambda f: self.up and self.bus.reply(env, f.result()))

    def on_adjust(self, env: Envelope) -> None:
        try:
            shares = self.adjust_bid(env.body["bid_id"], env.body["duration"])
        except (AuctionError, ValueError, KeyError) as exc:
            self.reply(env, ok=False, error=str(exc))
            return
        self.reply(env, ok=True, bid_id=env.body["bid_id"], shares=shares, price=self.price)

    def on_status(self, env: Envelope) -> None:
        self.bus.reply(env, self.status())
