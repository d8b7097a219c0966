"""Client side: host selection and the automatic best-response loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import List, Mapping, Optional, Sequence

from .directory import HostRecord, rank_key
from .market import Bid, Unsatisfiable, credit, required_rate_for_share
from .simnet import Envelope, Service, VmSpec, World

logger = logging.getLogger(__name__)

# Act only when the share falls this far below target.
HYSTERESIS = 0.01
# Lower the rate only when the share exceeds target by more than this.
EXTEND_MARGIN = 0.05
AFFORD_RTOL = 1e-9


class NoAffordableHost(Exception):
    pass


@dataclass(frozen=True)
class BidPolicy:
    target_share: float
    budget: Decimal
    planned_duration: float
    check_interval: float = 5.0
    vm_spec: VmSpec = field(default_factory=VmSpec)

    def __post_init__(self):
        if not 0 < self.target_share < 1:
            raise ValueError("target_share must lie in (0, 1)")
        object.__setattr__(self, "budget", credit(self.budget))
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if not self.planned_duration > 0:
            raise ValueError("planned_duration must be positive")
        if not self.check_interval > 0:
            raise ValueError("check_interval must be positive")


@dataclass(frozen=True)
class Action:
    kind: str = "none"
    bid_id: Optional[str] = None
    new_duration: Optional[float] = None
    target_rate: Optional[float] = None
    notice: Optional[str] = None

    @property
    def is_adjust(self) -> bool:
        return self.kind == "adjust"


def required_spend(policy: BidPolicy, record: HostRecord) -> float:
    competing = record.current_price * record.capacity.cpu_capacity
    return required_rate_for_share(policy.target_share, competing) * policy.planned_duration


def select_host(policy: BidPolicy, hosts: Sequence[HostRecord]) -> HostRecord:
    """Cheapest host that fits the VM and whose required spend fits the budget."""
    budget = float(policy.budget)
    for record in sorted(hosts, key=rank_key):
        if record.memory_free is not None and record.memory_free < policy.vm_spec.memory:
            continue
        if record.capacity.memory_total < policy.vm_spec.memory:
            continue
        try:
            spend = required_spend(policy, record)
        except Unsatisfiable:
            continue
        if spend <= budget * (1 + AFFORD_RTOL):
            return record
    raise NoAffordableHost(
        f"no host fits {policy.vm_spec.memory} MiB at share {policy.target_share} "
        f"within budget {policy.budget}")


def best_response_step(policy: BidPolicy, observed: Mapping, bid_id: str,
                       now: Optional[float] = None) -> Action:
    """One round of share targeting against an auctioneer status snapshot.

    Only the duration of the existing bid moves, so the amount already
    paid is never topped up. The new end time must leave at least one
    check interval of coverage; a rate that needs less is infeasible.
    """
    mine = None
    competing = 0.0
    for entry in observed["bids"]:
        if entry["bid_id"] == bid_id:
            mine = entry
        else:
            competing += float(entry["rate"])
    if mine is None:
        return Action(notice=f"bid {bid_id} not active")
    now = float(observed.get("now", 0.0)) if now is None else now
    amount = float(mine["amount"])
    own_rate = amount / float(mine["duration"])
    share = own_rate / (own_rate + competing)
    target = policy.target_share

    if share < target - HYSTERESIS:
        needed = required_rate_for_share(target, competing)
        elapsed = now - float(mine["placed_at"])
        max_rate = amount / (elapsed + policy.check_interval)
        if needed > max_rate:
            best = max_rate / (max_rate + competing)
            return Action(bid_id=bid_id, target_rate=needed,
                          notice=f"budget-exceeded: share {target} needs rate {needed:.6g}, "
                                 f"at most {max_rate:.6g} feasible (share {best:.4f})")
        return Action("adjust", bid_id, amount / needed, needed)

    if share > target + EXTEND_MARGIN:
        needed = required_rate_for_share(target, competing)
        return Action("adjust", bid_id, amount / needed, needed)

    return Action(bid_id=bid_id)


class BidderAgent(Service):
    """Bus client for one lease: pick a host, bid, then keep the share on target.

    Status arrives pushed (`auc.notify`) on every reallocation, so an agent
    sitting at its target sends nothing at all.
    """

    def __init__(self, world: World, account: str, policy: BidPolicy, auto: bool = True,
                 sls: str = "sls", endpoint: Optional[str] = None, query_limit: int = 100,
                 host: Optional[str] = None):
        super().__init__(world.bus, endpoint or f"client:{account}")
        self.world = world
        self.account = account
        self.policy = policy
        self.auto = auto
        self.sls = sls
        self.query_limit = query_limit
        self.pinned_host = host
        self.bid: Optional[Bid] = None
        self.auctioneer: Optional[str] = None
        self.host_id: Optional[str] = None
        self.vm_id: Optional[str] = None
        self.latest: Optional[dict] = None
        self.actions: List[Action] = []
        self.notices: List[str] = []
        self.error: Optional[str] = None
        self._bids = 0
        self.process = None
        world.services[self.endpoint] = self

    def start(self):
        self.process = self.world.spawn(self._run(), name=self.endpoint)
        return self.process

    def on_auc_notify(self, env: Envelope) -> None:
        self.latest = env.body

    def _fail(self, error: str):
        self.error = error
        logger.info("%s: %s", self.endpoint, error)
        return {"ok": False, "error": error}

    def _run(self):
        reply = yield self.request(self.sls, "sls.query", {"limit": self.query_limit})
        if not reply.get("ok"):
            return self._fail(f"directory query failed: {reply.get('error')}")
        hosts = [HostRecord.from_wire(h) for h in reply["hosts"]]
        if self.pinned_host is not None:
            hosts = [h for h in hosts if h.host_id == self.pinned_host]
        try:
            record = select_host(self.policy, hosts)
        except NoAffordableHost as exc:
            return self._fail(str(exc))
        self._bids += 1
        bid = Bid(f"{self.account}-{self._bids}", self.account, self.policy.budget,
                  self.policy.planned_duration, self.clock.now)
        self.auctioneer = record.address
        self.host_id = record.host_id
        reply = yield self.request(self.auctioneer, "auc.submit",
                                   {"bid": bid.to_wire(), "vm_spec": self.policy.vm_spec.to_wire(),
                                    "notify": self.auto},
                                   timeout=None)
        if not reply.get("ok"):
            return self._fail(f"bid rejected: {reply.get('error')}")
        self.bid = Bid(bid.bid_id, bid.bidder, bid.amount, bid.duration, reply["placed_at"])
        self.vm_id = reply["vm_id"]
        if not self.auto:
            return reply
        # Seeded phase offset: agents that check at the same instant act on
        # the same stale status and chase each other around the band.
        phase = self.world.rng.uniform(0.0, self.policy.check_interval)
        first = True
        while True:
            yield phase if first else self.policy.check_interval
            first = False
            status = self.latest
            if status is None:
                continue
            mine = [b for b in status["bids"] if b["bid_id"] == self.bid.bid_id]
            if not mine or self.clock.now >= mine[0]["t_end"]:
                return {"ok": True, "finished": self.clock.now}
            action = best_response_step(self.policy, status, self.bid.bid_id, now=self.clock.now)
            if action.notice:
                self.notices.append(action.notice)
            if not action.is_adjust:
                continue
            self.actions.append(action)
            reply = yield self.request(self.auctioneer, "auc.adjust",
                                       {"bid_id": self.bid.bid_id, "duration": action.new_duration})
            if not reply.get("ok"):
                self.notices.append(f"adjust refused: {reply.get('error')}")
