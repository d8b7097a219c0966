"""Allocation math for proportional-share CPU markets.

A host's CPU is split among active bids in proportion to their bid *rate*
(credits per virtual second). Everything here is a pure function; the
auctioneer and the bidder call into it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from typing import Iterable, Mapping, Sequence, Union

CENT = Decimal("0.01")

# Minimum spend rate on an uncontested host.
FLOOR_RATE = 0.01

SHARE_TOLERANCE = 1e-9


class MalformedBid(ValueError):
    pass


class Unsatisfiable(ValueError):
    pass


CreditLike = Union[Decimal, int, str]


def credit(value: CreditLike) -> Decimal:
    """Coerce to an exact two-decimal credit amount.

    Floats are refused outright: a credit must never pick up binary
    rounding on its way into the ledger.
    """
    if isinstance(value, bool) or isinstance(value, float):
        raise TypeError(f"credits must be exact, got {value!r}")
    try:
        amount = Decimal(value)
    except (InvalidOperation, TypeError) as exc:
        raise ValueError(f"not a credit amount: {value!r}") from exc
    if not amount.is_finite():
        raise ValueError(f"not a credit amount: {value!r}")
    quantized = amount.quantize(CENT, rounding=ROUND_HALF_EVEN)
    if quantized != amount:
        raise ValueError(f"credit amounts carry at most 2 decimals: {value!r}")
    if quantized < 0:
        raise ValueError(f"credit amounts are non-negative: {value!r}")
    return quantized


@dataclass(frozen=True)
class Bid:
    bid_id: str
    bidder: str
    amount: Decimal
    duration: float
    placed_at: float = 0.0

    def rate(self) -> float:
        return float(self.amount) / self.duration

    @property
    def t_end(self) -> float:
        return self.placed_at + self.duration

    def with_duration(self, duration: float) -> "Bid":
        return replace(self, duration=duration)

    def to_wire(self) -> dict:
        return {
            "bid_id": self.bid_id,
            "bidder": self.bidder,
            "amount": str(self.amount),
            "duration": self.duration,
            "placed_at": self.placed_at,
        }

    @classmethod
    def from_wire(cls, body: Mapping) -> "Bid":
        return cls(
            bid_id=str(body["bid_id"]),
            bidder=str(body["bidder"]),
            amount=credit(body["amount"]),
            duration=float(body["duration"]),
            placed_at=float(body.get("placed_at", 0.0)),
        )


@dataclass(frozen=True)
class HostCapacity:
    cpu_capacity: float
    memory_total: int = 4096

    def __post_init__(self):
        if not self.cpu_capacity > 0:
            raise ValueError(f"cpu_capacity must be positive, got {self.cpu_capacity}")
        if int(self.memory_total) <= 0:
            raise ValueError(f"memory_total must be positive, got {self.memory_total}")


def validate_bid(bid: Bid) -> None:
    if not bid.bid_id or not bid.bidder:
        raise MalformedBid("bid_id and bidder must be non-empty")
    if not bid.duration > 0:
        raise MalformedBid(f"bid {bid.bid_id}: duration must be positive, got {bid.duration}")
    if not bid.amount > 0:
        raise MalformedBid(f"bid {bid.bid_id}: amount must be positive, got {bid.amount}")


def bid_rate(bid: Bid) -> float:
    validate_bid(bid)
    return bid.rate()


def shares_from_rates(rates: Mapping[str, float]) -> dict[str, float]:
    """Proportional split of a rate map. Rates must be positive."""
    for key, r in rates.items():
        if not r > 0:
            raise MalformedBid(f"bid {key}: rate must be positive, got {r}")
    total = sum(rates.values())
    return {key: r / total for key, r in rates.items()}


def compute_shares(bids: Sequence[Bid]) -> dict[str, float]:
    """Map each bid_id to its fraction of the host.

    >>> a = Bid("A", "alice", credit(300), 100.0)
    >>> b = Bid("B", "bob", credit(100), 100.0)
    >>> compute_shares([a, b])
    {'A': 0.75, 'B': 0.25}
    """
    rates: dict[str, float] = {}
    for bid in bids:
        if bid.bid_id in rates:
            raise MalformedBid(f"duplicate bid id {bid.bid_id}")
        rates[bid.bid_id] = bid_rate(bid)
    if not rates:
        return {}
    return shares_from_rates(rates)


def host_price(bids: Iterable[Bid], capacity: HostCapacity) -> float:
    """Credits per second per CPU unit; an idle host costs nothing."""
    total = sum(bid_rate(b) for b in bids)
    return total / capacity.cpu_capacity


def required_rate_for_share(target_share: float, competing_rate: float) -> float:
    """Smallest rate that wins `target_share` against `competing_rate`.

    Inverse of the proportional rule: r / (r + R) = t  =>  r = t R / (1 - t).
    Against an empty host any positive rate wins everything, so the floor
    rate is returned.
    """
    if competing_rate < 0:
        raise ValueError(f"competing_rate must be non-negative, got {competing_rate}")
    if competing_rate == 0:
        return FLOOR_RATE
    if not 0 < target_share < 1:
        raise Unsatisfiable(
            f"share {target_share} cannot be won against competing rate {competing_rate}"
        )
    return target_share * competing_rate / (1.0 - target_share)
