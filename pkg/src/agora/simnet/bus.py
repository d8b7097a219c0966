"""Ordered message bus with latency, drops and crashable endpoints."""

from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from .clock import Event, Future, VirtualClock

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
DEFAULT_LATENCY = 0.01
DEFAULT_TIMEOUT = 5.0

UNDELIVERABLE = "bus.undeliverable"


class BusError(Exception):
    pass


def canonical(obj: Any) -> str:
    """Byte-stable JSON: sorted keys, no whitespace, UTF-8, shortest floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


@dataclass(frozen=True)
class Envelope:
    msg_type: str
    request_id: str
    sender: str
    recipient: str
    body: Dict[str, Any]
    sent_at: float
    version: int = WIRE_VERSION

    @property
    def is_reply(self) -> bool:
        return self.msg_type.endswith(".reply") or self.msg_type == UNDELIVERABLE

    def to_line(self) -> str:
        return canonical(asdict(self))

    @classmethod
    def from_line(cls, line: str) -> "Envelope":
        raw = json.loads(line)
        if not isinstance(raw, dict):
            raise ValueError("envelope must be a JSON object")
        if raw.get("version") != WIRE_VERSION:
            raise ValueError(f"unsupported envelope version {raw.get('version')!r}")
        missing = {"msg_type", "request_id", "sender", "recipient", "body", "sent_at"} - raw.keys()
        if missing:
            raise ValueError(f"envelope missing fields: {sorted(missing)}")
        return cls(
            msg_type=raw["msg_type"],
            request_id=raw["request_id"],
            sender=raw["sender"],
            recipient=raw["recipient"],
            body=raw["body"],
            sent_at=float(raw["sent_at"]),
            version=raw["version"],
        )


@dataclass
class DropRule:
    pattern: str
    recipient: Optional[str] = None
    sender: Optional[str] = None
    remaining: int = 1

    def matches(self, env: Envelope) -> bool:
        if self.remaining <= 0:
            return False
        if not fnmatch.fnmatchcase(env.msg_type, self.pattern):
            return False
        if self.recipient is not None and env.recipient != self.recipient:
            return False
        if self.sender is not None and env.sender != self.sender:
            return False
        return True


@dataclass
class _Pending:
    future: Future
    timer: Optional[Event] = None


class Bus:
    """In-process transport on a virtual clock.

    Delivery order is (sent_at + latency, send order). Request/response
    pairs share a request_id; a reply or an undeliverable notice resolves
    the future returned by `request`.
    """

    def __init__(self, clock: VirtualClock, latency: float = DEFAULT_LATENCY):
        self.clock = clock
        self.latency = latency
        self.log: List[str] = []
        self.dropped: List[Envelope] = []
        self._handlers: Dict[str, Callable[[Envelope], None]] = {}
        self._crashed: set = set()
        self._links: Dict[Tuple[str, str], float] = {}
        self._drops: List[DropRule] = []
        self._pending: Dict[Tuple[str, str], _Pending] = {}
        self._counters: Dict[str, int] = {}
        self._taps: List[Callable[[Envelope], None]] = []
        self._sinks: List[Any] = []

    # -- topology ---------------------------------------------------------
    def register(self, endpoint: str, handler: Callable[[Envelope], None]) -> None:
        if endpoint in self._handlers:
            raise BusError(f"endpoint {endpoint!r} already registered")
        self._handlers[endpoint] = handler

    def unregister(self, endpoint: str) -> None:
        self._handlers.pop(endpoint, None)

    def is_registered(self, endpoint: str) -> bool:
        return endpoint in self._handlers

    def is_up(self, endpoint: str) -> bool:
        return endpoint in self._handlers and endpoint not in self._crashed

    def endpoints(self) -> List[str]:
        return sorted(self._handlers)

    def set_link_latency(self, sender: str, recipient: str, latency: float) -> None:
        if latency < 0:
            raise BusError("latency must be non-negative")
        self._links[(sender, recipient)] = latency

    def link_latency(self, sender: str, recipient: str) -> float:
        return self._links.get((sender, recipient), self.latency)

    # -- faults -----------------------------------------------------------
    def drop_next(self, pattern: str, recipient: Optional[str] = None,
                  sender: Optional[str] = None, count: int = 1) -> DropRule:
        rule = DropRule(pattern, recipient, sender, count)
        self._drops.append(rule)
        return rule

    def crash(self, endpoint: str) -> None:
        if endpoint not in self._handlers:
            raise BusError(f"unknown endpoint {endpoint!r}")
        self._crashed.add(endpoint)
        for key in [k for k in self._pending if k[0] == endpoint]:
            pending = self._pending.pop(key)
            if pending.timer is not None:
                pending.timer.cancel()

    def restart(self, endpoint: str) -> None:
        self._crashed.discard(endpoint)

    # -- observation ------------------------------------------------------
    def tap(self, fn: Callable[[Envelope], None]) -> None:
        self._taps.append(fn)

    def add_sink(self, fh) -> None:
        """Stream every logged envelope line to a writable text file."""
        self._sinks.append(fh)

    # -- sending ----------------------------------------------------------
    def next_request_id(self, sender: str) -> str:
        n = self._counters.get(sender, 0) + 1
        self._counters[sender] = n
        return f"{sender}#{n}"

    def send(self, sender: str, recipient: str, msg_type: str, body: Optional[dict] = None,
             request_id: Optional[str] = None) -> Envelope:
        env = Envelope(
            msg_type=msg_type,
            request_id=request_id or self.next_request_id(sender),
            sender=sender,
            recipient=recipient,
            body=dict(body or {}),
            sent_at=self.clock.now,
        )
        line = env.to_line()
        self.log.append(line)
        for fh in self._sinks:
            fh.write(line + "\n")
        for fn in self._taps:
            fn(env)
        self.clock.call_later(self.link_latency(sender, recipient), self._deliver, env,
                              label=f"deliver:{msg_type}")
        return env

    def request(self, sender: str, recipient: str, msg_type: str, body: Optional[dict] = None,
                timeout: Optional[float] = DEFAULT_TIMEOUT) -> Future:
        request_id = self.next_request_id(sender)
        future = Future(f"{msg_type}:{request_id}")
        pending = _Pending(future)
        self._pending[(sender, request_id)] = pending
        if timeout is not None:
            pending.timer = self.clock.call_later(
                timeout, self._expire, sender, request_id, msg_type, label=f"timeout:{msg_type}"
            )
        self.send(sender, recipient, msg_type, body, request_id=request_id)
        return future

    def reply(self, request: Envelope, body: dict) -> Envelope:
        return self.send(request.recipient, request.sender, request.msg_type + ".reply", body,
                         request_id=request.request_id)

    def _expire(self, sender: str, request_id: str, msg_type: str) -> None:
        pending = self._pending.pop((sender, request_id), None)
        if pending is not None:
            pending.future.resolve({"ok": False, "error": "timeout", "msg_type": msg_type})

    def _deliver(self, env: Envelope) -> None:
        for rule in self._drops:
            if rule.matches(env):
                rule.remaining -= 1
                self.dropped.append(env)
                logger.debug("dropped %s %s", env.msg_type, env.request_id)
                return
        if not self.is_up(env.recipient):
            if not env.is_reply and self.is_up(env.sender):
                self.send("bus", env.sender, UNDELIVERABLE,
                          {"ok": False, "error": "unreachable", "recipient": env.recipient,
                           "msg_type": env.msg_type},
                          request_id=env.request_id)
            return
        if env.is_reply:
            pending = self._pending.pop((env.recipient, env.request_id), None)
            if pending is not None:
                if pending.timer is not None:
                    pending.timer.cancel()
                pending.future.resolve(env.body)
                return
            if env.msg_type == UNDELIVERABLE:
                return
        self._handlers[env.recipient](env)


class Service:
    """Bus endpoint that dispatches `a.b` messages to `on_b` methods."""

    prefix = ""

    def __init__(self, bus: Bus, endpoint: str):
        self.bus = bus
        self.endpoint = endpoint
        bus.register(endpoint, self.handle)

    @property
    def clock(self) -> VirtualClock:
        return self.bus.clock

    @property
    def up(self) -> bool:
        return self.bus.is_up(self.endpoint)

    def handle(self, env: Envelope) -> None:
        kind = env.msg_type
        if self.prefix and kind.startswith(self.prefix + "."):
            kind = kind[len(self.prefix) + 1:]
        method = getattr(self, "on_" + kind.replace(".", "_"), None)
        if method is None:
            if not env.is_reply:
                self.bus.reply(env, {"ok": False, "error": f"unsupported message {env.msg_type}"})
            return
        try:
            method(env)
        except (ValueError, KeyError, TypeError) as exc:
            logger.debug("%s rejected %s: %s", self.endpoint, env.msg_type, exc)
            self.bus.reply(env, {"ok": False, "error": str(exc)})

    def reply(self, env: Envelope, **body) -> Envelope:
        return self.bus.reply(env, body)

    def request(self, recipient: str, msg_type: str, body: Optional[dict] = None,
                timeout: Optional[float] = DEFAULT_TIMEOUT) -> Future:
        return self.bus.request(self.endpoint, recipient, msg_type, body, timeout=timeout)

    def send(self, recipient: str, msg_type: str, body: Optional[dict] = None) -> Envelope:
        return self.bus.send(self.endpoint, recipient, msg_type, body)
