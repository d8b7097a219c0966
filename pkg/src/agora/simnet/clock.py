"""Virtual clock, futures and generator processes.

Events are ordered by (time, sequence). Nothing here reads the wall clock.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, List, Optional

logger = logging.getLogger(__name__)


class ClockError(ValueError):
    pass


@dataclass(order=True)
class Event:
    time: float
    seq: int
    label: str = field(compare=False)
    fn: Callable = field(compare=False, repr=False)
    args: tuple = field(compare=False, default=(), repr=False)
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.now = float(start)
        self._queue: List[Event] = []
        self._seq = itertools.count()
        # Called as hook(old_now, new_now) before time moves forward.
        self._time_hooks: List[Callable[[float, float], None]] = []

    def on_time_advance(self, hook: Callable[[float, float], None]) -> None:
        self._time_hooks.append(hook)

    def schedule(self, at: float, fn: Callable, *args, label: str = "") -> Event:
        if at < self.now:
            raise ClockError(f"cannot schedule at {at} < now {self.now}")
        ev = Event(float(at), next(self._seq), label or getattr(fn, "__name__", "event"), fn, args)
        heapq.heappush(self._queue, ev)
        return ev

    def call_later(self, delay: float, fn: Callable, *args, label: str = "") -> Event:
        if delay < 0:
            raise ClockError(f"negative delay {delay}")
        return self.schedule(self.now + delay, fn, *args, label=label)

    def peek(self) -> Optional[float]:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def _move_to(self, t: float) -> None:
        if t > self.now:
            old = self.now
            for hook in self._time_hooks:
                hook(old, t)
            self.now = t

    def step(self) -> Optional[Event]:
        """Fire the next pending event, whatever its time."""
        if self.peek() is None:
            return None
        ev = heapq.heappop(self._queue)
        self._move_to(ev.time)
        ev.fn(*ev.args)
        return ev

    def advance(self, to: float) -> List[Event]:
        """Fire every event due at or before `to`, then park the clock there."""
        if to < self.now:
            raise ClockError(f"cannot advance backwards: {to} < {self.now}")
        fired = []
        while True:
            nxt = self.peek()
            if nxt is None or nxt > to:
                break
            fired.append(self.step())
        self._move_to(float(to))
        return fired

    def run_until(self, predicate: Callable[[], bool], limit: float) -> bool:
        """Step events until `predicate()` holds or time would pass `limit`."""
        while not predicate():
            nxt = self.peek()
            if nxt is None or nxt > limit:
                return predicate()
            self.step()
        return True

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)


class Future:
    """Single-assignment result slot. Callbacks run synchronously on resolve."""

    _PENDING = object()

    def __init__(self, label: str = ""):
        self.label = label
        self._value: Any = Future._PENDING
        self._callbacks: List[Callable[["Future"], None]] = []

    @property
    def done(self) -> bool:
        return self._value is not Future._PENDING

    def result(self) -> Any:
        if not self.done:
            raise RuntimeError(f"future {self.label!r} not resolved")
        return self._value

    def resolve(self, value: Any) -> bool:
        if self.done:
            return False
        self._value = value
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)
        return True

    def add_done_callback(self, cb: Callable[["Future"], None]) -> None:
        if self.done:
            cb(self)
        else:
            self._callbacks.append(cb)


def resolved(value: Any = None) -> Future:
    f = Future()
    f.resolve(value)
    return f


ProcessGen = Generator[Any, Any, Any]


@dataclass(frozen=True)
class At:
    """Yielded by a process to wake at an absolute virtual time."""

    time: float


class Process:
    """Drives a generator on the virtual clock.

    The generator yields a number (sleep that many virtual seconds), an
    `At` (wake at an absolute time, clamped to now), or a Future (resume
    with its result once resolved). Its return value resolves
    `self.finished`.
    """

    def __init__(self, clock: VirtualClock, gen: ProcessGen, name: str = "process"):
        self.clock = clock
        self.name = name
        self._gen = gen
        self.finished = Future(name)
        self._killed = False
        self._timer: Optional[Event] = None
        self._running = False

    def start(self) -> "Process":
        self._resume(None)
        return self

    def kill(self) -> None:
        if self._killed or self.finished.done:
            return
        self._killed = True
        if self._timer is not None:
            self._timer.cancel()
        if not self._running:
            self._gen.close()
        self.finished.resolve(None)

    @property
    def alive(self) -> bool:
        return not self._killed and not self.finished.done

    def _resume(self, value: Any) -> None:
        if self._killed:
            return
        self._running = True
        try:
            yielded = self._gen.send(value)
        except StopIteration as stop:
            self.finished.resolve(stop.value)
            return
        finally:
            self._running = False
        if self._killed:
            self._gen.close()
            return
        if isinstance(yielded, Future):
            yielded.add_done_callback(lambda f: self._resume(f.result()))
        elif isinstance(yielded, At):
            self._timer = self.clock.schedule(
                max(yielded.time, self.clock.now), self._resume, None, label=f"{self.name}:wake"
            )
        elif isinstance(yielded, (int, float)):
            self._timer = self.clock.call_later(
                float(yielded), self._resume, None, label=f"{self.name}:wake"
            )
        else:
            raise TypeError(f"process {self.name} yielded {yielded!r}")


def spawn(clock: VirtualClock, gen: ProcessGen, name: str = "process") -> Process:
    return Process(clock, gen, name).start()
