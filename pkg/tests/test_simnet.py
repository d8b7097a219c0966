import io
import json

import pytest
from hypothesis import given, strategies as st

from agora.simnet import (
    UNDELIVERABLE, At, ClockError, Envelope, FaultError, Future, HostError, Service, VirtualClock,
    VmSpec, VmState, World, canonical,
)
from oracles import piecewise_integral


class Echo(Service):
    prefix = "echo"

    def __init__(self, bus, endpoint="echo"):
        super().__init__(bus, endpoint)
        self.seen = []

    def on_ping(self, env):
        self.seen.append((self.clock.now, env.body))
        self.reply(env, ok=True, n=env.body.get("n"))

    def on_silent(self, env):
        self.seen.append((self.clock.now, env.body))


def test_clock_orders_by_time_then_insertion():
    clock = VirtualClock()
    out = []
    for t, tag in [(2.0, "c"), (1.0, "a"), (2.0, "d"), (1.0, "b")]:
        clock.schedule(t, out.append, tag)
    clock.advance(5)
    assert out == ["a", "b", "c", "d"]
    assert clock.now == 5.0 and isinstance(clock.now, float)


def test_clock_rejects_backwards():
    clock = VirtualClock()
    clock.advance(3)
    with pytest.raises(ClockError):
        clock.advance(2)
    with pytest.raises(ClockError):
        clock.schedule(1, lambda: None)
    with pytest.raises(ClockError):
        clock.call_later(-1, lambda: None)


def test_cancelled_events_do_not_fire():
    clock = VirtualClock()
    out = []
    ev = clock.schedule(1, out.append, "x")
    ev.cancel()
    clock.advance(2)
    assert out == []


@given(st.lists(st.floats(0, 100, allow_nan=False), max_size=40))
def test_clock_fires_in_nondecreasing_time(times):
    clock = VirtualClock()
    fired = []
    for t in times:
        clock.schedule(t, lambda: fired.append(clock.now))
    clock.advance(100)
    assert fired == sorted(times)


def test_process_yields_delay_at_and_future():
    world = World()
    fut = Future()
    log = []

    def proc():
        yield 1.5
        log.append(world.now)
        yield At(4.0)
        log.append(world.now)
        value = yield fut
        log.append((world.now, value))

    world.spawn(proc())
    world.clock.schedule(7.0, fut.resolve, "done")
    world.advance(10)
    assert log == [1.5, 4.0, (7.0, "done")]


def test_bus_latency_and_fifo():
    world = World()
    echo = Echo(world.bus)
    client = Service(world.bus, "client")
    for n in range(3):
        client.send("echo", "echo.silent", {"n": n})
    world.advance(0.005)
    assert echo.seen == []
    world.advance(0.01)
    assert [b["n"] for _, b in echo.seen] == [0, 1, 2]
    assert all(t == pytest.approx(0.01) for t, _ in echo.seen)


def test_per_link_latency():
    world = World()
    echo = Echo(world.bus)
    client = Service(world.bus, "client")
    world.bus.set_link_latency("client", "echo", 0.5)
    client.send("echo", "echo.silent", {})
    world.advance(0.4)
    assert echo.seen == []
    world.advance(0.5)
    assert echo.seen[0][0] == 0.5


def test_request_reply_roundtrip():
    world = World()
    Echo(world.bus)
    client = Service(world.bus, "client")
    fut = client.request("echo", "echo.ping", {"n": 7})
    world.advance(0.02)
    assert fut.result() == {"ok": True, "n": 7}


def test_request_timeout():
    world = World()
    Echo(world.bus)
    client = Service(world.bus, "client")
    fut = client.request("echo", "echo.silent", {}, timeout=2.0)
    world.advance(1.9)
    assert not fut.done
    world.advance(2.0)
    assert fut.result()["error"] == "timeout"


def test_undeliverable_notice_for_crashed_service():
    world = World()
    Echo(world.bus)
    client = Service(world.bus, "client")
    world.bus.crash("echo")
    fut = client.request("echo", "echo.ping", {"n": 1})
    world.advance(0.05)
    assert fut.result()["error"] == "unreachable"
    assert any(json.loads(l)["msg_type"] == UNDELIVERABLE for l in world.bus.log)


def test_unsupported_message_gets_error_reply():
    world = World()
    Echo(world.bus)
    client = Service(world.bus, "client")
    fut = client.request("echo", "echo.nope", {})
    world.advance(0.05)
    assert fut.result()["ok"] is False


def test_message_drop_fault():
    world = World()
    echo = Echo(world.bus)
    client = Service(world.bus, "client")
    world.inject_fault("MESSAGE_DROP", "echo.sil*", count=1)
    world.advance(0)
    client.send("echo", "echo.silent", {"n": 1})
    client.send("echo", "echo.silent", {"n": 2})
    world.advance(1)
    assert [b["n"] for _, b in echo.seen] == [2]
    assert len(world.bus.dropped) == 1


def test_log_lines_are_canonical_and_sinked():
    world = World()
    Echo(world.bus)
    sink = io.StringIO()
    world.bus.add_sink(sink)
    client = Service(world.bus, "client")
    client.request("echo", "echo.ping", {"z": 1, "a": 2})
    world.advance(1)
    lines = sink.getvalue().splitlines()
    assert lines == world.bus.log
    for line in lines:
        assert canonical(json.loads(line)) == line
        assert Envelope.from_line(line).to_line() == line


def _vm(world, host, vm_id, mem=512):
    h = world.hosts[host]
    h.create_vm(vm_id, VmSpec(memory=mem), "test")
    h.boot_vm(vm_id, delay=0)
    return h


def test_cpu_integration_three_to_one():
    world = World()
    world.add_host("h", cpu_capacity=1.0)
    h = _vm(world, "h", "a")
    _vm(world, "h", "b")
    world.advance(0)
    h.set_rates({"a": 0.75, "b": 0.25})
    world.advance(100)
    assert h.cpu_seconds("a") == pytest.approx(75.0, abs=1e-9)
    assert h.cpu_seconds("b") == pytest.approx(25.0, abs=1e-9)


@given(st.lists(st.tuples(st.floats(0.01, 20), st.floats(0, 1)), min_size=1, max_size=15))
def test_cpu_integration_matches_piecewise_oracle(segments):
    world = World()
    world.add_host("h", cpu_capacity=1.0)
    h = _vm(world, "h", "a")
    world.advance(0)
    t = 0.0
    spans = []
    for dur, rate in segments:
        h.set_rates({"a": rate})
        spans.append((t, t + dur, rate))
        t += dur
        world.advance(t)
    assert h.cpu_seconds("a") == pytest.approx(piecewise_integral(spans), rel=1e-9, abs=1e-9)


def test_host_rejects_overcommit_and_unknown():
    world = World()
    world.add_host("h", cpu_capacity=1.0, memory_total=1024)
    h = _vm(world, "h", "a", mem=1000)
    with pytest.raises(HostError):
        h.create_vm("b", VmSpec(memory=100), "x")
    with pytest.raises(HostError):
        h.set_rates({"a": 1.5})
    with pytest.raises(HostError):
        h.set_rates({"ghost": 0.1})
    with pytest.raises(HostError):
        h.create_vm("a", VmSpec(), "x")


def test_hosts_are_isolated():
    world = World()
    world.add_host("h1")
    world.add_host("h2")
    h1 = _vm(world, "h1", "a")
    before = world.hosts["h2"].snapshot()
    world.advance(1)
    h1.set_rates({"a": 1.0})
    h1.kill_vm("a")
    assert world.hosts["h2"].snapshot() == before


def test_vm_kill_fault_and_restoration():
    world = World()
    world.add_host("h")
    before = world.hosts["h"].snapshot()
    h = _vm(world, "h", "a")
    world.inject_fault("VM_KILL", "h/a", at=3)
    world.advance(2)
    assert h.ping("a") is VmState.RUNNING
    world.advance(3)
    assert h.ping("a") is VmState.DEAD
    h.remove_vm("a")
    assert h.snapshot() == before


@pytest.mark.parametrize("kind, target", [
    ("VM_KILL", "nowhere/a"), ("VM_KILL", "ghost"), ("SERVICE_CRASH", "nobody"), ("BOGUS", "x"),
])
def test_bad_faults(kind, target):
    world = World()
    world.add_host("h")
    with pytest.raises((FaultError, ValueError)):
        world.inject_fault(kind, target)


def test_service_crash_and_restart():
    world = World()
    echo = Echo(world.bus)
    world.services["echo"] = echo
    client = Service(world.bus, "client")
    world.inject_fault("SERVICE_CRASH", "echo", at=1, restart_at=2)
    world.advance(1.5)
    f1 = client.request("echo", "echo.ping", {"n": 1})
    world.advance(1.6)
    assert f1.result()["error"] == "unreachable"
    world.advance(2.5)
    f2 = client.request("echo", "echo.ping", {"n": 2})
    world.advance(2.6)
    assert f2.result() == {"ok": True, "n": 2}


def test_same_seed_same_rng():
    assert World(seed=5).rng.random() == World(seed=5).rng.random()
