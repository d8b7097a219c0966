import pytest
from hypothesis import given, strategies as st

from agora.directory import (
    Directory, DirectoryError, DirectoryService, HostRecord, UnknownHost, rank_key,
)
from agora.market import HostCapacity
from agora.simnet import Service, World
from oracles import ranked_brute_force


def rec(host_id, price=0.0, cpu=1.0):
    return HostRecord(host_id, f"auc:{host_id}", HostCapacity(cpu), price)


class Clock:
    t = 0.0

    def __call__(self):
        return self.t


def test_register_is_upsert():
    d = Directory()
    d.register(rec("h1", 1.0))
    d.register(rec("h1", 2.0))
    assert len(d) == 1
    assert d.query_ranked(5)[0].current_price == 2.0


def test_ranking_with_tie_break():
    d = Directory()
    for h, p in [("h3", 1.0), ("h1", 2.0), ("h2", 0.0), ("h0", 1.0)]:
        d.register(rec(h, p))
    assert [r.host_id for r in d.query_ranked(10)] == ["h2", "h0", "h3", "h1"]
    assert [r.host_id for r in d.query_ranked(2)] == ["h2", "h0"]


def test_query_limit_must_be_positive():
    with pytest.raises(DirectoryError):
        Directory().query_ranked(0)


def test_eviction_after_liveness_window():
    clock = Clock()
    d = Directory(clock, liveness_window=30)
    d.register(rec("h1"))
    clock.t = 30.0
    assert "h1" in d
    clock.t = 30.5
    assert d.query_ranked(5) == []
    with pytest.raises(UnknownHost):
        d.heartbeat("h1", 0.0)


def test_heartbeat_refreshes():
    clock = Clock()
    d = Directory(clock, liveness_window=30)
    d.register(rec("h1"))
    clock.t = 25.0
    d.heartbeat("h1", 3.0, memory_free=100)
    clock.t = 50.0
    [r] = d.query_ranked(1)
    assert (r.current_price, r.memory_free, r.last_heartbeat) == (3.0, 100, 25.0)


@pytest.mark.parametrize("body", [
    {"host_id": "h", "cpu_capacity": 0},
    {"host_id": "h", "cpu_capacity": "many"},
    {"host_id": "h", "cpu_capacity": 1, "memory_total": -1},
])
def test_malformed_capacity(body):
    with pytest.raises(DirectoryError):
        HostRecord.from_wire(body)


def test_negative_price_rejected():
    with pytest.raises(DirectoryError):
        Directory().register(rec("h", -1.0))


records = st.dictionaries(
    st.text("abcdefgh0123", min_size=1, max_size=4),
    st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.25]) | st.floats(0, 100, allow_nan=False),
    max_size=100)


@given(records, st.integers(1, 120))
def test_query_matches_brute_force(hosts, limit):
    d = Directory()
    for h, p in hosts.items():
        d.register(rec(h, p))
    got = [r.host_id for r in d.query_ranked(limit)]
    assert got == ranked_brute_force(list(hosts.items()), limit)


def test_rank_key_orders_price_then_id():
    assert rank_key(rec("b", 1.0)) < rank_key(rec("a", 2.0))
    assert rank_key(rec("a", 1.0)) < rank_key(rec("b", 1.0))


def test_service_roundtrip_and_restart():
    world = World()
    svc = DirectoryService(world, liveness_window=30)
    client = Service(world.bus, "c")
    replies = []
    for msg, body in [
        ("sls.register", rec("h1", 1.0).to_wire()),
        ("sls.register", rec("h2", 0.5).to_wire()),
        ("sls.heartbeat", {"host_id": "h1", "current_price": 0.1}),
        ("sls.query", {"limit": 10}),
        ("sls.heartbeat", {"host_id": "nope", "current_price": 0.1}),
    ]:
        replies.append(client.request("sls", msg, body))
        world.run_for(0.05)
    out = [f.result() for f in replies]
    assert [h["host_id"] for h in out[3]["hosts"]] == ["h1", "h2"]
    assert out[4]["ok"] is False and out[4]["error"] == "unknown-host"
    world.inject_fault("SERVICE_CRASH", "sls", restart_at=world.now + 1)
    world.run_for(2)
    assert len(svc.directory) == 0
