import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import Bench
from rdmacc.netsim import Cluster, ConfigError
from rdmacc.txncore import (STAGES, Clock, HybridCode, LogRecord, LogRings, TimestampOverflow,
                            enumerate_hybrids, make_timestamp, unpack_timestamp)

ids = st.integers(0, 255)
clocks = st.integers(0, (1 << 40) - 1)


def test_timestamp_packing():
    assert make_timestamp(1, 2, 3, 4) == (1 << 24) | (2 << 16) | (3 << 8) | 4
    assert make_timestamp(0, 0, 0, 0) == 0
    assert Clock().tick() == 1


@given(clocks, ids, ids, ids)
def test_unpack_inverts_pack(c, m, t, k):
    assert unpack_timestamp(make_timestamp(c, m, t, k)) == (c, m, t, k)


@given(clocks, clocks, ids, ids, ids, ids, ids, ids)
def test_clock_dominates_ids(c1, c2, m1, t1, k1, m2, t2, k2):
    if c1 < c2:
        assert make_timestamp(c1, m1, t1, k1) < make_timestamp(c2, m2, t2, k2)


@pytest.mark.parametrize("args", [(1 << 40, 0, 0, 0), (1, 256, 0, 0), (1, 0, -1, 0), (1, 0, 0, 300)])
def test_timestamp_overflow(args):
    with pytest.raises(TimestampOverflow):
        make_timestamp(*args)


def test_adjust_clock():
    c = Clock(5)
    c.adjust(make_timestamp(9, 1, 0, 0))
    assert c.value == 9
    c.adjust(make_timestamp(5, 0, 0, 0))
    assert c.value == 9


@given(st.integers(1, 1000), st.lists(clocks, max_size=20))
def test_adjust_is_running_max(start, seen):
    c = Clock(start)
    for s in seen:
        c.adjust(make_timestamp(s, 3, 0, 0))
    assert c.value == max([start] + seen)


@given(st.integers(1, 1000), st.integers(0, (1 << 40) - 3), ids)
def test_adjust_past_beats_observed(start, seen, m):
    c = Clock(start)
    obs = make_timestamp(seen, m, 255, 255)
    c.adjust_past(obs)
    assert make_timestamp(c.tick(), 0, 0, 0) > obs


@pytest.mark.parametrize("proto,n", [("nowait", 8), ("waitdie", 8), ("occ", 64), ("mvcc", 16),
                                     ("sundial", 32)])
def test_enumerate_hybrids(proto, n):
    codes = enumerate_hybrids(proto)
    assert len(codes) == n == 2 ** len(STAGES[proto])
    assert len(set(codes)) == n
    assert codes[0] == HybridCode.uniform(proto, False)
    assert codes[-1] == HybridCode.uniform(proto, True)


def test_hybrid_digit_order():
    h = HybridCode("occ", "100000")
    assert h.onesided("Read") and not h.onesided("Release")


@pytest.mark.parametrize("bits", ["10", "1010", "12a", ""])
def test_hybrid_width_error_names_stages(bits):
    with pytest.raises(ConfigError, match="3 binary digits"):
        HybridCode("nowait", bits)


@settings(max_examples=100)
@given(st.integers(0, 2**64 - 1),
       st.lists(st.tuples(st.integers(0, 65535), st.integers(0, 2**64 - 1), st.binary(max_size=80)),
                max_size=6))
def test_log_record_roundtrip(ts, writes):
    rec = LogRecord(ts, writes)
    assert LogRecord.decode(rec.encode()) == rec


def _append(replicas, onesided, nodes=3):
    cl = Cluster(nodes)
    rings = LogRings(cl, replicas)
    rec = LogRecord(make_timestamp(3, 0, 0, 0), [(0, 7, b"payload!")])
    out = {}

    def task(w):
        out["locs"] = yield from rings.append(w, rec, onesided)

    cl.spawn(0, 0, 0, task)
    rep = cl.run_until_quiescent()
    return cl, rings, rec, out["locs"], rep.round_trips


def test_three_way_replication_two_backup_writes():
    cl, rings, rec, locs, rts = _append(3, True)
    assert rts == 2
    assert sorted(b for b, _ in locs) == [1, 2]
    data = rec.encode()
    for b, off in locs:
        assert bytes(cl.mem[b][off:off + len(data)]) == data


def test_rpc_logging_same_round_trips():
    assert _append(3, False)[4] == 2


def test_single_replica_logs_nothing():
    assert _append(1, True)[4] == 0


def test_replicas_exceeding_cluster():
    with pytest.raises(ConfigError):
        LogRings(Cluster(2), 3)


def test_log_ring_wraps():
    cl = Cluster(2)
    rings = LogRings(cl, 2, ring_bytes=64)
    rec = LogRecord(1, [(0, 1, bytes(20))])

    def task(w):
        for _ in range(5):
            yield from rings.append(w, rec, True)

    cl.spawn(0, 0, 0, task)
    cl.run_until_quiescent()
    assert rings.reclaims >= 1


@pytest.mark.parametrize("proto", ["nowait", "waitdie", "occ", "mvcc", "sundial"])
@pytest.mark.parametrize("onesided", [True, False])
def test_ledger_sums_to_latency(proto, onesided):
    b = Bench(proto, onesided=onesided, coros=2, exec_time=3)
    for c in range(2):
        b.spawn((0, 0, c), [b.spec(rs=[1, 2], ws=[3]) for _ in range(4)])
        b.spawn((1, 0, c), [b.spec(rs=[3], ws=[2, 1]) for _ in range(4)])
    b.run()
    assert len(b.stats.commits) == 16
    for lat, ledger in zip(b.stats.latencies, b.stats.ledgers):
        assert sum(ledger.values()) == lat


@pytest.mark.parametrize("proto", ["nowait", "occ", "mvcc", "sundial"])
def test_log_precedes_write_back(proto):
    b = Bench(proto, nodes=2)
    ring_ranges = [(n, r.base, r.base + r.len) for (n, _), r in b.log.rings.items()]
    order = []

    def hook(cl, batch, worker, out):
        for r in batch.requests:
            if r.kind.value != "WRITE":
                continue
            in_ring = any(n == batch.dst and lo <= r.offset < hi for n, lo, hi in ring_ranges)
            order.append("log" if in_ring else "data")

    b.cl.verb_hooks.append(hook)
    b.spawn((0, 0, 0), [b.spec(rs=[0], ws=[1])])
    b.run()
    assert "log" in order and "data" in order
    assert order.index("log") < order.index("data")
