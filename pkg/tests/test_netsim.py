import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmacc.netsim import (Cluster, ConfigError, LatencyModel, ProtocolError, Request, SimDeadlock,
                           VerbFault, cas, faa, read, write)

U64 = struct.Struct("<Q")


def run(cl, *tasks):
    """Spawn generator factories on distinct coroutine slots and run."""
    for i, t in enumerate(tasks):
        n, th, c = t[0]
        cl.spawn(n, th, c, t[1], name=f"t{i}")
    return cl.run_until_quiescent()


def test_first_region_starts_at_zero():
    cl = Cluster(2)
    r = cl.register_region(0, 4096)
    assert (r.owner, r.base, r.len) == (0, 0, 4096)


def test_regions_are_disjoint_and_zeroed():
    cl = Cluster(1)
    a = cl.register_region(0, 64)
    b = cl.register_region(0, 64)
    assert a.base + a.len <= b.base
    assert bytes(cl.mem[0][b.base:b.base + 64]) == bytes(64)


def test_empty_region_rejected():
    cl = Cluster(2)
    with pytest.raises(ConfigError):
        cl.register_region(1, 0)


def test_capacity_exceeded():
    cl = Cluster(1, capacity=128)
    cl.register_region(0, 100)
    with pytest.raises(ConfigError):
        cl.register_region(0, 64)


def test_latency_model_rejects_negative():
    with pytest.raises(ConfigError):
        LatencyModel(one_sided_rt=-1)


def test_cas_then_read_sees_cas_effect():
    cl = Cluster(2)
    reg = cl.register_region(1, 64)
    out = {}

    def task(w):
        res = yield w.post(1, [cas(reg.base, 0, 77), read(reg.base, 16)])
        out["res"] = res
        out["t"] = w.now

    rep = run(cl, ((0, 0, 0), task))
    old, data = out["res"]
    assert old == 0
    assert U64.unpack_from(data, 0)[0] == 77
    assert rep.round_trips == 1
    assert out["t"] == cl.latency.one_sided_rt


def test_two_writes_one_round_trip():
    cl = Cluster(2)
    reg = cl.register_region(1, 64)

    def task(w):
        yield w.post(1, [write(reg.base + 8, b"abcdefgh"), write(reg.base, U64.pack(0))])

    cl.store_u64(1, reg.base, 5)
    rep = run(cl, ((0, 0, 0), task))
    assert rep.round_trips == 1
    assert bytes(cl.mem[1][reg.base + 8:reg.base + 16]) == b"abcdefgh"
    assert cl.load_u64(1, reg.base) == 0


def test_failed_cas_leaves_memory():
    cl = Cluster(2)
    reg = cl.register_region(1, 64)
    cl.store_u64(1, reg.base, 9)
    before = bytes(cl.mem[1])
    got = []

    def task(w):
        got.append((yield w.post(1, [cas(reg.base, 0, 5)]))[0])

    run(cl, ((0, 0, 0), task))
    assert got == [9]
    assert bytes(cl.mem[1]) == before


def test_faa_adds():
    cl = Cluster(2)
    reg = cl.register_region(1, 8)
    cl.store_u64(1, reg.base, 40)

    def task(w):
        old = (yield w.post(1, [faa(reg.base, 2)]))[0]
        assert old == 40

    run(cl, ((0, 0, 0), task))
    assert cl.load_u64(1, reg.base) == 42


def test_out_of_bounds_verb_faults():
    cl = Cluster(2)
    cl.register_region(1, 64)
    seen = []

    def task(w):
        try:
            yield w.post(1, [read(4096, 8)])
        except VerbFault as e:
            seen.append(e)

    run(cl, ((0, 0, 0), task))
    assert len(seen) == 1


def test_misaligned_atomic_faults():
    cl = Cluster(2)
    reg = cl.register_region(1, 64)
    seen = []

    def task(w):
        try:
            yield w.post(1, [cas(reg.base + 4, 0, 1)])
        except VerbFault:
            seen.append(True)

    run(cl, ((0, 0, 0), task))
    assert seen == [True]


def test_rpc_echo():
    cl = Cluster(2)
    cl.register_handler(1, "echo", lambda req: req.payload)
    out = []

    def task(w):
        out.append((yield w.rpc(1, "echo", b"hi")))
        out.append(w.now)

    rep = run(cl, ((0, 0, 0), task))
    assert out == [b"hi", cl.latency.rpc_rt]
    assert rep.round_trips == 1


def test_rpc_unknown_handler():
    cl = Cluster(2)

    def task(w):
        yield w.rpc(1, "nope")

    cl.spawn(0, 0, 0, task)
    with pytest.raises(ProtocolError):
        cl.run_until_quiescent()


def test_deferred_reply():
    cl = Cluster(2)
    pending = []
    cl.register_handler(1, "park", lambda req: pending.append(req) or Request.DEFER)
    out = []

    def waiter(w):
        out.append((yield w.rpc(1, "park")))

    def releaser(w):
        yield w.sleep(10)
        pending[0].reply("go")

    run(cl, ((0, 0, 0), waiter), ((1, 0, 0), releaser))
    assert out == ["go"]


def test_local_call_costs_no_round_trip():
    cl = Cluster(1)
    cl.register_handler(0, "inc", lambda req: req.payload + 1)
    out = []

    def task(w):
        out.append((yield w.call(0, "inc", 1)))

    rep = run(cl, ((0, 0, 0), task))
    assert out == [2] and rep.round_trips == 0


def test_zero_tasks_report():
    rep = Cluster(3).run_until_quiescent()
    assert rep.round_trips == 0 and rep.now == 0


def test_coroutines_on_one_thread_serialize_compute():
    cl = Cluster(1, threads=1, coroutines=2)
    done = {}

    def task(name):
        def t(w):
            yield w.compute(5)
            done[name] = w.now
        return t

    run(cl, ((0, 0, 0), task("a")), ((0, 0, 1), task("b")))
    assert sorted(done.values()) == [5, 10]


def test_threads_run_in_parallel():
    cl = Cluster(1, threads=2, coroutines=1)
    done = {}

    def task(name):
        def t(w):
            yield w.compute(5)
            done[name] = w.now
        return t

    run(cl, ((0, 0, 0), task("a")), ((0, 1, 0), task("b")))
    assert sorted(done.values()) == [5, 5]


def test_deadlock_diagnostic():
    cl = Cluster(1)
    reg = cl.register_region(0, 8)

    def task(w):
        yield w.wait_until(0, reg.base, lambda mem: mem[reg.base] == 1)

    cl.spawn(0, 0, 0, task, name="stuck")
    with pytest.raises(SimDeadlock) as ei:
        cl.run_until_quiescent()
    assert any("stuck" in b for b in ei.value.blocked)


def test_wait_until_wakes_on_remote_write():
    cl = Cluster(2)
    reg = cl.register_region(0, 8)
    out = []

    def waiter(w):
        yield w.wait_until(0, reg.base, lambda mem: U64.unpack_from(mem, reg.base)[0] == 3)
        out.append(w.now)

    def writer(w):
        yield w.sleep(7)
        yield w.post(0, [write(reg.base, U64.pack(3))])

    run(cl, ((0, 0, 0), waiter), ((1, 0, 0), writer))
    assert out == [7 + cl.latency.one_sided_rt // 2]


def _jittered_trace(seed):
    cl = Cluster(2, threads=1, coroutines=2, latency=LatencyModel(jitter=3), seed=seed, trace=True)
    reg = cl.register_region(1, 64)

    def task(w):
        for i in range(5):
            yield w.post(1, [faa(reg.base, 1), read(reg.base, 8)])

    run(cl, ((0, 0, 0), task), ((0, 0, 1), task))
    return cl.trace, bytes(cl.mem[1])


def test_same_seed_same_trace():
    assert _jittered_trace(4) == _jittered_trace(4)


_ops = st.lists(st.tuples(st.sampled_from(["w", "c", "f", "r"]), st.integers(0, 7),
                          st.integers(0, 2**64 - 1), st.integers(0, 3)), min_size=1, max_size=12)


@settings(max_examples=150, deadline=None)
@given(_ops)
def test_batch_matches_sequential_oracle(ops):
    cl = Cluster(2)
    reg = cl.register_region(1, 64)
    reqs = []
    mem = bytearray(64)
    expect = []
    for kind, cell, val, guess in ops:
        off = cell * 8
        cur = U64.unpack_from(mem, off)[0]
        if kind == "w":
            reqs.append(write(reg.base + off, U64.pack(val)))
            U64.pack_into(mem, off, val)
            expect.append(None)
        elif kind == "c":
            exp = cur if guess == 0 else guess
            reqs.append(cas(reg.base + off, exp, val))
            if cur == exp:
                U64.pack_into(mem, off, val)
            expect.append(cur)
        elif kind == "f":
            reqs.append(faa(reg.base + off, val))
            U64.pack_into(mem, off, (cur + val) % 2**64)
            expect.append(cur)
        else:
            reqs.append(read(reg.base + off, 8))
            expect.append(bytes(mem[off:off + 8]))
    got = []

    def task(w):
        got.append((yield w.post(1, reqs)))

    rep = run(cl, ((0, 0, 0), task))
    assert got == [expect]
    assert bytes(cl.mem[1][reg.base:reg.base + 64]) == bytes(mem)
    assert rep.round_trips == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["post", "rpc", "local"]), max_size=15))
def test_round_trips_count_batches_and_rpcs(kinds):
    cl = Cluster(2)
    reg = cl.register_region(1, 8)
    cl.register_handler_all("nop", lambda req: None)

    def task(w):
        for k in kinds:
            if k == "post":
                yield w.post(1, [read(reg.base, 8)])
            elif k == "rpc":
                yield w.rpc(1, "nop")
            else:
                yield w.call(0, "nop")

    rep = run(cl, ((0, 0, 0), task))
    assert rep.round_trips == sum(k != "local" for k in kinds)
