import struct

import pytest

from rdmacc.netsim import Cluster
from rdmacc.protocols import PROTOCOLS
from rdmacc.protocols.base import ProtoOptions
from rdmacc.store import Database, Table, Tuple, encode_tuple
from rdmacc.txncore import (Clock, HybridCode, LogRings, RetryPolicy, RunStats, TxnAbort,
                            TxnContext, TxnSpec, coordinator, make_timestamp)
from rdmacc.workload import LOGIC, logic

I64 = struct.Struct("<q")


@logic("test_sum")
def _test_sum(values, spec):
    # every written key gets (sum of everything visible) + its own index
    total = sum(I64.unpack(v)[0] for v in values.values())
    return {k: I64.pack(total + i + 1) for i, k in enumerate(dict.fromkeys(spec.ws))}


assert "test_sum" in LOGIC


class Bench:
    """A tiny cluster with one integer table, for scripted protocol runs."""

    def __init__(self, protocol, bits=None, onesided=True, nodes=2, threads=1, coros=2,
                 keys=8, replicas=2, slots=4, exec_time=0, prewarm=True, home=None, **opt):
        self.cl = Cluster(nodes, threads, coros)
        home = home or (lambda k: k % nodes)
        self.table = Table("t", 8, range(keys), home=home, init=lambda k: I64.pack(0))
        self.db = Database(self.cl, [self.table], slots=slots, prewarm=prewarm)
        self.stats = RunStats()
        hybrid = HybridCode(protocol, bits) if bits else HybridCode.uniform(protocol, onesided)
        self.log = LogRings(self.cl, replicas)
        self.proto = PROTOCOLS[protocol](self.db, hybrid, self.log, self.stats,
                                         ProtoOptions(exec_time=exec_time, **opt))
        self.next_id = 1

    def spec(self, rs=(), ws=(), worker=(0, 0, 0)):
        s = TxnSpec(self.next_id, [("t", k) for k in rs], [("t", k) for k in ws], "test_sum",
                    arrival=worker)
        self.next_id += 1
        return s

    def spawn(self, worker, specs, retry=None):
        w = self.cl.workers[worker]
        self.cl.spawn(*worker, coordinator(w, self.proto, specs, self.stats,
                                           retry or RetryPolicy()))

    def run(self):
        return self.cl.run_until_quiescent()

    def value(self, k):
        return I64.unpack(self.db.read_tuple("t", k).record)[0]

    def lock(self, k):
        return self.db.read_tuple("t", k).lock

    def set_lock(self, k, ts):
        node, off = self.db.locate("t", k)
        self.cl.store_u64(node, off, ts)

    def once(self, rs=(), ws=(), worker=(0, 0, 0)):
        """Run one transaction with no retries; returns the round-trip count."""
        self.spawn(worker, [self.spec(rs, ws, worker)], RetryPolicy(max_retries=0))
        return self.run().round_trips

    def set_tuple(self, k, lock=0, rts=0, wts=(0,), values=None):
        """Overwrite key ``k``; ``wts`` are clock values, packed with ids 0."""
        values = values or [0] * len(wts)
        slots = [(make_timestamp(c, 0, 0, 0) if c else 0, I64.pack(v)) for c, v in zip(wts, values)]
        slots += [(0, I64.pack(0))] * (self.db.slots - len(slots))
        node, off = self.db.locate("t", k)
        self.cl.store(node, off, encode_tuple(Tuple(lock, rts, slots), 8))

    def attempt(self, rs=(), ws=(), clock=0, worker=(0, 0, 0), during=None):
        """One attempt with the clock preset so ctts is ``ts(clock)``.

        ``during`` is a generator factory run on another node alongside it.
        Returns (ctx, abort or None)."""
        w = self.cl.workers[worker]
        ctx = TxnContext(self.spec(rs, ws, worker), w, {}, 0)
        out = {}

        def task(w):
            clk = Clock(clock)
            self.proto.begin(ctx, clk, None)
            try:
                yield from self.proto.run(ctx, clk)
                out["exc"] = None
            except TxnAbort as exc:
                out["exc"] = exc
                yield from self.proto.cleanup(ctx)

        self.cl.spawn(*worker, task)
        if during:
            self.cl.spawn(1, 0, 1, during)
        self.run()
        return ctx, out["exc"]


def ts(c):
    return make_timestamp(c, 0, 0, 0)


# -- acceptance reporting -------------------------------------------------------

CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call" and rep.passed:
        return
    n, title = m.args
    ok = CRITERIA.get(n, (title, True))[1] and rep.passed
    CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
