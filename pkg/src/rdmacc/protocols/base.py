from __future__ import annotations

import struct
from dataclasses import dataclass

from ..netsim import Worker, write
from ..store import Database, LOCK_OFF
from ..txncore import (Clock, CommitRecord, HybridCode, LogRecord, LogRings, RunStats,
                       TxnAbort, TxnContext, make_timestamp)
from ..workload import LOGIC

U64 = struct.Struct("<Q")
ZERO64 = bytes(8)


@dataclass
class ProtoOptions:
    exec_time: int = 0
    max_renew: int = 8
    # redo a one-sided double read whose two copies disagree instead of aborting
    retry_double_read: bool = False


def par(w: Worker, gens: list):
    """Run sub-generators concurrently on ``w``; re-raise the first failure
    only after every one of them has finished.

    Lockstep, like a coroutine that posts every request and then polls for
    all completions: each round advances every live generator to its next
    suspension and waits once for the lot."""
    if not gens:
        return []
    if len(gens) == 1:
        v = yield from gens[0]
        return [v]
    n = len(gens)
    res: list = [None] * n
    live = {i: (None, None) for i in range(n)}
    while live:
        futs = {}
        for i, (value, exc) in live.items():
            g = gens[i]
            try:
                while True:
                    f = g.throw(exc) if exc is not None else g.send(value)
                    if not f.done:
                        futs[i] = f
                        break
                    value, exc = f.value, f.exc
            except StopIteration as stop:
                res[i] = stop.value
            except Exception as err:  # noqa: BLE001 - re-raised below
                res[i] = err
        if not futs:
            break
        done = yield w.gather(futs.values())
        live = {i: ((None, d) if isinstance(d, BaseException) else (d, None))
                for i, d in zip(futs, done)}
    for r in res:
        if isinstance(r, BaseException):
            raise r
    return res


class Protocol:
    name = ""
    keeps_timestamp = False
    # abort reasons that only say the timestamp was too old
    stale_timestamp: frozenset = frozenset()

    def __init__(self, db: Database, hybrid: HybridCode, log: LogRings, stats: RunStats,
                 opts: ProtoOptions | None = None):
        self.db = db
        self.cluster = db.cluster
        self.hybrid = hybrid
        self.log = log
        self.stats = stats
        self.opts = opts or ProtoOptions()
        self.install()

    def install(self):
        pass

    def os(self, stage: str) -> bool:
        return self.hybrid.onesided(stage)

    def handler(self, op: str, fn):
        self.cluster.register_handler_all(f"{self.name}.{op}", fn)

    def call(self, w: Worker, node: int, op: str, payload):
        return w.call(node, f"{self.name}.{op}", payload)

    # -- shared pieces ----------------------------------------------------
    def begin(self, ctx: TxnContext, clock: Clock, keep_ts: int | None):
        w = ctx.worker
        ctx.ctts = keep_ts or make_timestamp(clock.tick(), *w.ident)
        for e in ctx.entries():
            e.node = self.db.home(e.table, e.key)

    def offset(self, w: Worker, e):
        if e.off < 0:
            e.node, e.off = yield from self.db.resolve_offset(w, e.table, e.key)
        return e.off

    def execute(self, ctx: TxnContext):
        """Simulated compute followed by the transaction logic."""
        w = ctx.worker
        if self.opts.exec_time:
            ctx.enter("exec")
            yield w.compute(self.opts.exec_time)
        out = LOGIC[ctx.spec.logic](ctx.reads(), ctx.spec)
        for k, e in ctx.ws.items():
            e.new_record = out[k]

    def write_log(self, ctx: TxnContext, ts: int):
        if not ctx.ws:
            return
        ctx.enter("Log")
        tids = {t.name: t.tid for t in self.db.by_tid}
        rec = LogRecord(ts, [(tids[e.table], e.key, e.new_record) for e in ctx.ws.values()])
        yield from self.log.append(ctx.worker, rec, self.os("Log"))

    def tuple_bytes(self, table: str, node: int, off: int) -> bytes:
        return bytes(self.cluster.mem[node][off:off + self.db.tuple_size(table)])

    def release_lock(self, ctx: TxnContext, e, stage: str):
        """Drop a lock this transaction holds, with the primitive of ``stage``."""
        w = ctx.worker
        if self.os(stage):
            yield w.verbs(e.node, [write(e.off + LOCK_OFF, ZERO64)])
        else:
            yield self.call(w, e.node, "release", (e.table, e.key, ctx.ctts))
        e.locked = False

    def _h_release(self, req):
        table, key, ts = req.payload
        node, off = self.db.locate(table, key)
        self.cluster.local_cas(node, off + LOCK_OFF, ts, 0)
        return True

    def cleanup(self, ctx: TxnContext, stage: str = "Commit"):
        held = [e for e in ctx.entries() if e.locked]
        if not held:
            return
        ctx.enter(stage)
        yield from par(ctx.worker, [self.release_lock(ctx, e, stage) for e in held])

    def fetch_atomic(self, read_gen):
        """Run a double-read fetch, repeating it on a torn snapshot when the
        retry knob is on."""
        def run(ctx, e, *extra):
            while True:
                try:
                    return (yield from read_gen(ctx, e, *extra))
                except TxnAbort as exc:
                    if exc.reason != "double-read" or not self.opts.retry_double_read:
                        raise
        return run

    def commit_record(self, ctx: TxnContext) -> CommitRecord:
        reads = {e.ident: e.wts for e in ctx.entries()}
        writes = {e.ident: ctx.commit_tts for e in ctx.ws.values()}
        return CommitRecord(ctx.spec.txn_id, ctx.commit_key, reads, writes)
