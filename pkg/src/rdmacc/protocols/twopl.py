"""NOWAIT and WAITDIE two-phase locking.

Every accessed tuple is locked exclusively during Fetch; locks are dropped
in Commit together with the write-back.  The lock word holds the owner's
timestamp whichever primitive took it, so any stage can release it.
"""

from __future__ import annotations

from ..netsim import Request, cas, write
from ..store import LOCK_OFF, encode_slot, slot_offset
from ..txncore import TxnAbort, make_timestamp
from .base import U64, ZERO64, Protocol, par


class TwoPhaseLocking(Protocol):
    wait = False

    def install(self):
        self.waitq: dict[tuple, list] = {}
        self._watched: set = set()
        self.handler("lock", self._h_lock)
        self.handler("release", self._h_release)
        self.handler("commit", self._h_commit)

    # -- owner-side handlers ------------------------------------------------
    def _h_lock(self, req: Request):
        table, key, ts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        holder = cl.load_u64(node, off + LOCK_OFF)
        if holder == 0:
            cl.store_u64(node, off + LOCK_OFF, ts)
            return ("ok", self.tuple_bytes(table, node, off), off)
        if self.wait and ts < holder:
            self.stats.wait_events.append((ts, holder))
            self.waitq.setdefault((node, off), []).append((ts, req, table))
            if (node, off) not in self._watched:
                self._watched.add((node, off))
                cl.watch(node, off + LOCK_OFF, self._lock_changed(node, off),
                         label=f"{self.name} waitlist {node}:{off}")
            return Request.DEFER
        return ("fail", holder, off)

    def _lock_changed(self, node: int, off: int):
        cl = self.cluster

        def on_change(mem):
            q = self.waitq.get((node, off), [])
            holder = cl.load_u64(node, off + LOCK_OFF)
            if holder == 0 and q:
                q.sort(key=lambda x: x[0])
                ts, req, table = q.pop(0)
                cl.store_u64(node, off + LOCK_OFF, ts)
                req.reply(("ok", self.tuple_bytes(table, node, off), off))
                holder = ts
            # anyone younger than the current holder may not keep waiting
            keep = []
            for item in q:
                if item[0] < holder:
                    keep.append(item)
                else:
                    item[1].reply(("fail", holder, off))
            if keep:
                self.waitq[(node, off)] = keep
                return False
            self.waitq.pop((node, off), None)
            self._watched.discard((node, off))
            return True

        return on_change

    def _h_commit(self, req: Request):
        table, key, ts, wts, record = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        cl.store(node, off + slot_offset(0, len(record)), encode_slot(wts, record))
        cl.local_cas(node, off + LOCK_OFF, ts, 0)
        return True

    # -- coordinator side ---------------------------------------------------
    def _fetch(self, ctx, e):
        w = ctx.worker
        while True:
            if self.os("Fetch"):
                yield from self.offset(w, e)
                old, data = yield w.verbs(e.node, [cas(e.off + LOCK_OFF, 0, ctx.ctts),
                                                   self.db.read_request(e.table, e.off)])
                if old == 0:
                    break
                if self.wait and ctx.ctts < old:
                    self.stats.wait_events.append((ctx.ctts, old))
                    if e.node == w.node:
                        # hand the thread to the other coroutines, the
                        # holder may be one of them
                        yield w.sleep(self.cluster.latency.local_op)
                    continue
            else:
                r = yield self.call(w, e.node, "lock", (e.table, e.key, ctx.ctts))
                e.off = r[2]
                if r[0] == "ok":
                    data = r[1]
                    break
                old = r[1]
            raise TxnAbort("die" if self.wait else "lock-conflict", "Fetch")
        e.locked = True
        t = self.db.parse(e.table, data)
        e.wts, e.record = t.slots[0]

    def _commit_one(self, ctx, e, wts):
        w = ctx.worker
        if e.new_record is None:
            yield from self.release_lock(ctx, e, "Commit")
            return
        if self.os("Commit"):
            yield w.verbs(e.node, [write(e.off + slot_offset(0, len(e.new_record)),
                                         encode_slot(wts, e.new_record)),
                                   write(e.off + LOCK_OFF, ZERO64)])
        else:
            yield self.call(w, e.node, "commit", (e.table, e.key, ctx.ctts, wts, e.new_record))
        e.locked = False

    def run(self, ctx, clock):
        w = ctx.worker
        ctx.enter("Fetch")
        yield from par(w, [self._fetch(ctx, e) for e in ctx.entries()])
        yield from self.execute(ctx)
        for e in ctx.entries():
            clock.adjust_past(e.wts)
        ctx.commit_tts = make_timestamp(clock.tick(), *w.ident)
        ctx.commit_key = ctx.commit_tts
        yield from self.write_log(ctx, ctx.commit_tts)
        ctx.enter("Commit")
        yield from par(w, [self._commit_one(ctx, e, ctx.commit_tts) for e in ctx.entries()])


class NoWait(TwoPhaseLocking):
    name = "nowait"


class WaitDie(TwoPhaseLocking):
    name = "waitdie"
    wait = True
    keeps_timestamp = True
