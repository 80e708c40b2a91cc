"""Logical-lease concurrency control.

Each tuple's current version is valid over the integer lease [wts, rts].
A transaction picks commit_tts inside every lease it read, extending leases
at commit when needed; writers commit at a point past the tuple's rts.
Write-set tuples are locked when first accessed, before the execution
phase, so write-write conflicts abort early.
"""

from __future__ import annotations

import struct

from ..netsim import Request, cas, write
from ..store import LOCK_OFF, RTS_OFF
from ..txncore import TxnAbort
from .base import ZERO64, Protocol, par

_RTS_SLOT0 = struct.Struct("<QQ")  # rts, then slot-0 wts; record follows


class Sundial(Protocol):
    name = "sundial"

    def install(self):
        self.handler("read", self._h_read)
        self.handler("lock", self._h_lock)
        self.handler("renew", self._h_renew)
        self.handler("commit", self._h_commit)
        self.handler("release", self._h_release)

    # -- owner-side handlers ------------------------------------------------
    def _h_read(self, req: Request):
        table, key = req.payload
        node, off = self.db.locate(table, key)
        return self.tuple_bytes(table, node, off), off

    def _h_lock(self, req: Request):
        table, key, ts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        if cl.local_cas(node, off + LOCK_OFF, 0, ts) != 0:
            return None
        return self.tuple_bytes(table, node, off), off

    def _h_renew(self, req: Request):
        table, key, wts, commit_tts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        t = self.db.tuple_at(table, node, off)
        if t.slots[0][0] != wts or (t.lock != 0 and t.rts < commit_tts):
            return False
        if t.rts < commit_tts:
            cl.store_u64(node, off + RTS_OFF, commit_tts)
        return True

    def _h_commit(self, req: Request):
        table, key, ts, commit_tts, record = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        cl.store(node, off + RTS_OFF, _RTS_SLOT0.pack(commit_tts, commit_tts) + record)
        cl.local_cas(node, off + LOCK_OFF, ts, 0)
        return True

    # -- coordinator side ---------------------------------------------------
    def _read(self, ctx, e):
        w = ctx.worker
        if self.os("Read"):
            yield from self.offset(w, e)
            rd = self.db.read_request(e.table, e.off)
            first = self.db.parse(e.table, (yield w.verbs(e.node, [rd]))[0])
            t = self.db.parse(e.table, (yield w.verbs(e.node, [rd]))[0])
            if first.slots[0][0] != t.slots[0][0]:
                raise TxnAbort("double-read", "Read")
        else:
            data, e.off = yield self.call(w, e.node, "read", (e.table, e.key))
            t = self.db.parse(e.table, data)
        e.wts, e.record = t.slots[0]
        # A locked tuple's rts may have been pushed past the point its
        # writer committed to (a failed one-sided renewal lands its CAS
        # before it sees the lock), so only wts itself is trusted.
        e.rts = t.rts if t.lock == 0 else e.wts
        ctx.commit_tts = max(ctx.commit_tts, e.wts)

    def _lock(self, ctx, e):
        w = ctx.worker
        if self.os("Lock"):
            yield from self.offset(w, e)
            old, data = yield w.verbs(e.node, [cas(e.off + LOCK_OFF, 0, ctx.ctts),
                                               self.db.read_request(e.table, e.off)])
            if old != 0:
                raise TxnAbort("lock-conflict", "Lock")
        else:
            r = yield self.call(w, e.node, "lock", (e.table, e.key, ctx.ctts))
            if r is None:
                raise TxnAbort("lock-conflict", "Lock")
            data, e.off = r
        e.locked = True
        t = self.db.parse(e.table, data)
        e.wts, e.record = t.slots[0]
        ctx.commit_tts = max(ctx.commit_tts, e.wts, t.rts + 1)

    def _renew(self, ctx, e):
        w = ctx.worker
        ct = ctx.commit_tts
        if not self.os("Renew"):
            ok = yield self.call(w, e.node, "renew", (e.table, e.key, e.wts, ct))
            if not ok:
                raise TxnAbort("renew", "Renew")
            return
        expected = e.rts
        rd = self.db.read_request(e.table, e.off)
        for _ in range(self.opts.max_renew):
            old, data = yield w.verbs(e.node, [cas(e.off + RTS_OFF, expected, ct), rd])
            t = self.db.parse(e.table, data)
            if t.slots[0][0] != e.wts or t.lock != 0:
                raise TxnAbort("renew", "Renew")
            if old == expected or old >= ct:
                return
            expected = old
        raise TxnAbort("renew-retries", "Renew")

    def _commit_one(self, ctx, e):
        w = ctx.worker
        ct = ctx.commit_tts
        if self.os("Commit"):
            yield w.verbs(e.node, [write(e.off + RTS_OFF, _RTS_SLOT0.pack(ct, ct) + e.new_record),
                                   write(e.off + LOCK_OFF, ZERO64)])
        else:
            yield self.call(w, e.node, "commit", (e.table, e.key, ctx.ctts, ct, e.new_record))
        e.locked = False

    def run(self, ctx, clock):
        w = ctx.worker
        if ctx.rs:
            ctx.enter("Read")
            yield from par(w, [self.fetch_atomic(self._read)(ctx, e) for e in ctx.rs.values()])
        if ctx.ws:
            ctx.enter("Lock")
            yield from par(w, [self._lock(ctx, e) for e in ctx.ws.values()])
        yield from self.execute(ctx)
        stale = [e for e in ctx.rs.values() if ctx.commit_tts > e.rts]
        if stale:
            ctx.enter("Renew")
            yield from par(w, [self._renew(ctx, e) for e in stale])
        ctx.commit_key = (ctx.commit_tts, self.stats.next_seq())
        yield from self.write_log(ctx, ctx.commit_tts)
        if ctx.ws:
            ctx.enter("Commit")
            yield from par(w, [self._commit_one(ctx, e) for e in ctx.ws.values()])
