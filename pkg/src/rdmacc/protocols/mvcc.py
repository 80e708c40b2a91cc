"""Multi-version timestamp ordering over a fixed number of version slots.

Read rules:  R1 pick the newest slot with wts < ctts (none left: overflow),
             R2 the lock word is 0 or a timestamp above ctts.
Write rules: W1 ctts above every slot wts and above rts,
             W2 the tuple is unlocked.

A one-sided read fetches the tuple twice and requires identical slot
timestamps; the rts advance rides in the second batch, ahead of the READ,
so a writer that slips in before the advance is seen by that READ.
"""

from __future__ import annotations

from ..netsim import Request, cas, write
from ..store import LOCK_OFF, RTS_OFF, encode_slot, slot_offset
from ..txncore import TxnAbort
from .base import ZERO64, Protocol, par


class MVCC(Protocol):
    name = "mvcc"
    stale_timestamp = frozenset({"W1", "W1-recheck", "overflow"})

    def install(self):
        self.overflow_aborts = 0
        self.handler("read", self._h_read)
        self.handler("lock", self._h_lock)
        self.handler("commit", self._h_commit)
        self.handler("release", self._h_release)

    # -- owner-side handlers ------------------------------------------------
    def _h_read(self, req: Request):
        table, key, ts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        t = self.db.tuple_at(table, node, off)
        seen = max(t.wts, t.rts)
        i = t.version_below(ts)
        if i is None:
            return ("overflow", seen, off)
        if t.lock != 0 and t.lock < ts:
            return ("R2", seen, off)
        if ts > t.rts:
            cl.store_u64(node, off + RTS_OFF, ts)
        return ("ok", seen, off, t.slots[i])

    def _h_lock(self, req: Request):
        table, key, ts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        t = self.db.tuple_at(table, node, off)
        seen = max(t.wts, t.rts)
        if not (ts > t.wts and ts > t.rts):
            return ("W1", seen, off)
        if t.lock != 0:
            return ("W2", seen, off)
        cl.store_u64(node, off + LOCK_OFF, ts)
        return ("ok", seen, off, t.slots[t.newest], t.oldest)

    def _h_commit(self, req: Request):
        table, key, ts, record = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        t = self.db.tuple_at(table, node, off)
        cl.store(node, off + slot_offset(t.oldest, len(record)), encode_slot(ts, record))
        cl.local_cas(node, off + LOCK_OFF, ts, 0)
        return True

    # -- coordinator side ---------------------------------------------------
    def _abort(self, reason, stage):
        if reason == "overflow":
            self.overflow_aborts += 1
        raise TxnAbort(reason, stage)

    def _read(self, ctx, e, clock):
        w = ctx.worker
        ts = ctx.ctts
        if not self.os("Read"):
            r = yield self.call(w, e.node, "read", (e.table, e.key, ts))
            e.off = r[2]
            clock.adjust(r[1])
            if r[0] != "ok":
                self._abort(r[0], "Read")
            e.wts, e.record = r[3]
            return
        yield from self.offset(w, e)
        rd = self.db.read_request(e.table, e.off)
        t1 = self.db.parse(e.table, (yield w.verbs(e.node, [rd]))[0])
        clock.adjust(max(t1.wts, t1.rts))
        i = t1.version_below(ts)
        if i is None:
            self._abort("overflow", "Read")
        if t1.lock != 0 and t1.lock < ts:
            self._abort("R2", "Read")
        stamps = t1.slot_wts()
        expected = t1.rts
        while True:
            advance = ts > expected
            reqs = [cas(e.off + RTS_OFF, expected, ts), rd] if advance else [rd]
            res = yield w.verbs(e.node, reqs)
            t2 = self.db.parse(e.table, res[-1])
            if t2.slot_wts() != stamps:
                self._abort("double-read", "Read")
            if t2.lock != 0 and t2.lock < ts:
                self._abort("R2", "Read")
            if not advance or res[0] == expected or res[0] >= ts:
                break
            expected = res[0]
        e.wts, e.record = t1.slots[i]

    def _lock(self, ctx, e, clock):
        w = ctx.worker
        ts = ctx.ctts
        if not self.os("Lock"):
            r = yield self.call(w, e.node, "lock", (e.table, e.key, ts))
            e.off = r[2]
            clock.adjust(r[1])
            if r[0] == "W1":
                clock.adjust_past(r[1])
            if r[0] != "ok":
                self._abort(r[0], "Lock")
            e.locked = True
            (e.wts, e.record), e.slot = r[3], r[4]
            return
        yield from self.offset(w, e)
        rd = self.db.read_request(e.table, e.off)
        t = self.db.parse(e.table, (yield w.verbs(e.node, [rd]))[0])
        seen = max(t.wts, t.rts)
        clock.adjust(seen)
        if not (ts > t.wts and ts > t.rts):
            clock.adjust_past(seen)
            self._abort("W1", "Lock")
        if t.lock != 0:
            self._abort("W2", "Lock")
        old, data = yield w.verbs(e.node, [cas(e.off + LOCK_OFF, 0, ts), rd])
        if old != 0:
            self._abort("W2", "Lock")
        e.locked = True
        t = self.db.parse(e.table, data)
        if not (ts > t.wts and ts > t.rts):
            clock.adjust_past(max(t.wts, t.rts))
            self._abort("W1-recheck", "Lock")
        e.wts, e.record = t.slots[t.newest]
        e.slot = t.oldest

    def _commit_one(self, ctx, e):
        w = ctx.worker
        if self.os("Commit"):
            yield w.verbs(e.node, [write(e.off + slot_offset(e.slot, len(e.new_record)),
                                         encode_slot(ctx.ctts, e.new_record)),
                                   write(e.off + LOCK_OFF, ZERO64)])
        else:
            yield self.call(w, e.node, "commit", (e.table, e.key, ctx.ctts, e.new_record))
        e.locked = False

    def run(self, ctx, clock):
        w = ctx.worker
        ctx.commit_tts = ctx.commit_key = ctx.ctts
        if ctx.rs:
            ctx.enter("Read")
            yield from par(w, [self.fetch_atomic(self._read)(ctx, e, clock) for e in ctx.rs.values()])
        if ctx.ws:
            ctx.enter("Lock")
            yield from par(w, [self._lock(ctx, e, clock) for e in ctx.ws.values()])
        yield from self.execute(ctx)
        yield from self.write_log(ctx, ctx.ctts)
        if ctx.ws:
            ctx.enter("Commit")
            yield from par(w, [self._commit_one(ctx, e) for e in ctx.ws.values()])
