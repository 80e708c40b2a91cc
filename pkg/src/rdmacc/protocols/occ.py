"""Optimistic concurrency control: read without locks, lock the write set at
commit, validate the read set by comparing write timestamps."""

from __future__ import annotations

from ..netsim import Request, cas, write
from ..store import LOCK_OFF, encode_slot, slot_offset
from ..txncore import TxnAbort, make_timestamp
from .base import ZERO64, Protocol, par


class OCC(Protocol):
    name = "occ"

    def install(self):
        self.handler("read", self._h_read)
        self.handler("lock", self._h_lock)
        self.handler("validate", self._h_validate)
        self.handler("commit", self._h_commit)
        self.handler("release", self._h_release)

    def _h_read(self, req: Request):
        table, key = req.payload
        node, off = self.db.locate(table, key)
        return self.tuple_bytes(table, node, off), off

    def _h_lock(self, req: Request):
        table, key, ts, wts = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        if cl.local_cas(node, off + LOCK_OFF, 0, ts) != 0:
            return "locked"
        t = self.db.tuple_at(table, node, off)
        return "ok" if t.slots[0][0] == wts else "changed"

    def _h_validate(self, req: Request):
        table, key, wts = req.payload
        node, off = self.db.locate(table, key)
        t = self.db.tuple_at(table, node, off)
        return t.lock == 0 and t.slots[0][0] == wts

    def _h_commit(self, req: Request):
        table, key, ts, wts, record = req.payload
        cl = self.cluster
        node, off = self.db.locate(table, key)
        cl.store(node, off + slot_offset(0, len(record)), encode_slot(wts, record))
        cl.local_cas(node, off + LOCK_OFF, ts, 0)
        return True

    def _read(self, ctx, e):
        w = ctx.worker
        if self.os("Read"):
            yield from self.offset(w, e)
            data = (yield w.verbs(e.node, [self.db.read_request(e.table, e.off)]))[0]
        else:
            data, e.off = yield self.call(w, e.node, "read", (e.table, e.key))
        t = self.db.parse(e.table, data)
        e.wts, e.record = t.slots[0]

    def _lock(self, ctx, e):
        w = ctx.worker
        if self.os("Lock"):
            old, data = yield w.verbs(e.node, [cas(e.off + LOCK_OFF, 0, ctx.ctts),
                                               self.db.read_request(e.table, e.off)])
            if old != 0:
                raise TxnAbort("lock-conflict", "Lock")
            e.locked = True
            if self.db.parse(e.table, data).slots[0][0] != e.wts:
                raise TxnAbort("lock-changed", "Lock")
        else:
            r = yield self.call(w, e.node, "lock", (e.table, e.key, ctx.ctts, e.wts))
            if r == "locked":
                raise TxnAbort("lock-conflict", "Lock")
            e.locked = True
            if r != "ok":
                raise TxnAbort("lock-changed", "Lock")

    def _validate(self, ctx, e):
        w = ctx.worker
        if self.os("Validate"):
            data = (yield w.verbs(e.node, [self.db.read_request(e.table, e.off)]))[0]
            t = self.db.parse(e.table, data)
            ok = t.lock == 0 and t.slots[0][0] == e.wts
        else:
            ok = yield self.call(w, e.node, "validate", (e.table, e.key, e.wts))
        if not ok:
            raise TxnAbort("validate", "Validate")

    def _commit_one(self, ctx, e):
        w = ctx.worker
        wts = ctx.commit_tts
        if self.os("Commit"):
            yield w.verbs(e.node, [write(e.off + slot_offset(0, len(e.new_record)),
                                         encode_slot(wts, e.new_record)),
                                   write(e.off + LOCK_OFF, ZERO64)])
        else:
            yield self.call(w, e.node, "commit", (e.table, e.key, ctx.ctts, wts, e.new_record))
        e.locked = False

    def run(self, ctx, clock):
        w = ctx.worker
        ctx.enter("Read")
        yield from par(w, [self._read(ctx, e) for e in ctx.entries()])
        yield from self.execute(ctx)
        if ctx.ws:
            ctx.enter("Lock")
            yield from par(w, [self._lock(ctx, e) for e in ctx.ws.values()])
        if ctx.rs:
            ctx.enter("Validate")
            yield from par(w, [self._validate(ctx, e) for e in ctx.rs.values()])
        # the write timestamp is drawn after validation so it exceeds every
        # version this transaction has seen
        for e in ctx.entries():
            clock.adjust_past(e.wts)
        ctx.commit_tts = make_timestamp(clock.tick(), *w.ident)
        ctx.commit_key = ctx.commit_tts
        yield from self.write_log(ctx, ctx.commit_tts)
        if ctx.ws:
            ctx.enter("Commit")
            yield from par(w, [self._commit_one(ctx, e) for e in ctx.ws.values()])

    def cleanup(self, ctx, stage="Release"):
        yield from super().cleanup(ctx, "Release")
