"""Deterministic epoch execution.

Per epoch each node's sequencer stamps up to ``batch`` local transactions
and broadcasts them into every node's request buffer (payload first, then
the header carrying ``epoch + 1`` and the batch size).  Once all headers
have arrived every node sorts the union by (timestamp, txn id), takes
local locks in that order and runs the transactions it owns records for.
Nodes holding read-set records forward their values into the forward
buffers of the nodes that write; those wait on the length cells, run the
logic and install the writes locally.  Nothing aborts.

Request buffers are double-buffered by epoch parity: a sender can be at
most one epoch ahead of any receiver, since starting epoch e+1 requires
that receiver's own epoch-e+1 header.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

from ..netsim import ConfigError, Future, Request, Worker, write
from ..store import Database, encode_slot, slot_offset
from ..txncore import (CommitRecord, HybridCode, RunStats, TxnSpec, make_timestamp)
from ..workload import LOGIC
from .base import ProtoOptions

_U64 = struct.Struct("<Q")
_HDR = struct.Struct("<QQ")
_REQ = struct.Struct("<QQHHHH")  # txn id, ts, logic id, |rs|, |ws|, |args|
_KEY = struct.Struct("<HQ")
_ARG = struct.Struct("<q")
_VAL = struct.Struct("<HQQ")  # table id, key, wts; record follows

# logic ids follow registration order, which only ever appends
def _logic_id(name: str) -> int:
    return list(LOGIC).index(name)


@dataclass
class CalvinRequest:
    txn_id: int
    ts: int
    spec: TxnSpec


def encode_request(req: CalvinRequest, db: Database) -> bytes:
    s = req.spec
    parts = [_REQ.pack(s.txn_id, req.ts, _logic_id(s.logic), len(s.rs), len(s.ws), len(s.args))]
    for t, k in list(s.rs) + list(s.ws):
        parts.append(_KEY.pack(db.tables[t].tid, k))
    for a in s.args:
        parts.append(_ARG.pack(a))
    return b"".join(parts)


def decode_request(data: bytes, pos: int, db: Database) -> CalvinRequest:
    txn_id, ts, lid, nrs, nws, nargs = _REQ.unpack_from(data, pos)
    pos += _REQ.size
    keys = []
    for _ in range(nrs + nws):
        tid, k = _KEY.unpack_from(data, pos)
        pos += _KEY.size
        keys.append((db.by_tid[tid].name, k))
    args = []
    for _ in range(nargs):
        args.append(_ARG.unpack_from(data, pos)[0])
        pos += _ARG.size
    spec = TxnSpec(txn_id, keys[:nrs], keys[nrs:], list(LOGIC)[lid], tuple(args))
    return CalvinRequest(txn_id, ts, spec)


class Calvin:
    name = "calvin"

    def __init__(self, db: Database, hybrid: HybridCode, stats: RunStats,
                 opts: ProtoOptions | None = None, batch: int = 100,
                 max_keys: int = 32, max_args: int = 8):
        if batch < 1:
            raise ConfigError("batch size must be positive")
        self.db = db
        self.cluster = cl = db.cluster
        self.hybrid = hybrid
        self.stats = stats
        self.opts = opts or ProtoOptions()
        self.batch = batch
        n = cl.nodes
        self.slot_size = _REQ.size + max_keys * _KEY.size + max_args * _ARG.size
        rec = max(t.record_len for t in db.by_tid)
        self.max_keys = max_keys
        self.value_cap = max_keys * (_VAL.size + rec)
        self.crb = {}
        for r in range(n):
            for s in range(n):
                for p in (0, 1):
                    self.crb[(r, s, p)] = cl.register_region(r, _HDR.size + batch * self.slot_size)
        self.positions = n * batch
        self.cell = 8 + self.value_cap
        self.cfb = [cl.register_region(r, self.positions * n * self.cell) for r in range(n)]
        cl.register_handler_all("calvin.deliver", self._h_deliver)
        cl.register_handler_all("calvin.forward", self._h_forward)
        self.schedules: list[list] = [[] for _ in range(n)]
        self.epoch_spans: list[list] = [[] for _ in range(n)]
        self.epochs = 0

    def os(self, stage):
        return self.hybrid.onesided(stage)

    # -- buffers -------------------------------------------------------------
    def _cfb_off(self, receiver: int, pos: int, sender: int) -> int:
        return self.cfb[receiver].base + (pos * self.cluster.nodes + sender) * self.cell

    def _h_deliver(self, req: Request):
        sender, epoch, payload, size = req.payload
        reg = self.crb[(req.node, sender, epoch % 2)]
        if payload:
            self.cluster.store(req.node, reg.base + _HDR.size, payload)
        self.cluster.store(req.node, reg.base, _HDR.pack(epoch + 1, size))
        return True

    def _h_forward(self, req: Request):
        pos, sender, value = req.payload
        off = self._cfb_off(req.node, pos, sender)
        self.cluster.store(req.node, off + 8, value)
        self.cluster.store(req.node, off, _U64.pack(len(value)))
        return True

    # -- driver ------------------------------------------------------------
    def spawn(self, specs: list[TxnSpec]):
        cl = self.cluster
        per_node = [[] for _ in range(cl.nodes)]
        for s in specs:
            per_node[s.arrival[0] % cl.nodes].append(s)
        self.epochs = max(1, max((len(p) + self.batch - 1) // self.batch for p in per_node))
        for n in range(cl.nodes):
            cl.spawn(n, 0, 0, self._node_loop(cl.workers[(n, 0, 0)], per_node[n]), name=f"calvin{n}")

    def _broadcast(self, w: Worker, epoch: int, batch: list[CalvinRequest]):
        cl = self.cluster
        n = w.node
        blob = b"".join(encode_request(r, self.db).ljust(self.slot_size, b"\0") for r in batch)
        for r in batch:
            if len(encode_request(r, self.db)) > self.slot_size:
                raise ConfigError("transaction request exceeds request-buffer slot")
        hdr = _HDR.pack(epoch + 1, len(batch))
        futs = []
        for r in range(cl.nodes):
            reg = self.crb[(r, n, epoch % 2)]
            if r == n:
                if blob:
                    cl.store(n, reg.base + _HDR.size, blob)
                cl.store(n, reg.base, hdr)
            elif self.os("Sequence"):
                reqs = [write(reg.base + _HDR.size, blob)] if blob else []
                reqs.append(write(reg.base, hdr))
                futs.append(w.post(r, reqs))
            else:
                futs.append(w.rpc(r, "calvin.deliver", (n, epoch, blob, len(batch))))
        if futs:
            yield w.gather(futs)

    def _collect(self, w: Worker, epoch: int) -> list[CalvinRequest]:
        cl = self.cluster
        n = w.node
        out = []
        for s in range(cl.nodes):
            base = self.crb[(n, s, epoch % 2)].base
            yield w.wait_until(n, base, lambda mem, b=base: _U64.unpack_from(mem, b)[0] == epoch + 1)
            _, size = _HDR.unpack_from(cl.mem[n], base)
            data = bytes(cl.mem[n][base + _HDR.size:base + _HDR.size + size * self.slot_size])
            for i in range(size):
                out.append(decode_request(data, i * self.slot_size, self.db))
        out.sort(key=lambda r: (r.ts, r.txn_id))
        return out

    def _node_loop(self, w: Worker, specs: list[TxnSpec]):
        n = w.node
        B = self.batch
        workers = sorted(k for k in self.cluster.workers if k[0] == n)
        for epoch in range(self.epochs):
            start = w.now
            mine = [CalvinRequest(s.txn_id, make_timestamp(epoch * B + i + 1, n, 0, 0), s)
                    for i, s in enumerate(specs[epoch * B:(epoch + 1) * B])]
            yield from self._broadcast(w, epoch, mine)
            schedule = yield from self._collect(w, epoch)
            ready = w.now
            self.schedules[n].append([r.txn_id for r in schedule])
            locks = _LockTable()
            jobs = []
            for pos, req in enumerate(schedule):
                local = [k for k in dict.fromkeys(list(req.spec.rs) + list(req.spec.ws))
                         if self.db.home(*k) == n]
                if not local:
                    continue
                granted = locks.request(self.cluster, pos, local)
                jobs.append((pos, req, local, granted))
            futs = []
            for i, (pos, req, local, granted) in enumerate(jobs):
                ex = self.cluster.workers[workers[i % len(workers)]]
                futs.append(ex.fork(self._execute(ex, epoch, pos, req, local, granted, locks,
                                                  start, ready), name=f"calvin-exec{n}"))
            res = yield w.gather(futs)
            for r in res:
                if isinstance(r, BaseException):
                    raise r
            self.epoch_spans[n].append((start, w.now))
        self.stats.finish_times.append(w.now)

    def _execute(self, w: Worker, epoch, pos, req: CalvinRequest, local, granted, locks,
                 start, ready):
        cl = self.cluster
        db = self.db
        n = w.node
        spec = req.spec
        yield granted
        yield w.compute(cl.latency.local_op)
        values = {}
        for t, k in local:
            tup = db.read_tuple(t, k)
            values[(t, k)] = tup.slots[0]
        owners = sorted({db.home(*k) for k in list(spec.rs) + list(spec.ws)})
        active = sorted({db.home(*k) for k in spec.ws}) or owners[:1]
        blob = b"".join(_VAL.pack(db.tables[t].tid, k, wts) + rec
                        for (t, k), (wts, rec) in values.items())
        futs = []
        for a in active:
            if a == n:
                continue
            off = self._cfb_off(a, pos, n)
            if self.os("Forward"):
                futs.append(w.post(a, [write(off + 8, blob), write(off, _U64.pack(len(blob)))]))
            else:
                futs.append(w.rpc(a, "calvin.forward", (pos, n, blob)))
        if n not in active:
            locks.release(pos, local)
            if futs:
                yield w.gather(futs)
            return
        for s in owners:
            if s == n:
                continue
            off = self._cfb_off(n, pos, s)
            yield w.wait_until(n, off, lambda mem, o=off: _U64.unpack_from(mem, o)[0] != 0)
            ln = _U64.unpack_from(cl.mem[n], off)[0]
            data = bytes(cl.mem[n][off + 8:off + 8 + ln])
            p = 0
            while p < ln:
                tid, k, wts = _VAL.unpack_from(data, p)
                p += _VAL.size
                table = db.by_tid[tid]
                values[(table.name, k)] = (wts, data[p:p + table.record_len])
                p += table.record_len
            cl.mem[n][off:off + 8] = bytes(8)
        if self.opts.exec_time:
            yield w.compute(self.opts.exec_time)
        exec_time = self.opts.exec_time
        out = LOGIC[spec.logic]({k: v[1] for k, v in values.items()}, spec)
        for t, k in spec.ws:
            if db.home(t, k) == n:
                node, off = db.locate(t, k)
                rec = out[(t, k)]
                cl.store(n, off + slot_offset(0, len(rec)), encode_slot(req.ts, rec))
        locks.release(pos, local)
        if futs:
            yield w.gather(futs)
        if n == active[0]:
            reads = {k: v[0] for k, v in values.items()}
            writes = {k: req.ts for k in dict.fromkeys(spec.ws)}
            self.stats.record_commit(
                CommitRecord(spec.txn_id, (epoch, pos), reads, writes),
                w.now - start,
                {"Sequence": ready - start, "exec": exec_time,
                 "Forward": w.now - ready - exec_time},
                w.now)


class _LockTable:
    """Exclusive per-key FIFO queues filled in schedule order."""

    def __init__(self):
        self.queues: dict = {}
        self.waiting: dict = {}

    def request(self, cluster, pos, keys) -> Future:
        fut = Future(cluster)
        missing = 0
        for k in keys:
            q = self.queues.setdefault(k, deque())
            q.append(pos)
            if q[0] != pos:
                missing += 1
        if missing:
            self.waiting[pos] = [missing, fut]
        else:
            fut.done = True
        return fut

    def release(self, pos, keys):
        for k in keys:
            q = self.queues[k]
            assert q[0] == pos
            q.popleft()
            if q:
                nxt = self.waiting[q[0]]
                nxt[0] -= 1
                if nxt[0] == 0:
                    del self.waiting[q[0]]
                    nxt[1].resolve(None)
