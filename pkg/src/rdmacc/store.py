"""Partitioned tuple store living in simulated registered memory.

Tuple layout (little-endian, every metadata cell 8-byte aligned)::

    +0   lock   u64   0 = free, else holder timestamp
    +8   rts    u64
    +16  slot 0: wts u64 | record (R bytes)
         slot 1: wts u64 | record
         ...

Slot ``i`` starts at ``16 + i * (8 + R)``.  Single-version protocols only
use slot 0; the current version of a tuple is the slot with the largest
wts (lowest index on ties).
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

from .netsim import Cluster, ConfigError, Worker, read

LOCK_OFF = 0
RTS_OFF = 8
HDR = 16
_U64 = struct.Struct("<Q")
_HDR = struct.Struct("<QQ")


class TupleFormatError(ValueError):
    pass


class UnknownKey(KeyError):
    pass


def tuple_size(record_len: int, slots: int) -> int:
    return HDR + slots * (8 + record_len)


def slot_offset(i: int, record_len: int) -> int:
    return HDR + i * (8 + record_len)


@dataclass
class Tuple:
    lock: int
    rts: int
    slots: list  # [(wts, record bytes)]

    @property
    def newest(self) -> int:
        best = 0
        for i in range(1, len(self.slots)):
            if self.slots[i][0] > self.slots[best][0]:
                best = i
        return best

    @property
    def wts(self) -> int:
        return self.slots[self.newest][0]

    @property
    def record(self) -> bytes:
        return self.slots[self.newest][1]

    @property
    def oldest(self) -> int:
        best = 0
        for i in range(1, len(self.slots)):
            if self.slots[i][0] < self.slots[best][0]:
                best = i
        return best

    def version_below(self, ts: int):
        """Index of the slot with the largest wts strictly below ``ts``."""
        best = None
        for i, (w, _) in enumerate(self.slots):
            if w < ts and (best is None or w > self.slots[best][0]):
                best = i
        return best

    def slot_wts(self) -> tuple:
        return tuple([s[0] for s in self.slots])


@functools.lru_cache(maxsize=None)
def _layout(record_len: int, slots: int) -> struct.Struct:
    return struct.Struct("<QQ" + f"Q{record_len}s" * slots)


def parse_tuple(data: bytes, record_len: int, slots: int) -> Tuple:
    layout = _layout(record_len, slots)
    if len(data) != layout.size:
        raise TupleFormatError(f"tuple needs {layout.size} bytes, got {len(data)}")
    f = layout.unpack(data)
    return Tuple(f[0], f[1], list(zip(f[2::2], f[3::2])))


def encode_tuple(t: Tuple, record_len: int) -> bytes:
    parts = [_HDR.pack(t.lock, t.rts)]
    for w, rec in t.slots:
        if len(rec) != record_len:
            raise TupleFormatError(f"record must be {record_len} bytes, got {len(rec)}")
        parts.append(_U64.pack(w))
        parts.append(rec)
    return b"".join(parts)


def encode_slot(wts: int, record: bytes) -> bytes:
    return _U64.pack(wts) + record


@dataclass
class Table:
    name: str
    record_len: int
    keys: Iterable[int]
    home: Callable[[int], int]
    init: Callable[[int], bytes]
    tid: int = 0


class Database:
    """Tables partitioned across the cluster's nodes.

    Every node gets one data region and one directory region per table.
    The directory maps a node-local index to the tuple's byte offset so a
    cold lookup from another node costs exactly one 8-byte READ.
    """

    def __init__(self, cluster: Cluster, tables: list[Table], slots: int = 4,
                 prewarm: bool = True):
        if slots < 1:
            raise ConfigError("need at least one version slot")
        self.cluster = cluster
        self.slots = slots
        self.prewarm = prewarm
        self.tables: dict[str, Table] = {}
        self.by_tid: list[Table] = []
        self.loc: dict[tuple, tuple] = {}
        self._dir: dict[tuple, tuple] = {}
        self.caches: dict[tuple, dict] = {}
        self.directory_reads = 0
        for tid, t in enumerate(tables):
            t.tid = tid
            self.tables[t.name] = t
            self.by_tid.append(t)
            self._place(t)

    def _place(self, t: Table):
        cl = self.cluster
        size = tuple_size(t.record_len, self.slots)
        per_node: list[list[int]] = [[] for _ in range(cl.nodes)]
        for k in t.keys:
            n = t.home(k)
            if not 0 <= n < cl.nodes:
                raise ConfigError(f"table {t.name}: key {k} maps to missing node {n}")
            per_node[n].append(k)
        for n, keys in enumerate(per_node):
            if not keys:
                continue
            data = cl.register_region(n, size * len(keys))
            dreg = cl.register_region(n, 8 * len(keys))
            blob = []
            dirs = []
            hdr = bytes(HDR)
            zero = bytes(8)
            for i, k in enumerate(keys):
                rec = t.init(k)
                if len(rec) != t.record_len:
                    raise ConfigError(f"table {t.name}: initial record size mismatch")
                off = data.base + i * size
                self.loc[(t.name, k)] = (n, off)
                self._dir[(t.name, k)] = (n, dreg.base + 8 * i)
                blob.append(hdr + (zero + rec) * self.slots)
                dirs.append(_U64.pack(off))
            mem = cl.mem[n]
            mem[data.base:data.base + data.len] = b"".join(blob)
            mem[dreg.base:dreg.base + dreg.len] = b"".join(dirs)

    # -- layout helpers ---------------------------------------------------
    def tuple_size(self, table: str) -> int:
        return tuple_size(self.tables[table].record_len, self.slots)

    def record_len(self, table: str) -> int:
        return self.tables[table].record_len

    def home(self, table: str, key: int) -> int:
        try:
            return self.loc[(table, key)][0]
        except KeyError:
            raise UnknownKey((table, key)) from None

    def locate(self, table: str, key: int) -> tuple:
        try:
            return self.loc[(table, key)]
        except KeyError:
            raise UnknownKey((table, key)) from None

    def parse(self, table: str, data: bytes) -> Tuple:
        return parse_tuple(data, self.tables[table].record_len, self.slots)

    def read_tuple(self, table: str, key: int) -> Tuple:
        n, off = self.locate(table, key)
        return self.parse(table, bytes(self.cluster.mem[n][off:off + self.tuple_size(table)]))

    def tuple_at(self, table: str, node: int, off: int) -> Tuple:
        return self.parse(table, bytes(self.cluster.mem[node][off:off + self.tuple_size(table)]))

    def read_request(self, table: str, off: int):
        return read(off, self.tuple_size(table))

    # -- offset resolution ------------------------------------------------
    def resolve_offset(self, w: Worker, table: str, key: int):
        """Generator: ``(node, off) = yield from db.resolve_offset(w, t, k)``.

        Local keys and cached keys are free; a cold remote key costs one
        one-sided READ of the owner's directory entry.
        """
        node, off = self.locate(table, key)
        if node == w.node or self.prewarm:
            return node, off
        cache = self.caches.setdefault(w.ident, {})
        hit = cache.get((table, key))
        if hit is not None:
            return hit
        dnode, doff = self._dir[(table, key)]
        res = yield w.post(dnode, [read(doff, 8)])
        self.directory_reads += 1
        got = (dnode, _U64.unpack(res[0])[0])
        cache[(table, key)] = got
        return got

    # -- whole-store views -------------------------------------------------
    def snapshot(self) -> dict:
        """Current record of every key, keyed by (table, key)."""
        out = {}
        for (t, k) in self.loc:
            out[(t, k)] = self.read_tuple(t, k).record
        return out

    def initial_state(self) -> dict:
        return {(t.name, k): t.init(k) for t in self.by_tid for k in t.keys}

    def tuples(self):
        for (t, k) in self.loc:
            yield (t, k), self.read_tuple(t, k)
