"""Pieces every protocol shares: timestamps, transaction context, stage
ledger, hybrid codes, coordinator-log replication and the retry loop."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any

from .netsim import Cluster, ConfigError, Request, Worker, write

CLOCK_BITS = 40
MAX_CLOCK = (1 << CLOCK_BITS) - 1


class TimestampOverflow(ConfigError):
    pass


def make_timestamp(clock: int, machine: int, thread: int, coro: int) -> int:
    if not 0 <= clock <= MAX_CLOCK:
        raise TimestampOverflow(f"clock {clock} does not fit in {CLOCK_BITS} bits")
    for name, v in (("machine", machine), ("thread", thread), ("coroutine", coro)):
        if not 0 <= v <= 0xFF:
            raise TimestampOverflow(f"{name} id {v} does not fit in 8 bits")
    return (clock << 24) | (machine << 16) | (thread << 8) | coro


def unpack_timestamp(ts: int) -> tuple[int, int, int, int]:
    return ts >> 24, (ts >> 16) & 0xFF, (ts >> 8) & 0xFF, ts & 0xFF


def ts_clock(ts: int) -> int:
    return ts >> 24


class Clock:
    """Per-coroutine logical clock. Starts at 1 since timestamp 0 is reserved."""

    def __init__(self, start: int = 1, source=None):
        self.value = max(1, start)
        self.source = source

    def tick(self) -> int:
        v = self.value
        if self.source is not None:
            v = max(v, self.source())
        self.value = v + 1
        return v

    def adjust(self, observed_ts: int):
        """Raise the clock to the observed timestamp's clock; never lowers it."""
        c = ts_clock(observed_ts)
        if c > self.value:
            self.value = c

    def adjust_past(self, observed_ts: int):
        """Make the next tick yield a timestamp above ``observed_ts``."""
        c = ts_clock(observed_ts) + 1
        if c > self.value:
            self.value = c


# Stage lists, earliest first. The leftmost digit of a hybrid code
# selects the primitive of the first stage.
STAGES = {
    "nowait": ("Fetch", "Log", "Commit"),
    "waitdie": ("Fetch", "Log", "Commit"),
    "occ": ("Read", "Lock", "Validate", "Log", "Commit", "Release"),
    "mvcc": ("Read", "Lock", "Log", "Commit"),
    "sundial": ("Read", "Lock", "Renew", "Log", "Commit"),
    "calvin": ("Sequence", "Forward"),
}


class HybridCode:
    """Bit per stage: '1' = one-sided verbs, '0' = two-sided RPC."""

    def __init__(self, protocol: str, bits: str):
        if protocol not in STAGES:
            raise ConfigError(f"unknown protocol {protocol!r}")
        stages = STAGES[protocol]
        if len(bits) != len(stages) or any(c not in "01" for c in bits):
            raise ConfigError(
                f"hybrid code for {protocol} needs {len(stages)} binary digits "
                f"({', '.join(stages)}), got {bits!r}")
        self.protocol = protocol
        self.bits = bits
        self.stages = stages
        self._map = {s: c == "1" for s, c in zip(stages, bits)}

    @classmethod
    def uniform(cls, protocol: str, onesided: bool) -> "HybridCode":
        return cls(protocol, ("1" if onesided else "0") * len(STAGES[protocol]))

    def onesided(self, stage: str) -> bool:
        return self._map[stage]

    def __str__(self):
        return self.bits

    def __repr__(self):
        return f"HybridCode({self.protocol!r}, {self.bits!r})"

    def __eq__(self, other):
        return isinstance(other, HybridCode) and (self.protocol, self.bits) == (other.protocol, other.bits)

    def __hash__(self):
        return hash((self.protocol, self.bits))


def enumerate_hybrids(protocol: str) -> list[HybridCode]:
    k = len(STAGES[protocol])
    return [HybridCode(protocol, format(i, f"0{k}b")) for i in range(1 << k)]


class TxnAbort(Exception):
    def __init__(self, reason: str, stage: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.stage = stage


@dataclass
class Entry:
    """One read- or write-set element."""
    table: str
    key: int
    node: int = -1
    off: int = -1
    record: bytes = b""
    wts: int = 0
    rts: int = 0
    locked: bool = False
    new_record: bytes | None = None
    slot: int = 0

    @property
    def ident(self):
        return (self.table, self.key)


@dataclass
class TxnSpec:
    txn_id: int
    rs: list  # [(table, key)]
    ws: list
    logic: str
    args: tuple = ()
    arrival: tuple = (0, 0, 0)

    def read_only(self) -> bool:
        return not self.ws


class TxnContext:
    def __init__(self, spec: TxnSpec, worker: Worker, ledger: dict, attempt: int = 0):
        self.spec = spec
        self.worker = worker
        self.attempt = attempt
        self.ctts = 0
        self.commit_tts = 0
        ws_keys = list(dict.fromkeys(spec.ws))
        wset = set(ws_keys)
        self.ws: dict = {k: Entry(*k) for k in ws_keys}
        self.rs: dict = {k: Entry(*k) for k in dict.fromkeys(spec.rs) if k not in wset}
        self.status = "active"
        self.ledger = ledger
        self._stage = None
        self._mark = worker.now
        self.commit_key: Any = None

    def enter(self, stage: str | None):
        now = self.worker.now
        if self._stage is not None:
            self.ledger[self._stage] = self.ledger.get(self._stage, 0) + now - self._mark
        self._stage = stage
        self._mark = now

    def entries(self):
        yield from self.rs.values()
        yield from self.ws.values()

    def reads(self) -> dict:
        """Values visible to the transaction logic, rs and ws alike."""
        return {e.ident: e.record for e in self.entries()}


# -- coordinator log --------------------------------------------------------

_LOG_HDR = struct.Struct("<QI")
_LOG_ENT = struct.Struct("<HQH")


@dataclass
class LogRecord:
    ts: int
    writes: list  # [(table id, key, record bytes)]

    def encode(self) -> bytes:
        parts = [_LOG_HDR.pack(self.ts, len(self.writes))]
        for tid, key, rec in self.writes:
            parts.append(_LOG_ENT.pack(tid, key, len(rec)))
            parts.append(rec)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "LogRecord":
        ts, n = _LOG_HDR.unpack_from(data, 0)
        pos = _LOG_HDR.size
        out = []
        for _ in range(n):
            tid, key, ln = _LOG_ENT.unpack_from(data, pos)
            pos += _LOG_ENT.size
            out.append((tid, key, bytes(data[pos:pos + ln])))
            pos += ln
        return cls(ts, out)


class LogRings:
    """Per-(backup, writer) ring buffers in registered memory."""

    def __init__(self, cluster: Cluster, replicas: int, ring_bytes: int = 16384):
        if replicas < 1:
            raise ConfigError("replication factor must be at least 1")
        if replicas > cluster.nodes:
            raise ConfigError(f"replication factor {replicas} exceeds cluster size {cluster.nodes}")
        self.cluster = cluster
        self.replicas = replicas
        self.ring_bytes = ring_bytes
        self.rings: dict[tuple, Any] = {}
        self.heads: dict[tuple, int] = {}
        self.reclaims = 0
        self.appended = 0
        if replicas > 1:
            for (n, t, c) in sorted(cluster.workers):
                for b in self.backups(n):
                    self.rings[(b, (n, t, c))] = cluster.register_region(b, ring_bytes)
                    self.heads[(b, (n, t, c))] = 0
        cluster.register_handler_all("log_append", self._handle_append)

    def backups(self, node: int) -> list[int]:
        n = self.cluster.nodes
        return [(node + i) % n for i in range(1, self.replicas)]

    def _slot(self, backup: int, writer: tuple, length: int) -> int:
        if length > self.ring_bytes:
            raise ConfigError(f"log record of {length} bytes exceeds ring size {self.ring_bytes}")
        key = (backup, writer)
        head = self.heads[key]
        if head + length > self.ring_bytes:
            # wrapped: entries before head were acknowledged, reclaim lazily
            head = 0
            self.reclaims += 1
        self.heads[key] = (head + length + 7) & ~7
        return self.rings[key].base + head

    def _handle_append(self, req: Request):
        writer, data = req.payload
        off = self._slot(req.node, writer, len(data))
        self.cluster.store(req.node, off, data)
        return True

    def append(self, w: Worker, rec: LogRecord, onesided: bool):
        """Generator: ship ``rec`` to every backup in parallel, wait for acks."""
        if self.replicas <= 1 or not rec.writes:
            return []
        data = rec.encode()
        futs = []
        locs = []
        for b in self.backups(w.node):
            if onesided:
                off = self._slot(b, w.ident, len(data))
                locs.append((b, off))
                futs.append(w.post(b, [write(off, data)]))
            else:
                futs.append(w.rpc(b, "log_append", (w.ident, data)))
        self.appended += 1
        res = yield w.gather(futs)
        for r in res:
            if isinstance(r, BaseException):
                raise r
        return locs


# -- stats and the coordinator loop ----------------------------------------

@dataclass
class CommitRecord:
    txn_id: int
    commit_key: Any
    reads: dict  # (table, key) -> wts observed
    writes: dict  # (table, key) -> wts installed


@dataclass
class RunStats:
    commits: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    ledgers: list = field(default_factory=list)
    aborts: int = 0
    abort_reasons: dict = field(default_factory=dict)
    abort_stages: dict = field(default_factory=dict)
    wait_events: list = field(default_factory=list)
    gave_up: int = 0
    commit_seq: int = 0
    commit_times: list = field(default_factory=list)
    # when each closed-loop client ran out of work
    finish_times: list = field(default_factory=list)

    def record_abort(self, exc: TxnAbort):
        self.aborts += 1
        self.abort_reasons[exc.reason] = self.abort_reasons.get(exc.reason, 0) + 1
        self.abort_stages[exc.stage] = self.abort_stages.get(exc.stage, 0) + 1

    def record_commit(self, rec: CommitRecord, latency: int, ledger: dict, now: int = 0):
        self.commits.append(rec)
        self.commit_times.append(now)
        self.latencies.append(latency)
        self.ledgers.append(dict(ledger))

    def next_seq(self) -> int:
        self.commit_seq += 1
        return self.commit_seq


@dataclass
class RetryPolicy:
    backoff_base: int = 32
    backoff_cap: int = 8192
    max_retries: int = 100000

    def delay(self, w: Worker, attempt: int) -> int:
        hi = min(self.backoff_cap, self.backoff_base << min(attempt, 16))
        return w.rng.randint(0, hi)


TIME_CLOCK = True


def coordinator(w: Worker, proto, specs: list[TxnSpec], stats: RunStats,
                retry: RetryPolicy | None = None):
    """Closed-loop coordinator: run each spec to commit, retrying on abort."""
    retry = retry or RetryPolicy()
    clock = Clock(source=(lambda: w.now) if TIME_CLOCK else None)
    for spec in specs:
        start = w.now
        ledger: dict = {}
        attempt = tries = 0
        keep_ts = None
        while True:
            ctx = TxnContext(spec, w, ledger, tries)
            proto.begin(ctx, clock, keep_ts)
            try:
                yield from proto.run(ctx, clock)
            except TxnAbort as exc:
                ctx.status = "aborted"
                stats.record_abort(exc)
                yield from proto.cleanup(ctx)
                if proto.keeps_timestamp:
                    keep_ts = ctx.ctts
                tries += 1
                if tries > retry.max_retries:
                    ctx.enter(None)
                    stats.gave_up += 1
                    break
                ctx.enter("backoff")
                if exc.reason in proto.stale_timestamp:
                    # a fresh timestamp is the cure; a long wait would only
                    # let the rest of the cluster run further ahead
                    yield w.sleep(retry.delay(w, 0))
                else:
                    attempt += 1
                    yield w.sleep(retry.delay(w, attempt))
                ctx.enter(None)
                continue
            ctx.status = "committed"
            ctx.enter(None)
            stats.record_commit(proto.commit_record(ctx), w.now - start, ledger, w.now)
            break
    stats.finish_times.append(w.now)
