"""Deterministic discrete-event model of a small RDMA cluster.

Nodes own a flat byte-addressable memory carved into registered regions.
Cooperative tasks (generators) run on (node, thread, coroutine) workers and
suspend only by yielding a :class:`Future`.  One-sided verbs are posted in
doorbell batches that apply to remote memory in issue order; two-sided RPCs
run a registered handler on the destination's event loop.

Every posted batch and every RPC call costs exactly one network round trip
in :attr:`Cluster.round_trips`.
"""

from __future__ import annotations

import bisect
import enum
import heapq
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, NamedTuple

U64 = struct.Struct("<Q")
MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class VerbFault(RuntimeError):
    """Completion error for a malformed or out-of-bounds verb."""


class SimDeadlock(RuntimeError):
    def __init__(self, blocked: list[str]):
        self.blocked = blocked
        super().__init__("no runnable task; blocked: " + ", ".join(blocked))


@dataclass(frozen=True)
class LatencyModel:
    one_sided_rt: int = 2
    rpc_rt: int = 4
    local_op: int = 1
    per_verb_overhead: int = 0
    # Extra one-way delay drawn uniformly from [0, jitter] per message, from
    # the cluster's seeded RNG. Zero keeps the schedule fully regular.
    jitter: int = 0

    def __post_init__(self):
        for name in ("one_sided_rt", "rpc_rt", "local_op", "per_verb_overhead", "jitter"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"latency {name} must be a non-negative int, got {v!r}")


@dataclass(frozen=True)
class Region:
    owner: int
    base: int
    len: int


class VerbKind(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    CAS = "CAS"
    FAA = "FAA"


_READ, _WRITE, _CAS, _FAA = VerbKind.READ, VerbKind.WRITE, VerbKind.CAS, VerbKind.FAA


class VerbRequest(NamedTuple):
    kind: VerbKind
    offset: int
    length: int = 8
    payload: bytes = b""
    expected: int = 0
    # desired value for CAS, delta for FAA
    value: int = 0


def read(offset: int, length: int) -> VerbRequest:
    return VerbRequest(VerbKind.READ, offset, length)


def write(offset: int, payload: bytes) -> VerbRequest:
    return VerbRequest(VerbKind.WRITE, offset, len(payload), bytes(payload))


def cas(offset: int, expected: int, desired: int) -> VerbRequest:
    return VerbRequest(VerbKind.CAS, offset, 8, expected=expected, value=desired)


def faa(offset: int, delta: int) -> VerbRequest:
    return VerbRequest(VerbKind.FAA, offset, 8, value=delta)


class DoorbellBatch:
    """Verbs posted together; only the last one is signaled, so the batch
    completes as a unit."""

    __slots__ = ("src", "dst", "requests")

    def __init__(self, src: int, dst: int, requests: list[VerbRequest]):
        if not requests:
            raise ConfigError("empty doorbell batch")
        self.src = src
        self.dst = dst
        self.requests = requests

    def __repr__(self):
        return f"DoorbellBatch({self.src}->{self.dst}, {len(self.requests)} verbs)"


class Future:
    """Single-assignment result slot; tasks suspend by yielding one."""

    __slots__ = ("done", "value", "exc", "_waiters", "_cluster")

    def __init__(self, cluster: "Cluster"):
        self._cluster = cluster
        self.done = False
        self.value = None
        self.exc: BaseException | None = None
        self._waiters: list = []

    def resolve(self, value=None):
        if self.done:
            raise ProtocolError("future resolved twice")
        self.done = True
        self.value = value
        self._fire()

    def fail(self, exc: BaseException):
        if self.done:
            raise ProtocolError("future resolved twice")
        self.done = True
        self.exc = exc
        self._fire()

    def add_waiter(self, waiter):
        self._waiters.append(waiter)

    def _fire(self):
        waiters, self._waiters = self._waiters, []
        cl = self._cluster
        for w in waiters:
            if isinstance(w, Task):
                if cl._current is None:
                    w.wake(self.value, self.exc)
                else:
                    cl._at(cl.now, w.worker.origin, w._wake_future, self)
            else:
                w(self)

    def __repr__(self):
        state = "done" if self.done else "pending"
        return f"<Future {state}>"


class Task:
    __slots__ = ("gen", "worker", "name", "result", "waiting_on", "root")

    def __init__(self, gen: Generator, worker: "Worker", name: str, root: bool):
        self.gen = gen
        self.worker = worker
        self.name = name
        self.root = root
        self.result = Future(worker.cluster)
        self.waiting_on: Future | None = None

    def _wake_future(self, fut: Future):
        self.wake(fut.value, fut.exc)

    def wake(self, value=None, exc=None):
        cl = self.worker.cluster
        th = self.worker.thread_state
        if th.busy_until > cl.now or (th.ready and not cl._urgent):
            # the thread is occupied: queue behind whoever holds it
            th.ready.append((self._resume, (value, exc)))
            cl._kick(th, self.worker.origin)
            return
        self._resume((value, exc))

    def _resume(self, arg):
        value, exc = arg
        cl = self.worker.cluster
        cl._urgent = False
        self.waiting_on = None
        prev = cl._current
        cl._current = self
        if cl.trace is not None:
            cl.trace_event("resume", self.worker.ident, self.name)
        gen = self.gen
        try:
            while True:
                if exc is not None:
                    fut = gen.throw(exc)
                else:
                    fut = gen.send(value)
                if fut.done:
                    value, exc = fut.value, fut.exc
                    continue
                self.waiting_on = fut
                fut._waiters.append(self)
                break
        except StopIteration as stop:
            cl._current = prev
            self.result.resolve(stop.value)
            return
        except BaseException as err:  # noqa: BLE001 - forwarded to the awaiting task
            cl._current = prev
            if self.root and not self.result._waiters:
                cl._errors.append(err)
            self.result.fail(err)
            return
        cl._current = prev


class ThreadState:
    """One worker thread: a busy horizon plus a FIFO of work waiting for it."""

    __slots__ = ("busy_until", "cpu_time", "ready", "kicked")

    def __init__(self):
        self.busy_until = 0
        self.cpu_time = 0
        self.ready: deque = deque()
        self.kicked = False


class Request:
    """An RPC (or local handler) invocation; handlers may defer the reply."""

    DEFER = object()
    __slots__ = ("cluster", "node", "src", "payload", "_deliver", "replied")

    def __init__(self, cluster, node, src, payload, deliver):
        self.cluster = cluster
        self.node = node
        self.src = src
        self.payload = payload
        self._deliver = deliver
        self.replied = False

    def reply(self, value):
        if self.replied:
            raise ProtocolError("handler replied twice")
        self.replied = True
        self._deliver(value)


@dataclass
class SimReport:
    now: int
    round_trips: int
    events: int
    per_worker: dict = field(default_factory=dict)


class Worker:
    """Handle given to a task running on one (node, thread, coroutine) slot."""

    def __init__(self, cluster: "Cluster", node: int, thread: int, coro: int):
        self.cluster = cluster
        self.node = node
        self.thread = thread
        self.coro = coro
        self.ident = (node, thread, coro)
        self.origin = (node << 16) | (thread << 8) | coro
        self.thread_state = cluster._threads[node][thread]
        self.round_trips = 0
        self.stats: dict[str, Any] = {}
        self.rng = random.Random(f"{cluster.seed}:{node}:{thread}:{coro}")

    def __repr__(self):
        return f"Worker{self.ident}"

    @property
    def now(self) -> int:
        return self.cluster.now

    def post(self, dst: int, requests: list[VerbRequest]) -> Future:
        return self.cluster.post_batch(DoorbellBatch(self.node, dst, requests), self)

    def verbs(self, dst: int, requests: list[VerbRequest]) -> Future:
        """One-sided verbs to ``dst``; same-node targets skip the network."""
        if dst == self.node:
            return self.cluster.local_verbs(self, requests)
        return self.post(dst, requests)

    def rpc(self, dst: int, handler: str, payload=None) -> Future:
        return self.cluster.rpc_call(self, dst, handler, payload)

    def call(self, dst: int, handler: str, payload=None) -> Future:
        """RPC to a remote node, or a direct handler invocation when local."""
        if dst == self.node:
            return self.cluster.local_call(self, handler, payload)
        return self.cluster.rpc_call(self, dst, handler, payload)

    def sleep(self, delay: int) -> Future:
        cl = self.cluster
        fut = Future(cl)
        cl._at(cl.now + delay, self.origin, fut.resolve, None)
        return fut

    def compute(self, cost: int) -> Future:
        """Occupy this worker's thread for ``cost`` units."""
        cl = self.cluster
        th = self.thread_state
        start = max(cl.now, th.busy_until)
        th.busy_until = start + cost
        th.cpu_time += cost
        fut = Future(cl)
        # ordered ahead of everything else due at that instant: the thread
        # is still ours when the work ends
        cl._at(th.busy_until, -1, cl._finish_compute, fut)
        return fut

    def fork(self, gen: Generator, name: str = "child") -> Future:
        task = Task(gen, self, name, root=False)
        # the child runs up to its first suspension right away
        task.wake()
        return task.result

    def gather(self, futures: Iterable[Future]) -> Future:
        """Resolve once every future is done; value is a list of results,
        with exceptions in place of values for failed ones."""
        futures = list(futures)
        cl = self.cluster
        out = Future(cl)
        pending = [f for f in futures if not f.done]
        if not pending:
            out.done = True
            out.value = [f.exc if f.exc is not None else f.value for f in futures]
            return out
        count = [len(pending)]

        def one_done(_):
            count[0] -= 1
            if count[0] == 0:
                out.resolve([f.exc if f.exc is not None else f.value for f in futures])

        for f in pending:
            f.add_waiter(one_done)
        return out

    def wait_until(self, node: int, offset: int, predicate: Callable[[bytearray], bool]) -> Future:
        """Resolve when ``predicate(memory)`` holds after a write to the
        8-byte cell at ``offset`` on ``node`` (checked immediately too)."""
        cl = self.cluster
        fut = Future(cl)
        if predicate(cl.mem[node]):
            fut.done = True
            return fut

        def check(mem):
            if predicate(mem):
                fut.resolve(None)
                return True
            return False

        cl.watch(node, offset, check, label=f"{self.ident} waits {node}:{offset}")
        return fut


class Cluster:
    """A symmetric cluster driven by a single deterministic event loop."""

    def __init__(self, nodes: int, threads: int = 1, coroutines: int = 1,
                 latency: LatencyModel | None = None, seed: int = 0,
                 capacity: int = 1 << 31, trace: bool = False):
        if nodes < 1 or threads < 1 or coroutines < 1:
            raise ConfigError("cluster dimensions must be positive")
        if nodes > 255 or threads > 255 or coroutines > 255:
            raise ConfigError("node/thread/coroutine ids must fit in 8 bits")
        self.nodes = nodes
        self.threads = threads
        self.coroutines = coroutines
        self.latency = latency or LatencyModel()
        self.seed = seed
        self.capacity = capacity
        self.rng = random.Random(seed)
        self.now = 0
        self.round_trips = 0
        self.events = 0
        self.mem = [bytearray() for _ in range(nodes)]
        self._region_bases: list[list[int]] = [[] for _ in range(nodes)]
        self._regions: list[list[Region]] = [[] for _ in range(nodes)]
        self._handlers: list[dict[str, Callable]] = [{} for _ in range(nodes)]
        self._threads = [[ThreadState() for _ in range(threads)] for _ in range(nodes)]
        self._watchers: list[dict[int, list]] = [{} for _ in range(nodes)]
        self._heap: list = []
        self._seq = 0
        self._current: Task | None = None
        self._roots: list[Task] = []
        self._errors: list[BaseException] = []
        self._started = False
        self.workers = {(n, t, c): Worker(self, n, t, c)
                        for n in range(nodes) for t in range(threads) for c in range(coroutines)}
        self.trace: list | None = [] if trace else None
        self.verb_hooks: list[Callable] = []
        self._checked: set = set()
        self._urgent = False

    # -- scheduling -------------------------------------------------------
    def _at(self, time: int, origin: int, fn: Callable, arg):
        self._seq += 1
        heapq.heappush(self._heap, (time, origin, self._seq, fn, arg))

    def _finish_compute(self, fut: Future):
        self._urgent = True
        try:
            fut.resolve(None)
        finally:
            self._urgent = False

    def _kick(self, th: ThreadState, origin: int):
        if not th.kicked:
            th.kicked = True
            self._at(max(self.now, th.busy_until), origin, self._drain, (th, origin))

    def _drain(self, arg):
        th, origin = arg
        ready = th.ready
        while ready and th.busy_until <= self.now:
            fn, x = ready.popleft()
            fn(x)
        th.kicked = False
        if ready:
            self._kick(th, origin)

    def trace_event(self, kind: str, *info):
        if self.trace is not None:
            self.trace.append((self.now, kind) + info)

    def _delay(self, base: int) -> int:
        j = self.latency.jitter
        return base + self.rng.randint(0, j) if j else base

    # -- memory -----------------------------------------------------------
    def register_region(self, node: int, length: int) -> Region:
        if not 0 <= node < self.nodes:
            raise ConfigError(f"unknown node {node}")
        if length <= 0:
            raise ConfigError("region length must be positive")
        mem = self.mem[node]
        base = (len(mem) + 7) & ~7
        if base + length > self.capacity:
            raise ConfigError(f"node {node} registered memory capacity exceeded")
        mem.extend(bytes(base + length - len(mem)))
        region = Region(node, base, length)
        self._regions[node].append(region)
        self._region_bases[node].append(base)
        return region

    def _in_region(self, node: int, offset: int, length: int) -> bool:
        bases = self._region_bases[node]
        i = bisect.bisect_right(bases, offset) - 1
        if i < 0:
            return False
        r = self._regions[node][i]
        return offset + length <= r.base + r.len

    def watch(self, node: int, offset: int, callback: Callable[[bytearray], bool], label: str = ""):
        """Run ``callback(mem)`` on the node's event loop after each write
        touching the cell at ``offset``; it is dropped once it returns True."""
        self._watchers[node].setdefault(offset, []).append((callback, label))

    def _notify(self, node: int, offset: int, length: int):
        watchers = self._watchers[node]
        if not watchers:
            return
        if length == 8:
            hit = [offset] if offset in watchers else []
        else:
            end = offset + length
            hit = [o for o in watchers if offset <= o < end]
        for o in hit:
            self._at(self.now, node << 16, self._run_watchers, (node, o))

    def _run_watchers(self, arg):
        node, off = arg
        lst = self._watchers[node].get(off)
        if not lst:
            return
        mem = self.mem[node]
        keep = [(cb, label) for cb, label in list(lst) if not cb(mem)]
        # callbacks may register new watchers on the same cell
        cur = self._watchers[node].get(off, [])
        added = [w for w in cur if w not in lst]
        merged = keep + added
        if merged:
            self._watchers[node][off] = merged
        else:
            self._watchers[node].pop(off, None)

    def load_u64(self, node: int, offset: int) -> int:
        return U64.unpack_from(self.mem[node], offset)[0]

    def store_u64(self, node: int, offset: int, value: int):
        U64.pack_into(self.mem[node], offset, value & MASK64)
        self._notify(node, offset, 8)

    def store(self, node: int, offset: int, data: bytes):
        self.mem[node][offset:offset + len(data)] = data
        self._notify(node, offset, len(data))

    def local_cas(self, node: int, offset: int, expected: int, desired: int) -> int:
        mem = self.mem[node]
        old = U64.unpack_from(mem, offset)[0]
        if old == expected:
            U64.pack_into(mem, offset, desired & MASK64)
            self._notify(node, offset, 8)
        return old

    # -- one-sided verbs --------------------------------------------------
    def post_batch(self, batch: DoorbellBatch, worker: Worker) -> Future:
        """Post a doorbell batch; the future resolves with one result per
        request (READ: bytes, CAS/FAA: old value, WRITE: None)."""
        fut = Future(self)
        self.round_trips += 1
        worker.round_trips += 1
        lat = self.latency
        dst = batch.dst
        fault = self._check_verbs(dst, batch.requests)
        arrive = self.now + (self._delay(lat.one_sided_rt // 2) if lat.jitter else lat.one_sided_rt // 2)
        back = lat.one_sided_rt - lat.one_sided_rt // 2 + lat.per_verb_overhead * len(batch.requests)
        if self.trace is not None:
            self.trace_event("post", worker.ident, dst, tuple(r.kind.value for r in batch.requests))
        if fault is not None:
            self._at(arrive + back, worker.origin, fut.fail, fault)
            return fut
        self._at(arrive, worker.origin, self._apply_batch, (batch, worker, fut, back))
        return fut

    def _exec_verbs(self, dst: int, requests: list[VerbRequest]) -> list:
        mem = self.mem[dst]
        watched = self._watchers[dst]
        out = []
        for r in requests:
            k = r.kind
            off = r.offset
            if k is _READ:
                out.append(bytes(mem[off:off + r.length]))
            elif k is _WRITE:
                mem[off:off + r.length] = r.payload
                if watched:
                    self._notify(dst, off, r.length)
                out.append(None)
            elif k is _CAS:
                old = U64.unpack_from(mem, off)[0]
                if old == r.expected:
                    U64.pack_into(mem, off, r.value & MASK64)
                    if watched:
                        self._notify(dst, off, 8)
                out.append(old)
            else:
                old = U64.unpack_from(mem, off)[0]
                U64.pack_into(mem, off, (old + r.value) & MASK64)
                self._notify(dst, off, 8)
                out.append(old)
        return out

    def _check_verbs(self, dst: int, requests: list[VerbRequest]) -> VerbFault | None:
        if not 0 <= dst < self.nodes:
            return VerbFault(f"no such node {dst}")
        ok = self._checked
        for r in requests:
            k = r.kind
            if (k is _CAS or k is _FAA) and (r.length != 8 or r.offset % 8):
                return VerbFault(f"misaligned atomic at {dst}:{r.offset}")
            if k is _WRITE and len(r.payload) != r.length:
                return VerbFault("WRITE payload length mismatch")
            key = (dst, r.offset, r.length)
            if key in ok:
                continue
            if r.offset < 0 or not self._in_region(dst, r.offset, r.length):
                return VerbFault(f"verb target {dst}:{r.offset}+{r.length} outside registered memory")
            ok.add(key)
        return None

    def _apply_batch(self, arg):
        batch, worker, fut, back = arg
        out = self._exec_verbs(batch.dst, batch.requests)
        if self.trace is not None:
            self.trace_event("apply", worker.ident, batch.dst, tuple(r.kind.value for r in batch.requests))
        for hook in self.verb_hooks:
            hook(self, batch, worker, out)
        self._at(self.now + (self._delay(back) if self.latency.jitter else back), worker.origin,
                 fut.resolve, out)

    def local_verbs(self, worker: Worker, requests: list[VerbRequest]) -> Future:
        """Apply verb descriptors to the worker's own node memory directly.

        No network round trip; the thread is charged one local_op."""
        fault = self._check_verbs(worker.node, requests)
        if fault is not None:
            raise fault
        out = self._exec_verbs(worker.node, requests)
        if self.trace is not None:
            self.trace_event("local", worker.ident, tuple(r.kind.value for r in requests))
        done = worker.compute(self.latency.local_op)
        fut = Future(self)
        done.add_waiter(lambda _: fut.resolve(out))
        return fut

    # -- two-sided RPC ----------------------------------------------------
    def register_handler(self, node: int, name: str, handler: Callable[[Request], Any]):
        self._handlers[node][name] = handler

    def register_handler_all(self, name: str, handler: Callable[[Request], Any]):
        for n in range(self.nodes):
            self._handlers[n][name] = handler

    def rpc_call(self, worker: Worker, dst: int, name: str, payload=None) -> Future:
        if not 0 <= dst < self.nodes or name not in self._handlers[dst]:
            raise ProtocolError(f"no handler {name!r} registered on node {dst}")
        fut = Future(self)
        self.round_trips += 1
        worker.round_trips += 1
        lat = self.latency
        half = lat.rpc_rt // 2
        back = lat.rpc_rt - half

        def deliver(value):
            self._at(self.now + self._delay(back), worker.origin, fut.resolve, value)

        req = Request(self, dst, worker.ident, payload, deliver)
        th = self._threads[dst][worker.thread % self.threads]
        if self.trace is not None:
            self.trace_event("rpc", worker.ident, dst, name)
        self._at(self.now + self._delay(half), worker.origin, self._dispatch, (th, dst, name, req))
        return fut

    def _dispatch(self, arg):
        th = arg[0]
        if th.busy_until > self.now or th.ready:
            req = arg[3]
            th.ready.append((self._handle, arg))
            self._kick(th, req.src[0] << 16 | req.src[1] << 8 | req.src[2])
            return
        self._handle(arg)

    def _handle(self, arg):
        th, dst, name, req = arg
        th.busy_until = self.now + self.latency.local_op
        th.cpu_time += self.latency.local_op
        if self.trace is not None:
            self.trace_event("handler", dst, name, req.src)
        out = self._handlers[dst][name](req)
        if out is not Request.DEFER:
            req.reply(out)

    def local_call(self, worker: Worker, name: str, payload=None) -> Future:
        """Run a handler on the caller's own node without touching the network."""
        node = worker.node
        if name not in self._handlers[node]:
            raise ProtocolError(f"no handler {name!r} registered on node {node}")
        fut = Future(self)
        cost = self.latency.local_op
        th = worker.thread_state
        th.busy_until = max(self.now, th.busy_until) + cost
        th.cpu_time += cost
        ready = th.busy_until

        def deliver(value):
            self._at(max(self.now, ready), worker.origin, fut.resolve, value)

        req = Request(self, node, worker.ident, payload, deliver)
        out = self._handlers[node][name](req)
        if out is not Request.DEFER:
            req.reply(out)
        return fut

    # -- task management --------------------------------------------------
    def spawn(self, node: int, thread: int, coro: int, task: Callable[[Worker], Generator] | Generator,
              name: str = "") -> Task:
        if self._started:
            raise ConfigError("spawn after the simulation started")
        worker = self.workers[(node, thread, coro)]
        gen = task(worker) if callable(task) else task
        t = Task(gen, worker, name or f"task{worker.ident}", root=True)
        self._roots.append(t)
        self._at(0, worker.origin, lambda _: t.wake(), None)
        return t

    def run_until_quiescent(self, max_events: int | None = None) -> SimReport:
        self._started = True
        heap = self._heap
        pop = heapq.heappop
        n = 0
        while heap:
            time, _, _, fn, arg = pop(heap)
            self.now = time
            fn(arg)
            n += 1
            if self._errors:
                self.events += n
                raise self._errors[0]
            if max_events is not None and n >= max_events:
                break
        self.events += n
        blocked = [f"{t.name}@{t.worker.ident}" for t in self._roots if not t.result.done]
        if blocked and max_events is None:
            waits = [label for ws in self._watchers for lst in ws.values() for _, label in lst]
            raise SimDeadlock(blocked + [f"watch:{w}" for w in waits if w])
        for t in self._roots:
            if t.result.exc is not None:
                raise t.result.exc
        return SimReport(self.now, self.round_trips, self.events,
                         {w.ident: dict(w.stats) for w in self.workers.values() if w.stats})
