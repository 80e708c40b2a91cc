"""Offline serializability oracle.

The dependency graph is built from exact version tags: a read records the
wts of the version it saw, a write the wts it installed.  Per key, versions
are ordered by wts; wts 0 is the initial load.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import networkx as nx

from .txncore import CommitRecord, TxnSpec
from .workload import LOGIC


@dataclass
class Ok:
    order: list  # txn ids in a serial order

    def __bool__(self):
        return True


@dataclass
class CycleWitness:
    cycle: list  # [(txn, txn, edge kind, key), ...]
    reason: str = "cycle"

    def __bool__(self):
        return False


def build_graph(history: list[CommitRecord]):
    """Direct serialization graph, or a witness if a read names a version
    nobody committed."""
    g = nx.DiGraph()
    by_id = {}
    writers: dict = defaultdict(dict)  # key -> wts -> txn
    for rec in history:
        g.add_node(rec.txn_id)
        by_id[rec.txn_id] = rec
        for k, w in rec.writes.items():
            if w in writers[k] or w == 0:
                return None, CycleWitness([(rec.txn_id, writers[k].get(w), "dup-version", k)],
                                          "duplicate version")
            writers[k][w] = rec.txn_id
    order = {k: sorted(v) for k, v in writers.items()}

    def add(a, b, kind, key):
        if a == b or a is None:
            return
        if not g.has_edge(a, b):
            g.add_edge(a, b, kind=kind, key=key)

    for k, vs in order.items():
        for a, b in zip(vs, vs[1:]):
            add(writers[k][a], writers[k][b], "ww", k)
    for rec in history:
        for k, w in rec.reads.items():
            vs = order.get(k, [])
            if w != 0 and w not in writers[k]:
                return None, CycleWitness([(rec.txn_id, None, "unknown-version", k)],
                                          f"read of uncommitted version {k}@{w}")
            if w != 0:
                add(writers[k][w], rec.txn_id, "wr", k)
            # the next version after the one read
            nxt = next((v for v in vs if v > w), None)
            if nxt is not None:
                add(rec.txn_id, writers[k][nxt], "rw", k)
    return g, by_id


def check_conflict_serializable(history: list[CommitRecord]):
    """Topological order (ties by commit key) or a shortest cycle witness."""
    g, extra = build_graph(history)
    if g is None:
        return extra
    by_id = extra
    try:
        order = list(nx.lexicographical_topological_sort(
            g, key=lambda t: (_sortable(by_id[t].commit_key), t)))
        return Ok(order)
    except nx.NetworkXUnfeasible:
        pass
    return CycleWitness(_shortest_cycle(g))


def _sortable(key):
    return key if isinstance(key, tuple) else (key,)


def _shortest_cycle(g) -> list:
    best = None
    for comp in nx.strongly_connected_components(g):
        if len(comp) < 2:
            continue
        sub = g.subgraph(comp)
        for a, b in sorted(sub.edges()):
            path = nx.shortest_path(sub, b, a)
            if best is None or len(path) < len(best):
                best = path
                if len(best) == 2:
                    break
    cyc = best + [best[0]]
    return [(u, v, g.edges[u, v]["kind"], g.edges[u, v]["key"]) for u, v in zip(cyc, cyc[1:])]


def replay_serial(order: list, specs: dict, initial: dict) -> dict:
    """Run each transaction's logic one after another over ``initial``."""
    state = dict(initial)
    for tid in order:
        spec: TxnSpec = specs[tid]
        keys = list(dict.fromkeys(list(spec.rs) + list(spec.ws)))
        out = LOGIC[spec.logic]({k: state[k] for k in keys}, spec)
        for k in spec.ws:
            state[k] = out[k]
    return state


def format_history(history: list[CommitRecord]) -> str:
    """One line per commit: txn_id,commit_key,reads(t:k@wts;...),writes(t:k@wts;...)"""
    lines = []
    for rec in history:
        ck = rec.commit_key
        ck = ":".join(str(x) for x in ck) if isinstance(ck, tuple) else str(ck)
        reads = ";".join(f"{t}:{k}@{w}" for (t, k), w in sorted(rec.reads.items()))
        writes = ";".join(f"{t}:{k}@{w}" for (t, k), w in sorted(rec.writes.items()))
        lines.append(f"{rec.txn_id},{ck},reads({reads}),writes({writes})")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_history(text: str) -> list[CommitRecord]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        tid, ck, rest = line.split(",", 2)
        reads_s, writes_s = rest.split("),writes(")
        reads_s = reads_s[len("reads("):]
        writes_s = writes_s[:-1]
        parts = [int(x) for x in ck.split(":")]
        out.append(CommitRecord(int(tid), tuple(parts) if len(parts) > 1 else parts[0],
                                _parse_tags(reads_s), _parse_tags(writes_s)))
    return out


def _parse_tags(s: str) -> dict:
    out = {}
    for item in filter(None, s.split(";")):
        tk, w = item.rsplit("@", 1)
        t, k = tk.rsplit(":", 1)
        out[(t, int(k))] = int(w)
    return out
