"""Deterministic transaction generators and the logic they run.

Every generator is a pure function of its config and seed.  Transaction
logic lives in :data:`LOGIC`: ``fn(values, spec) -> {ws key: new record}``
where ``values`` maps every accessed (table, key) to its current record.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Callable

from .store import Table
from .txncore import TxnSpec

_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")

LOGIC: dict[str, Callable] = {}


def logic(name):
    def deco(fn):
        LOGIC[name] = fn
        return fn
    return deco


def _workers(shape):
    # node varies fastest so consecutive transactions land on different nodes
    # and every node gets an equal share whenever the count allows it
    nodes, threads, coros = shape
    return [(n, t, c) for c in range(coros) for t in range(threads) for n in range(nodes)]


# -- YCSB ----------------------------------------------------------------------

@dataclass
class YcsbConfig:
    record_len: int = 64
    ops_per_txn: int = 10
    write_ratio: float = 0.2
    exec_time: int = 5
    hot_area_fraction: float = 0.001
    hot_access_prob: float = 0.1
    hot_keys: int | None = None
    records_per_thread: int = 4000

    def __post_init__(self):
        for name in ("write_ratio", "hot_area_fraction", "hot_access_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.ops_per_txn < 1:
            raise ValueError("ops_per_txn must be at least 1")
        if self.record_len < 8:
            raise ValueError("record_len must be at least 8 bytes")

    def table_size(self, shape) -> int:
        return max(self.ops_per_txn * 2, self.records_per_thread * shape[0] * shape[1])

    def hot_size(self, shape) -> int:
        if self.hot_keys is not None:
            return max(1, min(self.hot_keys, self.table_size(shape)))
        return max(1, round(self.table_size(shape) * self.hot_area_fraction))


def ycsb_tables(cfg: YcsbConfig, shape) -> list[Table]:
    n = shape[0]
    size = cfg.table_size(shape)
    R = cfg.record_len

    def init(k):
        return _U64.pack(k) + bytes(R - 8)

    return [Table("ycsb", R, range(size), lambda k: k % n, init)]


def gen_ycsb(cfg: YcsbConfig, seed: int, n: int, shape=(1, 1, 1)) -> list[TxnSpec]:
    rng = random.Random(f"ycsb:{seed}")
    size = cfg.table_size(shape)
    hot = cfg.hot_size(shape)
    cold = size - hot
    ops = min(cfg.ops_per_txn, size)
    workers = _workers(shape)
    out = []
    for i in range(n):
        chosen: dict[int, bool] = {}
        while len(chosen) < ops:
            if cold == 0 or (rng.random() < cfg.hot_access_prob and len(chosen) < hot):
                k = rng.randrange(hot)
            else:
                k = hot + rng.randrange(cold)
            if k in chosen:
                continue
            chosen[k] = rng.random() < cfg.write_ratio
        rs = [("ycsb", k) for k, wr in chosen.items() if not wr]
        ws = [("ycsb", k) for k, wr in chosen.items() if wr]
        out.append(TxnSpec(i + 1, rs, ws, "ycsb", (), workers[i % len(workers)]))
    return out


@logic("ycsb")
def _ycsb_logic(values, spec):
    h = hashlib.blake2b(_U64.pack(spec.txn_id), digest_size=32)
    for k in sorted(values):
        h.update(f"{k[0]}:{k[1]}".encode())
        h.update(values[k])
    base = h.digest()
    out = {}
    for t, k in spec.ws:
        n = len(values[(t, k)])
        out[(t, k)] = hashlib.shake_128(base + _U64.pack(k)).digest(n)
    return out


# -- SmallBank ---------------------------------------------------------------

SMALLBANK_TYPES = ("sb_balance", "sb_deposit_checking", "sb_transact_savings",
                   "sb_amalgamate", "sb_write_check", "sb_send_payment")


@dataclass
class SmallBankConfig:
    accounts_per_thread: int = 1000
    exec_time: int = 1
    hot_accounts: int = 0
    hot_access_prob: float = 0.0
    mix: tuple = (1, 1, 1, 1, 1, 1)

    def accounts(self, shape) -> int:
        return max(2, self.accounts_per_thread * shape[0] * shape[1])


def smallbank_tables(cfg: SmallBankConfig, shape) -> list[Table]:
    n = shape[0]
    a = cfg.accounts(shape)

    def init(k):
        return _I64.pack(10000 + k % 97)

    return [Table("savings", 8, range(a), lambda k: k % n, init),
            Table("checking", 8, range(a), lambda k: k % n, init)]


def gen_smallbank(cfg: SmallBankConfig, seed: int, n: int, shape=(1, 1, 1)) -> list[TxnSpec]:
    rng = random.Random(f"smallbank:{seed}")
    accts = cfg.accounts(shape)
    hot = min(cfg.hot_accounts, accts)
    workers = _workers(shape)

    def account():
        if hot and rng.random() < cfg.hot_access_prob:
            return rng.randrange(hot)
        return rng.randrange(accts)

    out = []
    for i in range(n):
        kind = rng.choices(SMALLBANK_TYPES, weights=cfg.mix)[0]
        a = account()
        b = account()
        while b == a:
            b = rng.randrange(accts)
        amt = rng.randint(1, 100)
        sav, chk = ("savings", a), ("checking", a)
        if kind == "sb_balance":
            rs, ws, args = [sav, chk], [], ()
        elif kind == "sb_deposit_checking":
            rs, ws, args = [], [chk], (amt,)
        elif kind == "sb_transact_savings":
            rs, ws, args = [], [sav], (amt,)
        elif kind == "sb_amalgamate":
            rs, ws, args = [], [sav, chk, ("checking", b)], ()
        elif kind == "sb_write_check":
            rs, ws, args = [sav], [chk], (amt,)
        else:
            rs, ws, args = [], [chk, ("checking", b)], (amt,)
        out.append(TxnSpec(i + 1, rs, ws, kind, args, workers[i % len(workers)]))
    return out


def _bal(values, key) -> int:
    return _I64.unpack(values[key])[0]


@logic("sb_balance")
def _sb_balance(values, spec):
    return {}


@logic("sb_deposit_checking")
def _sb_deposit(values, spec):
    (k,) = spec.ws
    return {k: _I64.pack(_bal(values, k) + spec.args[0])}


@logic("sb_transact_savings")
def _sb_transact(values, spec):
    (k,) = spec.ws
    return {k: _I64.pack(_bal(values, k) + spec.args[0])}


@logic("sb_amalgamate")
def _sb_amalgamate(values, spec):
    sav, chk, dst = spec.ws
    total = _bal(values, sav) + _bal(values, chk)
    return {sav: _I64.pack(0), chk: _I64.pack(0), dst: _I64.pack(_bal(values, dst) + total)}


@logic("sb_write_check")
def _sb_write_check(values, spec):
    (sav,) = spec.rs
    (chk,) = spec.ws
    amt = spec.args[0]
    if _bal(values, sav) + _bal(values, chk) < amt:
        amt += 1  # overdraft penalty
    return {chk: _I64.pack(_bal(values, chk) - amt)}


@logic("sb_send_payment")
def _sb_send_payment(values, spec):
    src, dst = spec.ws
    amt = spec.args[0]
    return {src: _I64.pack(_bal(values, src) - amt), dst: _I64.pack(_bal(values, dst) + amt)}


# -- TPC-C new-order --------------------------------------------------------------

@dataclass
class TpccConfig:
    warehouses_per_node: int = 0  # 0: one per worker thread
    districts: int = 10
    customers_per_district: int = 30
    items: int = 1000
    min_lines: int = 5
    max_lines: int = 15
    remote_prob: float = 0.1
    exec_time: int = 2

    def warehouses(self, shape) -> int:
        per = self.warehouses_per_node or shape[1]
        return per * shape[0]


def tpcc_tables(cfg: TpccConfig, shape) -> list[Table]:
    n = shape[0]
    W = cfg.warehouses(shape)
    D, C, I = cfg.districts, cfg.customers_per_district, cfg.items

    def rec(*vals):
        return b"".join(_U64.pack(v) for v in vals).ljust(64, b"\0")

    return [
        Table("warehouse", 64, range(W), lambda k: k % n, lambda k: rec(500 + k % 1500)),
        Table("district", 64, range(W * D), lambda k: (k // D) % n, lambda k: rec(1, 0)),
        Table("customer", 64, range(W * D * C), lambda k: (k // (D * C)) % n,
              lambda k: rec(k % 5000)),
        Table("stock", 64, range(W * I), lambda k: (k // I) % n,
              lambda k: rec(10 + k % 91, 0, 0, 0)),
    ]


def gen_tpcc_neworder(cfg: TpccConfig, seed: int, n: int, shape=(1, 1, 1)) -> list[TxnSpec]:
    rng = random.Random(f"tpcc:{seed}")
    W = cfg.warehouses(shape)
    D, C, I = cfg.districts, cfg.customers_per_district, cfg.items
    workers = _workers(shape)
    out = []
    for i in range(n):
        w = rng.randrange(W)
        d = rng.randrange(D)
        c = rng.randrange(C)
        lines = rng.randint(cfg.min_lines, min(cfg.max_lines, I))
        items = rng.sample(range(I), lines)
        ws = [("district", w * D + d)]
        qtys = []
        for item in items:
            sw = w
            if W > 1 and rng.random() < cfg.remote_prob:
                sw = rng.randrange(W - 1)
                sw += sw >= w
            ws.append(("stock", sw * I + item))
            qtys.append(rng.randint(1, 10))
        rs = [("warehouse", w), ("customer", (w * D + d) * C + c)]
        out.append(TxnSpec(i + 1, rs, ws, "tpcc_neworder", (w, I, *qtys), workers[i % len(workers)]))
    return out


def _u64s(rec: bytes, n: int) -> list[int]:
    return [_U64.unpack_from(rec, 8 * i)[0] for i in range(n)]


@logic("tpcc_neworder")
def _tpcc_neworder(values, spec):
    w, items = spec.args[0], spec.args[1]
    qtys = spec.args[2:]
    (tax,) = _u64s(values[spec.rs[0]], 1)
    (disc,) = _u64s(values[spec.rs[1]], 1)
    dkey = spec.ws[0]
    out = {}
    amount = 0
    for (t, k), q in zip(spec.ws[1:], qtys):
        qty, ytd, cnt, remote = _u64s(values[(t, k)], 4)
        qty = qty - q if qty - q >= 10 else qty - q + 91
        amount += q * (100 + (k % items) % 900)
        remote += (k // items) != w
        out[(t, k)] = b"".join(_U64.pack(v) for v in (qty, ytd + q, cnt + 1, remote)).ljust(64, b"\0")
    next_o, dytd = _u64s(values[dkey], 2)
    total = amount * (10000 - disc) * (10000 + tax) // 100000000
    out[dkey] = (_U64.pack(next_o + 1) + _U64.pack(dytd + total)).ljust(64, b"\0")
    return out


# -- registry ------------------------------------------------------------------

@dataclass
class Workload:
    name: str
    tables: list
    specs: list
    exec_time: int
    extra: dict = field(default_factory=dict)


def build_workload(name: str, shape, txns: int, seed: int, cfg=None) -> Workload:
    if name == "ycsb":
        cfg = cfg or YcsbConfig()
        return Workload(name, ycsb_tables(cfg, shape), gen_ycsb(cfg, seed, txns, shape), cfg.exec_time)
    if name == "smallbank":
        cfg = cfg or SmallBankConfig()
        return Workload(name, smallbank_tables(cfg, shape), gen_smallbank(cfg, seed, txns, shape),
                        cfg.exec_time)
    if name == "tpcc":
        cfg = cfg or TpccConfig()
        return Workload(name, tpcc_tables(cfg, shape), gen_tpcc_neworder(cfg, seed, txns, shape),
                        cfg.exec_time)
    raise ValueError(f"unknown workload {name!r}")
