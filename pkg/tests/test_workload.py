import struct
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdmacc.workload import (LOGIC, SmallBankConfig, TpccConfig, YcsbConfig, build_workload,
                             gen_smallbank, gen_tpcc_neworder, gen_ycsb)

I64 = struct.Struct("<q")
SHAPE = (4, 2, 4)


def test_ycsb_mean_writes():
    specs = gen_ycsb(YcsbConfig(), 1, 5000, SHAPE)
    mean = sum(len(s.ws) for s in specs) / len(specs)
    assert abs(mean - 2.0) <= 0.1
    assert all(len(s.rs) + len(s.ws) == 10 for s in specs)
    assert all(len(set(s.rs) | set(s.ws)) == 10 for s in specs)


def test_ycsb_hot_share():
    cfg = YcsbConfig(hot_access_prob=0.9, hot_keys=64)
    specs = gen_ycsb(cfg, 3, 2000, SHAPE)
    keys = [k for s in specs for _, k in s.rs + s.ws]
    assert sum(k < 64 for k in keys) / len(keys) >= 0.85


def test_ycsb_default_hot_area():
    cfg = YcsbConfig()
    assert cfg.table_size(SHAPE) == 4000 * 8
    assert cfg.hot_size(SHAPE) == 32


def test_ycsb_spreads_over_workers():
    specs = gen_ycsb(YcsbConfig(), 1, 320, SHAPE)
    assert Counter(s.arrival for s in specs) == {w: 10 for w in Counter(s.arrival for s in specs)}
    assert len({s.arrival for s in specs}) == 32


@pytest.mark.parametrize("kw", [{"write_ratio": 1.5}, {"hot_access_prob": -0.1}, {"ops_per_txn": 0},
                                {"record_len": 4}])
def test_ycsb_bad_config(kw):
    with pytest.raises(ValueError):
        YcsbConfig(**kw)


@pytest.mark.parametrize("name", ["ycsb", "smallbank", "tpcc"])
def test_same_seed_same_specs(name):
    a = build_workload(name, SHAPE, 200, 7).specs
    b = build_workload(name, SHAPE, 200, 7).specs
    c = build_workload(name, SHAPE, 200, 8).specs
    assert a == b
    assert a != c


def test_unknown_workload():
    with pytest.raises(ValueError):
        build_workload("nope", SHAPE, 1, 1)


def test_smallbank_shapes():
    specs = gen_smallbank(SmallBankConfig(), 2, 3000, SHAPE)
    kinds = Counter(s.logic for s in specs)
    assert len(kinds) == 6
    for s in specs:
        keys = s.rs + s.ws
        assert 1 <= len(keys) <= 3 and len(set(keys)) == len(keys)
        if s.logic == "sb_balance":
            assert s.ws == []


def _vals(keys, amounts):
    return {k: I64.pack(a) for k, a in zip(keys, amounts)}


money = st.integers(-10 ** 9, 10 ** 9)


@given(money, money, money)
def test_amalgamate_conserves_money(a, b, c):
    spec = next(s for s in gen_smallbank(SmallBankConfig(), 1, 500) if s.logic == "sb_amalgamate")
    out = LOGIC["sb_amalgamate"](_vals(spec.ws, [a, b, c]), spec)
    assert sum(I64.unpack(v)[0] for v in out.values()) == a + b + c


@given(money, money)
def test_send_payment_conserves_money(a, b):
    spec = next(s for s in gen_smallbank(SmallBankConfig(), 1, 500) if s.logic == "sb_send_payment")
    out = LOGIC["sb_send_payment"](_vals(spec.ws, [a, b]), spec)
    assert sum(I64.unpack(v)[0] for v in out.values()) == a + b


def test_tpcc_neworder_lines():
    cfg = TpccConfig()
    specs = gen_tpcc_neworder(cfg, 1, 2000, SHAPE)
    lines = [len(s.ws) - 1 for s in specs]
    assert min(lines) >= 5 and max(lines) <= 15
    assert set(lines) == set(range(5, 16))
    for s in specs:
        assert [t for t, _ in s.rs] == ["warehouse", "customer"]
        assert s.ws[0][0] == "district"
        assert all(t == "stock" for t, _ in s.ws[1:])


def test_tpcc_remote_share():
    cfg = TpccConfig()
    specs = gen_tpcc_neworder(cfg, 4, 3000, SHAPE)
    remote = total = 0
    for s in specs:
        w = s.args[0]
        for _, k in s.ws[1:]:
            total += 1
            remote += k // cfg.items != w
    assert abs(remote / total - cfg.remote_prob) < 0.02


def test_ycsb_logic_is_deterministic_and_sized():
    spec = gen_ycsb(YcsbConfig(), 1, 1)[0]
    values = {k: bytes(64) for k in spec.rs + spec.ws}
    out1 = LOGIC["ycsb"](values, spec)
    out2 = LOGIC["ycsb"](values, spec)
    assert out1 == out2
    assert set(out1) == set(spec.ws) and all(len(v) == 64 for v in out1.values())
