import pytest

from conftest import Bench
from rdmacc.txncore import make_timestamp

OLD = make_timestamp(0, 5, 0, 0)
YOUNG = make_timestamp(10 ** 6, 1, 0, 0)


@pytest.mark.parametrize("proto", ["nowait", "waitdie"])
def test_onesided_read_only_round_trips(proto):
    b = Bench(proto, replicas=1)
    # one CAS+READ doorbell, then the release write
    assert b.once(rs=[1]) == 2
    assert len(b.stats.commits) == 1 and b.lock(1) == 0


@pytest.mark.parametrize("proto", ["nowait", "waitdie"])
@pytest.mark.parametrize("onesided", [True, False])
def test_write_commits_and_unlocks(proto, onesided):
    b = Bench(proto, onesided=onesided, replicas=1)
    b.once(rs=[1], ws=[3])
    assert b.value(3) == 1
    assert b.lock(1) == 0 and b.lock(3) == 0
    assert b.db.read_tuple("t", 3).wts == b.stats.commits[0].commit_key


def test_commit_is_one_round_trip_per_remote_tuple():
    b = Bench("nowait", replicas=1)
    # Fetch on 3 (remote) and 0 (local), then Commit: write+unlock on 3
    assert b.once(rs=[0], ws=[3]) == 2


@pytest.mark.parametrize("onesided", [True, False])
def test_nowait_held_lock_aborts(onesided):
    b = Bench("nowait", onesided=onesided)
    b.set_lock(1, OLD)
    b.once(rs=[3], ws=[1])
    assert b.stats.aborts == 1 and b.stats.gave_up == 1
    assert b.stats.abort_stages == {"Fetch": 1}
    assert b.value(1) == 0


@pytest.mark.parametrize("onesided", [True, False])
def test_abort_releases_every_lock(onesided):
    b = Bench("nowait", onesided=onesided, keys=8)
    b.set_lock(5, OLD)
    b.once(rs=[1, 3], ws=[5, 7])
    assert b.stats.gave_up == 1
    assert [b.lock(k) for k in (1, 3, 7)] == [0, 0, 0]
    assert b.lock(5) == OLD


@pytest.mark.parametrize("onesided", [True, False])
def test_waitdie_younger_dies(onesided):
    b = Bench("waitdie", onesided=onesided)
    b.set_lock(1, OLD)
    b.once(ws=[1])
    assert b.stats.abort_reasons == {"die": 1}
    assert b.stats.wait_events == []


@pytest.mark.parametrize("onesided", [True, False])
def test_waitdie_older_waits_for_release(onesided):
    b = Bench("waitdie", onesided=onesided)
    b.set_lock(1, YOUNG)
    node, off = b.db.locate("t", 1)

    def holder(w):
        yield w.sleep(500)
        b.cl.store_u64(node, off, 0)

    b.cl.spawn(1, 0, 1, holder)
    b.once(ws=[1])
    assert b.stats.aborts == 0 and len(b.stats.commits) == 1
    assert b.stats.latencies[0] >= 500
    assert all(waiter < held for waiter, held in b.stats.wait_events)
    assert b.stats.wait_events


def test_waitdie_keeps_timestamp_across_retries():
    b = Bench("waitdie", onesided=False, coros=2)
    for c in range(2):
        b.spawn((0, 0, c), [b.spec(ws=[1, 3]) for _ in range(10)])
        b.spawn((1, 0, c), [b.spec(ws=[3, 1]) for _ in range(10)])
    b.run()
    assert len(b.stats.commits) == 40
    assert b.value(1) > 0 and b.lock(1) == 0 and b.lock(3) == 0
    assert all(waiter < held for waiter, held in b.stats.wait_events)
