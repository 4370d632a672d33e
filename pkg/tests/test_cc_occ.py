import threading

import pytest

from taurusdb.cc_occ import OptimisticCC
from taurusdb.errors import TxnAborted
from taurusdb.log_runtime import LogManager
from taurusdb.storage import Database, LockTable, TableSpec, gkey


def _env(workdir, workers=2, body="data"):
    db = Database([TableSpec(0, "t", 8)])
    db[0].load([(k, k.to_bytes(8, "little")) for k in range(16)])
    plv = [0, 0]
    logs = [LogManager(i, 2, workers, workdir, plv, fsync=False) for i in range(2)]
    for m in logs:
        for j in range(workers):
            m.register_worker(j)
    locks = LockTable(2, plv, delta=None)
    return db, locks, logs, OptimisticCC(db, locks, logs, body=body)


def test_validation_aborts_stale_reader(workdir):
    db, locks, logs, cc = _env(workdir)
    a, b = cc.begin(1, 0, 0, 0), cc.begin(2, 1, 0, 1)
    cc.read(a, 0, 1)
    cc.write(b, 0, 1, (99).to_bytes(8, "little"))
    cc.commit(b)
    cc.write(a, 0, 2, b"\0" * 8)
    with pytest.raises(TxnAborted):
        cc.commit(a)
    meta = locks.get(gkey(0, 1))
    assert meta.pending_readers == 0 and meta.pin_count == 0 and meta.owner is None


def test_writes_are_buffered_until_commit(workdir):
    db, locks, logs, cc = _env(workdir)
    t = cc.begin(1, 0, 0, 0)
    cc.write(t, 0, 3, b"x" * 8)
    assert db[0].read_row(3) == (3).to_bytes(8, "little")
    assert cc.read(t, 0, 3) == b"x" * 8
    cc.commit(t)
    assert db[0].read_row(3) == b"x" * 8
    assert locks.get(gkey(0, 3)).version == 1


def test_aborted_readlv_inflation_persists(workdir):
    db, locks, logs, cc = _env(workdir)
    w = cc.begin(1, 0, 0, 1)
    cc.write(w, 0, 5, b"5" * 8)
    kw = cc.commit(w)
    t = cc.begin(2, 0, 0, 0)
    cc.read(t, 0, 5)
    cc.read(t, 0, 6)
    # force validation failure on key 6 after readLV has been raised
    locks.get(gkey(0, 6)).version += 1
    with pytest.raises(TxnAborted):
        cc.commit(t)
    # the raise is conservative and stays: it never undercounts a dependency
    assert locks.get(gkey(0, 6)).read_lv[1] == kw.end


def test_pending_reader_blocks_writer_lock(workdir):
    db, locks, logs, cc = _env(workdir)
    meta = locks.get_or_insert_meta(gkey(0, 7))
    meta.pending_readers = 1
    t = cc.begin(1, 0, 0, 0)
    cc.write(t, 0, 7, b"7" * 8)
    with pytest.raises(TxnAborted):
        cc.commit(t)
    assert meta.owner is None


def test_writer_follows_earlier_reader(workdir):
    db, locks, logs, cc = _env(workdir)
    r = cc.begin(1, 0, 0, 1)
    cc.read(r, 0, 8)
    cc.write(r, 0, 9, b"9" * 8)
    kr = cc.commit(r)
    w = cc.begin(2, 0, 1, 0)
    cc.write(w, 0, 8, b"8" * 8)
    kw = cc.commit(w)
    assert kw.lv[1] >= kr.end


def test_insert_delete_and_duplicate(workdir):
    db, locks, logs, cc = _env(workdir)
    t = cc.begin(1, 0, 0, 0)
    cc.insert_row(t, 0, 100, b"n" * 8)
    cc.delete_row(t, 0, 0)
    cc.commit(t)
    assert db[0].read_row(100) == b"n" * 8 and 0 not in db[0]
    u = cc.begin(2, 0, 0, 0)
    with pytest.raises(TxnAborted):
        cc.insert_row(u, 0, 100, b"m" * 8)
    v = cc.begin(3, 0, 0, 0)
    with pytest.raises(TxnAborted):
        cc.delete_row(v, 0, 0)


def test_racing_inserts_commit_once(workdir):
    db, locks, logs, cc = _env(workdir)
    a, b = cc.begin(1, 0, 0, 0), cc.begin(2, 1, 0, 1)
    cc.insert_row(a, 0, 200, b"a" * 8)
    cc.insert_row(b, 0, 200, b"b" * 8)
    cc.commit(a)
    with pytest.raises(TxnAborted):
        cc.commit(b)
    assert db[0].read_row(200) == b"a" * 8


def test_concurrent_increments_are_lossless(workdir):
    db, locks, logs, cc = _env(workdir, workers=4, body="command")
    for m in logs:
        m.start()
    per_thread = 300

    def worker(w):
        seq = 0
        done = 0
        while done < per_thread:
            seq += 1
            t = cc.begin((w << 32) | seq, w, w % 4, w % 2, (1, b""))
            try:
                k = 0 if seq % 2 else 1
                cur = int.from_bytes(cc.read(t, 0, k), "little")
                cc.write(t, 0, k, (cur + 1).to_bytes(8, "little"))
                cc.commit(t)
                done += 1
            except TxnAborted:
                pass

    ts = [threading.Thread(target=worker, args=(w,)) for w in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for m in logs:
        m.close()
    total = sum(int.from_bytes(db[0].read_row(k), "little") for k in (0, 1))
    assert total == 0 + 1 + 4 * per_thread
    for k in (0, 1):
        m = locks.get(gkey(0, k))
        assert m.owner is None and m.pending_readers == 0 and m.pin_count == 0
