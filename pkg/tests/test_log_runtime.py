import os
import threading

import pytest

from taurusdb import log_format as lf
from taurusdb.errors import EngineStopped, LogFailure
from taurusdb.log_runtime import CommitTicket, LogManager, log_path


def _rec(tag: bytes, size: int = 40) -> bytes:
    return lf.encode_command(lf.EMPTY_LV, 1, tag.ljust(size, b"."))


def _mgr(tmp, **kw):
    plv = kw.pop("plv", [0])
    m = LogManager(kw.pop("log_id", 0), len(plv), kw.pop("workers", 2), tmp, plv, fsync=False, **kw)
    for j in range(m.p):
        m.register_worker(j)
    return m


def test_ready_lsn_waits_for_writer_in_progress(workdir):
    m = _mgr(workdir)
    end = m.write_log_buffer(0, _rec(b"a"))
    assert m.compute_ready_lsn() == end
    # worker 1 reserved [end, end + 50) but has not finished copying
    m.state[1] = (end, 0)
    m.log_lsn = end + 50
    assert m.compute_ready_lsn() == end
    m.state[1] = (end, end + 50)
    assert m.compute_ready_lsn() == end + 50
    m.close()


def test_flush_publishes_plv_and_file_matches(workdir):
    m = _mgr(workdir)
    recs = [_rec(b"r%d" % i) for i in range(5)]
    for i, r in enumerate(recs):
        m.write_log_buffer(i % 2, r)
    assert m.flush_tick() == sum(map(len, recs))
    assert m.plv[0] == m.flushed == m.log_lsn
    m.close()
    with open(log_path(workdir, 0), "rb") as f:
        assert f.read() == b"".join(recs)


def test_acks_follow_lsn_order_and_plv(workdir):
    plv = [0, 0]
    m = _mgr(workdir, plv=plv)
    r = _rec(b"x")
    e1 = m.write_log_buffer(0, r)
    e2 = m.write_log_buffer(1, r)
    # the first transaction also depends on log 1 reaching 500
    t1 = CommitTicket(1, 0, (e1, 500), e1 - len(r), e1)
    t2 = CommitTicket(2, 0, (e2, 0), e2 - len(r), e2)
    m.enqueue(t2)
    m.enqueue(t1)
    m.flush_tick()
    assert not t1.acked and not t2.acked
    plv[1] = 500
    assert m.drain() == 2
    assert t1.acked and t2.acked and t1.ack_plv == (e2, 500)
    m.close()


def test_read_only_ticket_waits_for_its_lv(workdir):
    plv = [0, 0]
    m = _mgr(workdir, plv=plv)
    t = CommitTicket(7, 0, (0, 30))
    assert t.read_only
    m.enqueue(t)
    m.drain()
    assert not t.acked
    plv[1] = 30
    m.drain()
    assert t.acked
    m.close()


def test_on_ack_callback_sees_ack_order(workdir):
    seen = []
    m = _mgr(workdir, on_ack=lambda t: seen.append(t.txn_id))
    r = _rec(b"y")
    for i in range(4):
        e = m.write_log_buffer(0, r)
        m.enqueue(CommitTicket(i, 0, (e,), e - len(r), e))
    m.flush_tick()
    assert seen == [0, 1, 2, 3]
    m.close()


def test_ring_wraps_and_stays_contiguous(workdir):
    m = _mgr(workdir, buffer_size=256)
    recs = [_rec(b"w%d" % i, 30 + i % 7) for i in range(60)]
    for i, r in enumerate(recs):
        m.write_log_buffer(i % 2, r)
        if i % 3 == 2:
            m.flush_tick()
    m.flush_tick()
    m.close()
    with open(log_path(workdir, 0), "rb") as f:
        assert f.read() == b"".join(recs)


def test_concurrent_writers_produce_whole_frames(workdir):
    m = _mgr(workdir, workers=4, buffer_size=4096)
    m.start()

    def writer(j):
        for i in range(300):
            m.write_log_buffer(j, _rec(b"%d-%d" % (j, i)))

    ts = [threading.Thread(target=writer, args=(j,)) for j in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    m.stop_thread()
    m.flush_tick()
    m.close()
    with open(log_path(workdir, 0), "rb") as f:
        buf = f.read()
    assert lf.intact_prefix(buf) == len(buf)
    assert len(list(lf.iter_records(buf, 1, {}))) == 1200


def test_anchors_every_rho_bytes(workdir):
    plv = [0, 0]
    m = _mgr(workdir, plv=plv, rho=200)
    r = _rec(b"z")
    for i in range(20):
        plv[1] = 10 * i
        m.write_log_buffer(0, r)
        m.flush_tick()
    m.write_final_anchor()
    m.flush_tick()
    m.close()
    with open(log_path(workdir, 0), "rb") as f:
        buf = f.read()
    recs = list(lf.iter_records(buf, 2, {}))
    anchors = [x for x in recs if x.kind == lf.ANCHOR]
    assert len(anchors) == m.anchors >= 4
    assert recs[-1].kind == lf.ANCHOR and recs[-1].plv[1] == 190
    starts = [a.start for a in anchors[:-1]]
    assert all(b - a >= 200 for a, b in zip(starts, starts[1:]))
    # anchors carry PLV snapshots, so they never go backwards
    for a, b in zip(anchors, anchors[1:]):
        assert all(x <= y for x, y in zip(a.plv, b.plv))
    assert m.lplv == tuple(recs[-1].plv)


def test_write_failure_is_fail_stop(workdir):
    m = _mgr(workdir)
    e = m.write_log_buffer(0, _rec(b"f"))
    t = CommitTicket(1, 0, (e,), 0, e)
    m.enqueue(t)
    os.close(m.fd)
    m.fd = os.open(os.devnull, os.O_RDONLY)
    m.flush_tick()
    assert m.failed and not t.acked and m.plv[0] == 0
    with pytest.raises(LogFailure):
        m.write_log_buffer(0, _rec(b"g"))
    m.close()


def test_full_buffer_during_shutdown(workdir):
    m = _mgr(workdir, buffer_size=128)
    m.write_log_buffer(0, _rec(b"a", 100))
    m._stopping = True
    with pytest.raises(EngineStopped):
        m.write_log_buffer(0, _rec(b"b", 100))
    m.close()


def test_oversized_record_rejected(workdir):
    m = _mgr(workdir, buffer_size=64)
    with pytest.raises(ValueError):
        m.write_log_buffer(0, _rec(b"big", 100))
    m.close()
