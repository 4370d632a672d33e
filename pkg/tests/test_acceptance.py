"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion summary is
printed at the end of the session.
"""

import graphlib
import os
import random
import shutil
import sys
import time

import pytest

from taurusdb import lsn_vector as lvm
from taurusdb.bench import harness, oracle
from taurusdb.bench.tracker import ConflictTracker
from taurusdb.bench.workload import WorkloadSpec
from taurusdb.cc_2pl import TwoPhaseLocking
from taurusdb.engine import EngineConfig
from taurusdb.errors import TxnAborted
from taurusdb.log_runtime import LogManager
from taurusdb.recovery import compute_elv, read_logs
from taurusdb.storage import Database, LockTable, TableSpec, gkey


# ---------------------------------------------------------------- 1

def test_c1_lv_algebra(criterion):
    rng = random.Random(1)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(100_000):
        n = rng.randint(1, 8)
        a, b, c = (tuple(rng.randrange(1 << rng.choice((4, 16, 63))) for _ in range(n)) for _ in range(3))
        j = lvm.elem_wise_max
        ok = (
            j(a, b) == j(b, a)
            and j(j(a, b), c) == j(a, j(b, c))
            and j(a, a) == a
            and lvm.leq(a, b) == (j(a, b) == b)
            and lvm.leq(a, j(a, b)) and lvm.leq(b, j(a, b))
        )
        bad += not ok
    for _ in range(100_000):
        n = rng.randint(1, 8)
        v = tuple(rng.randrange(1 << 20) for _ in range(n))
        anchor = tuple(rng.randrange(1 << 20) for _ in range(n))
        c = lvm.compress(v, anchor)
        back = lvm.decompress(lvm.CompressedLv.decode(c.encode(), 0, n)[0], anchor)
        bad += not lvm.leq(v, back)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10
    criterion(1, ok, f"{bad} law violations over 2x10^5 cases in {elapsed:.2f} s (limit 10 s)")
    assert ok


# ---------------------------------------------------------------- 2

class ScriptedLog(LogManager):
    """Real commit queue and acknowledgement logic; record end LSNs come from a script."""

    def __init__(self, *args, ends, **kwargs):
        super().__init__(*args, **kwargs)
        self.ends = list(ends)

    def write_log_buffer(self, j, record, on_reserved=None):
        end = self.ends.pop(0)
        # nothing earlier on this log is waiting for acknowledgement
        self.ack_cursor = end - len(record)
        return end


def two_log_walkthrough(directory):
    A, B = 0, 1
    db = Database([TableSpec(0, "objects", 8)])
    db[0].load([(A, b"a" * 8), (B, b"b" * 8)])
    plv = [0, 0]
    logs = [ScriptedLog(0, 2, 1, directory, plv, fsync=False, ends=[16]),
            ScriptedLog(1, 2, 1, directory, plv, fsync=False, ends=[21])]
    for m in logs:
        m.register_worker(0)
    locks = LockTable(2, plv, delta=None)
    cc = TwoPhaseLocking(db, locks, logs, body="data")
    ma, mb = locks.get_or_insert_meta(gkey(0, A)), locks.get_or_insert_meta(gkey(0, B))
    ma.write_lv, ma.read_lv = (4, 2), (3, 7)
    mb.write_lv, mb.read_lv = (8, 6), (5, 11)

    seen = {}
    t1 = cc.begin(1, 0, 0, 0)
    t2 = cc.begin(2, 1, 0, 0)
    t3 = cc.begin(3, 2, 0, 1)
    cc.write(t1, 0, A, b"A" * 8)
    seen["t1_after_A"] = t1.lv
    cc.read(t1, 0, B)
    seen["t1_after_B"] = t1.lv
    probe = cc.begin(99, 3, 0, 0)
    try:
        cc.read(probe, 0, A)
        seen["t2_blocked"] = False
    except TxnAborted:
        seen["t2_blocked"] = True
    k1 = cc.commit(t1)
    seen["t1_final"] = t1.lv
    seen["A_write"] = ma.write_lv
    seen["B_read"] = mb.read_lv
    cc.read(t2, 0, A)
    seen["t2"] = t2.lv
    k2 = cc.commit(t2)
    cc.write(t3, 0, B, b"B" * 8)
    seen["t3_before_log"] = t3.lv
    k3 = cc.commit(t3)
    seen["t3_final"] = t3.lv
    seen["B_write"] = mb.write_lv

    acks = []
    for p in [(15, 7), (16, 6), (16, 7), (16, 20), (16, 21)]:
        plv[0], plv[1] = p
        for m in logs:
            m.drain()
        acks.append((p, k1.acked, k2.acked, k3.acked))
    for m in logs:
        m.close()
    return seen, acks


def test_c2_two_log_walkthrough(criterion, workdir):
    seen, acks = two_log_walkthrough(workdir)
    expected = {
        "t1_after_A": (4, 7), "t1_after_B": (8, 7), "t2_blocked": True, "t1_final": (16, 7),
        "A_write": (16, 7), "B_read": (16, 11), "t2": (16, 7), "t3_before_log": (16, 11),
        "t3_final": (16, 21), "B_write": (16, 21),
    }
    want_acks = [((15, 7), False, False, False), ((16, 6), False, False, False),
                 ((16, 7), True, True, False), ((16, 20), True, True, False),
                 ((16, 21), True, True, True)]
    ok = seen == expected and acks == want_acks
    detail = "LV sequence [4,7] -> [8,7] -> [16,7], B.readLV [16,11], T3 [16,11] -> [16,21], acks at [16,7] and [16,21]"
    if not ok:
        detail = f"got {seen} acks {acks}"
    criterion(2, ok, detail)
    assert ok


# ---------------------------------------------------------------- 3

def test_c3_codec_vectors(criterion):
    c = lvm.compress((4, 45, 1, 2), (7, 16, 2, 4))
    dec = lvm.decompress(c, (7, 16, 2, 4))
    ok = c.dims() == [1] and c.values == (45,) and dec == (7, 45, 2, 4)
    criterion(3, ok, f"stored dims (0-based) {c.dims()} values {c.values}, decompressed {list(dec)}")
    assert ok


# ---------------------------------------------------------------- 4

def test_c4_dependency_capture(criterion, workdir):
    runs, edges, violations = 50, 0, []
    for seed in range(runs):
        tracker = ConflictTracker()
        spec = WorkloadSpec(rows=10_000, theta=0.8, seed=seed)
        cfg = EngineConfig(logs=4, workers_per_log=2, logging=("taurus-command", "taurus-data")[seed % 2],
                           cc=("2pl", "occ")[(seed // 2) % 2], rho=[4096, 65536, None][seed % 3],
                           fsync=False)
        d = os.path.join(workdir, f"run{seed}")
        harness.run(spec, cfg, d, txns=10_000, tracer=tracker, trace=False, ledger=False, metadata=False)
        checked, bad = tracker.violations()
        edges += checked
        violations += bad
        shutil.rmtree(d, ignore_errors=True)
    ok = not violations and edges > 0
    criterion(4, ok, f"{runs} runs x 10^4 txns, {edges} conflict edges checked, {len(violations)} violations")
    assert ok, violations[:5]


# ---------------------------------------------------------------- 5 and 6

@pytest.fixture(scope="module")
def campaign(module_workdir):
    """100 seeds x {data, command} x {2PL, OCC}: kill-now, then torn tails on random logs."""
    results = []
    t0 = time.perf_counter()
    for seed in range(100):
        for body in ("data", "command"):
            for cc in ("2pl", "occ"):
                rng = random.Random(f"{seed}-{body}-{cc}")
                d = os.path.join(module_workdir, f"{seed}-{body}-{cc}")
                spec = WorkloadSpec(rows=2000, theta=0.8, seed=seed)
                cfg = EngineConfig(logs=4, workers_per_log=2, logging=f"taurus-{body}", cc=cc,
                                   rho=rng.choice([1000, 4000, 16000, None]))
                harness.kill_now(spec, cfg, d, rng.uniform(0.02, 0.2))
                # a torn write only reaches bytes past the last completed flush
                floor = harness.durable_floor(d, cfg.streams)
                cuts = []
                for i in range(cfg.streams):
                    size = os.path.getsize(harness.log_path(d, i))
                    if rng.random() < 0.5 and size > floor[i]:
                        off = rng.randint(floor[i], size)
                        harness.truncate(d, i, off)
                        cuts.append((i, off))
                case = {"seed": seed, "body": body, "cc": cc, "cuts": cuts}
                t = time.perf_counter()
                try:
                    case["verify"] = harness.verify(d, workers=4, timeout=60.0)
                except TimeoutError as e:
                    case["verify"] = {"pass": False, "failure": str(e)}
                case["recovery_s"] = time.perf_counter() - t
                txns = oracle.admissible(read_logs(d, cfg.streams))
                case["records"] = len(txns)
                try:
                    if len(txns) <= 10_000:
                        oracle.dependency_order(txns, cfg.streams)
                    case["acyclic"] = True
                except graphlib.CycleError as e:
                    case["acyclic"] = False
                    case["cycle"] = e.args[1][:6]
                results.append(case)
                shutil.rmtree(d, ignore_errors=True)
    return results, time.perf_counter() - t0


def test_c5_crash_recovery(criterion, campaign):
    results, elapsed = campaign
    failed = [c for c in results if not c["verify"]["pass"]]
    acked = sum(c["verify"].get("acknowledged", 0) for c in results)
    ok = not failed and elapsed < 600
    detail = (f"{len(results)} crash cases (100 seeds x data/command x 2PL/OCC), {acked} acknowledged txns, "
              f"{len(failed)} failures, {elapsed:.0f} s (limit 600 s)")
    if failed:
        f = failed[0]
        detail += f"; first: seed {f['seed']} {f['body']}/{f['cc']}: {f['verify']['failure']}"
    criterion(5, ok, detail)
    assert ok


def test_c6_acyclic_and_terminates(criterion, campaign):
    results, _ = campaign
    cyclic = [c for c in results if not c["acyclic"]]
    slow = [c for c in results if c["recovery_s"] >= 60 or "did not finish" in str(c["verify"].get("failure"))]
    checked = sum(1 for c in results if c["records"] <= 10_000)
    ok = not cyclic and not slow
    worst = max(c["recovery_s"] for c in results)
    criterion(6, ok, f"{checked} log sets topologically sorted, {len(cyclic)} cycles, "
                     f"slowest recovery+verify {worst:.2f} s (watchdog 60 s)")
    assert ok


# ---------------------------------------------------------------- 7

def test_c7_parallel_serial_differential(criterion, workdir):
    mismatches = []
    for seed in range(20):
        rng = random.Random(seed)
        spec = WorkloadSpec(kind="ycsb", rows=1000, theta=rng.choice([0.0, 0.6, 0.9]), seed=seed)
        if seed % 5 == 4:
            spec = WorkloadSpec(kind="tpcc", warehouses=2, items=200, customers=20, seed=seed)
        cfg = EngineConfig(logs=4, workers_per_log=2, cc=("2pl", "occ")[seed % 2],
                           logging=("taurus-command", "taurus-data")[(seed // 2) % 2],
                           rho=rng.choice([2000, 65536]), fsync=False)
        d = os.path.join(workdir, str(seed))
        harness.run(spec, cfg, d, txns=3000, trace=False, ledger=False, metadata=False)
        digests = [harness.recover_dir(d, workers=1)[1]["digest"],
                   harness.recover_dir(d, workers=8)[1]["digest"],
                   harness.recover_dir(d, serial=True)[1]["digest"]]
        if len(set(digests)) != 1:
            mismatches.append((seed, digests))
        shutil.rmtree(d, ignore_errors=True)
    ok = not mismatches
    criterion(7, ok, f"20 seeds, parallel(1) / parallel(8) / serial digests differ on {len(mismatches)}")
    assert ok, mismatches


# ---------------------------------------------------------------- 8

def _gil_free() -> bool:
    check = getattr(sys, "_is_gil_enabled", None)
    return check is not None and not check()


PARALLEL_HOST = (os.cpu_count() or 1) >= 8 and _gil_free()


@pytest.mark.xfail(not PARALLEL_HOST, strict=False,
                   reason="needs >= 8 cores and a free-threaded interpreter to show parallel speedup")
def test_c8_scaling_smoke(criterion, workdir):
    spec = WorkloadSpec(rows=100_000, theta=0.0, seed=8)
    tput = {}
    for name, logging_mode, threads in [("taurus1", "taurus-command", 1), ("taurus8", "taurus-command", 8),
                                        ("serial8", "serial-command", 8)]:
        wpl, _ = harness.geometry(4, threads)
        cfg = EngineConfig(logs=4, workers_per_log=wpl, threads=threads, logging=logging_mode)
        d = os.path.join(workdir, name)
        tput[name] = harness.run(spec, cfg, d, duration=5.0, trace=False, ledger=False,
                                 metadata=False)["throughput"]
        shutil.rmtree(d, ignore_errors=True)

    # command records carry no row images, so a narrow row keeps 10^6 rows in memory
    big = WorkloadSpec(rows=1_000_000, theta=0.0, read_fraction=0.0, row_width=100, seed=9)
    d = os.path.join(workdir, "big")
    harness.run(big, EngineConfig(logs=4, workers_per_log=2, logging="taurus-command"), d,
                txns=1_000_000, trace=False, ledger=False, metadata=False)
    _, par = harness.recover_dir(d, workers=8)
    _, ser = harness.recover_dir(d, serial=True)
    shutil.rmtree(d, ignore_errors=True)

    scale = tput["taurus8"] / tput["taurus1"]
    vs_serial = tput["taurus8"] / tput["serial8"]
    rec_speedup = ser["wall_time_s"] / par["wall_time_s"]
    ok = scale >= 2.5 and vs_serial >= 1.3 and rec_speedup >= 2.0
    criterion(8, ok, f"8-vs-1 thread {scale:.2f}x (need 2.5), vs serial-command {vs_serial:.2f}x (need 1.3), "
                     f"parallel(8) recovery of {par['replayed']} txns {rec_speedup:.2f}x faster than serial "
                     f"(need 2.0); host has {os.cpu_count()} cpu(s), GIL {'off' if _gil_free() else 'on'}")
    assert ok


# ---------------------------------------------------------------- 9

def test_c9_rho_sweep(criterion, workdir):
    spec = WorkloadSpec(rows=100_000, theta=0.0, seed=2)
    cfg = EngineConfig(logs=4, workers_per_log=2, logging="taurus-command", fsync=False)
    rhos = [10 ** k for k in range(3, 10)]
    rows = harness.sweep_rho(spec, cfg, rhos, workdir, txns=20_000)
    values = [r["metadata_per_record"] for r in rows]
    k = harness.interior_minimum(values)
    best = min(values)
    ok = k is not None and best <= 16
    curve = ", ".join(f"1e{3 + i}:{v:.2f}" for i, v in enumerate(values))
    criterion(9, ok, f"bytes/record by rho [{curve}], interior minimum {'yes' if k is not None else 'no'}, "
                     f"best {best:.2f} (limit 16)")
    assert ok


# ---------------------------------------------------------------- 10

def test_c10_torn_writes(criterion, workdir):
    spec = WorkloadSpec(rows=1000, theta=0.6, seed=10)
    cfg = EngineConfig(logs=2, workers_per_log=2, logging="taurus-data", rho=2000, fsync=False)
    src = os.path.join(workdir, "src")
    harness.run(spec, cfg, src, txns=2000, trace=False, ledger=False, metadata=False)
    originals = read_logs(src, cfg.streams)
    rng = random.Random(10)
    mismatches = []
    for trial in range(50):
        i = rng.randrange(cfg.streams)
        off = rng.randint(0, len(originals[i]))
        d = os.path.join(workdir, f"t{trial}")
        shutil.copytree(src, d)
        harness.truncate(d, i, off)
        bufs = read_logs(d, cfg.streams)
        got = compute_elv(bufs)
        want = [oracle.frame_walk(b)[1] for b in bufs]
        if got != want:
            mismatches.append((trial, i, off, got, want))
        shutil.rmtree(d)
    ok = not mismatches
    criterion(10, ok, f"50 random truncation offsets, {len(mismatches)} ELV mismatches against the frame walk")
    assert ok, mismatches
