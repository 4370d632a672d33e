"""Benchmark and crash-experiment driver.

A run directory holds the log files plus three sidecars:

* ``manifest.json``  workload, engine geometry and procedure registry version
* ``trace.log``      one line per log record, in the order the records were
  reserved; this is the original serialization order the oracle replays in
* ``ledger.jsonl``   one line per acknowledged transaction, appended with a
  plain ``write(2)`` right after the acknowledgement

The sidecars are written outside the engine's log path, so a crash that
damages the logs does not damage the oracle's ground truth.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import os
import signal
import threading
import time
from typing import Optional

from .. import log_format
from .. import procedures as P
from ..engine import Engine, EngineConfig
from ..errors import ManifestMismatch
from ..log_runtime import log_path
from ..recovery import Recovery, read_logs
from ..txn import Tracer
from . import oracle
from .workload import TxnStream, WorkloadSpec, load_database, tpcc_consistency

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TRACE = "trace.log"
LEDGER = "ledger.jsonl"
FORMAT_VERSION = 1


# ---------------------------------------------------------------- manifest

def write_manifest(directory, spec: WorkloadSpec, config: EngineConfig) -> dict:
    manifest = {
        "format": FORMAT_VERSION,
        "registry_version": P.REGISTRY_VERSION,
        "streams": config.streams,
        "logging": config.logging,
        "workload": spec.to_dict(),
        "engine": config.to_dict(),
    }
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise ManifestMismatch(f"no {MANIFEST} in {directory}")
    with open(path) as f:
        m = json.load(f)
    if m.get("format") != FORMAT_VERSION:
        raise ManifestMismatch(f"unsupported manifest format {m.get('format')!r}")
    if m.get("registry_version") != P.REGISTRY_VERSION:
        raise ManifestMismatch(
            f"log written with procedure registry v{m.get('registry_version')}, "
            f"this build has v{P.REGISTRY_VERSION}")
    return m


def manifest_spec(m: dict) -> WorkloadSpec:
    return WorkloadSpec(**m["workload"])


def manifest_config(m: dict) -> EngineConfig:
    cfg = EngineConfig(**m["engine"])
    cfg.validate()
    if cfg.streams != m["streams"] or cfg.logging != m["logging"]:
        raise ManifestMismatch("manifest engine section disagrees with its stream count or logging mode")
    return cfg


def geometry(logs: int, threads: int, workers_per_log: Optional[int] = None) -> tuple[int, int]:
    """(workers_per_log, threads) so that ``threads`` workers fit on ``logs`` logs."""
    if logs < 1 or threads < 1:
        raise ValueError("logs and threads must be positive")
    wpl = workers_per_log or max(1, math.ceil(threads / logs))
    return wpl, threads


# ---------------------------------------------------------------- sidecars

class Sidecars:
    """Trace and ledger writers.  Both use unbuffered appends."""

    def __init__(self, directory, trace: bool = True, ledger: bool = True):
        flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_APPEND
        self.trace_fd = os.open(os.path.join(directory, TRACE), flags, 0o644) if trace else None
        self.ledger_fd = os.open(os.path.join(directory, LEDGER), flags, 0o644) if ledger else None
        self._lock = threading.Lock()

    def on_reserved(self, log_id, start, end, txn) -> None:
        # runs before the record can be flushed, so every durable record is traced
        with self._lock:
            os.write(self.trace_fd, b"%d %d %d\n" % (log_id, start, end))

    def on_ack(self, ticket) -> None:
        line = json.dumps({"txn": ticket.txn_id, "log": ticket.log_id, "end": ticket.end,
                           "lv": list(ticket.lv), "plv": list(ticket.ack_plv)},
                          separators=(",", ":"))
        os.write(self.ledger_fd, line.encode() + b"\n")

    def close(self) -> None:
        for fd in (self.trace_fd, self.ledger_fd):
            if fd is not None:
                os.close(fd)


# ---------------------------------------------------------------- run

def _quotas(total: Optional[int], workers: int) -> list[Optional[int]]:
    if total is None:
        return [None] * workers
    return [total // workers + (1 if w < total % workers else 0) for w in range(workers)]


def run(spec: WorkloadSpec, config: EngineConfig, directory, *, duration: Optional[float] = None,
        txns: Optional[int] = None, trace: bool = True, ledger: bool = True,
        tracer: Optional[Tracer] = None, started: Optional[threading.Event] = None,
        metadata: bool = True) -> dict:
    """Execute the workload until ``duration`` seconds pass or ``txns`` transactions commit."""
    spec.validate()
    config.validate()
    if duration is None and txns is None:
        raise ValueError("need a duration or a transaction count")
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    write_manifest(directory, spec, config)
    db = load_database(spec)
    side = Sidecars(directory, trace=trace, ledger=ledger)
    engine = Engine(db, config, directory, tracer=tracer,
                    on_ack=side.on_ack if ledger else None,
                    on_reserved=side.on_reserved if trace else None)
    workers = config.workers
    quotas = _quotas(txns, workers)
    stop = threading.Event()
    errors: list[BaseException] = []

    def worker(w: int) -> None:
        stream = TxnStream(spec, w)
        quota = quotas[w]
        done = 0
        try:
            while not stop.is_set() and (quota is None or done < quota):
                proc_id, params = stream.next()
                engine.execute(w, proc_id, params)
                done += 1
        except BaseException as e:
            errors.append(e)
            stop.set()

    engine.start()
    threads = [threading.Thread(target=worker, args=(w,), name=f"worker-{w}") for w in range(workers)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    if started is not None:
        started.set()
    if duration is not None:
        stop.wait(duration)
        stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    engine.stop()
    side.close()
    if errors:
        raise errors[0]

    committed = sum(engine.commits)
    aborts = sum(engine.aborts)
    report = {
        "workload": spec.kind,
        "logging": config.logging,
        "cc": config.cc,
        "threads": workers,
        "logs": config.streams,
        "committed": committed,
        "user_aborts": sum(engine.user_aborts),
        "aborts": aborts,
        "abort_rate": aborts / (aborts + committed) if aborts + committed else 0.0,
        "elapsed_s": elapsed,
        "throughput": committed / elapsed if elapsed > 0 else 0.0,
        "evictions": engine.locks.evictions,
        "anchors": sum(m.anchors for m in engine.logs),
        "ledger": os.path.join(directory, LEDGER) if ledger else None,
    }
    if metadata:
        report.update(metadata_stats(directory, config.streams, db.widths))
    return report


def metadata_stats(directory, n: int, widths) -> dict:
    """Average dependency metadata per transaction record, anchors included."""
    records = meta = anchors = 0
    for buf in read_logs(directory, n):
        for rec in log_format.iter_records(buf, n, widths):
            meta += rec.metadata_bytes
            if rec.kind == log_format.ANCHOR:
                anchors += 1
            else:
                records += 1
    return {
        "log_records": records,
        "anchor_records": anchors,
        "metadata_bytes": meta,
        "metadata_per_record": meta / records if records else 0.0,
    }


# ---------------------------------------------------------------- crash

def _child(spec, config, directory, started) -> None:
    logging.disable(logging.CRITICAL)
    run(spec, config, directory, duration=3600.0, started=started, metadata=False)


def kill_now(spec: WorkloadSpec, config: EngineConfig, directory, after: float,
             startup_timeout: float = 60.0) -> int:
    """Run the engine in a child process and SIGKILL it ``after`` seconds into the workload."""
    ctx = multiprocessing.get_context("fork")
    started = ctx.Event()
    proc = ctx.Process(target=_child, args=(spec, config, os.fspath(directory), started), daemon=True)
    proc.start()
    if not started.wait(startup_timeout):
        proc.kill()
        proc.join()
        raise RuntimeError("engine child did not start")
    time.sleep(after)
    os.kill(proc.pid, signal.SIGKILL)
    proc.join()
    return proc.exitcode


def durable_floor(directory, n: int) -> list[int]:
    """Per log, the highest offset known to have been made durable before the crash.

    Evidence comes from the acknowledgement ledger (LVs and the PLV seen at
    acknowledgement) and from PLV anchors inside the logs.  A torn write can
    only remove bytes past this point; cutting below it would model losing
    data after its flush barrier completed.
    """
    floor = [0] * n
    for e in oracle.read_ledger(os.path.join(directory, LEDGER)):
        floor = [max(f, a, b) for f, a, b in zip(floor, e["lv"], e.get("plv", e["lv"]))]
    for buf in read_logs(directory, n):
        for frame in oracle.frame_walk(buf)[0]:
            if frame.kind == log_format.ANCHOR:
                plv = oracle.anchor_plv(frame, n)
                floor = [max(f, v) for f, v in zip(floor, plv)]
    return floor


def truncate(directory, log_id: int, offset: int) -> bool:
    """Cut ``log_<id>`` to ``offset`` bytes; returns False (no-op) if that is past the end."""
    path = log_path(directory, log_id)
    if offset >= os.path.getsize(path):
        return False
    os.truncate(path, offset)
    return True


# ---------------------------------------------------------------- recover / verify

def recover_dir(directory, *, workers: int = 4, serial: bool = False,
                timeout: Optional[float] = None, on_replay=None) -> tuple[Recovery, dict]:
    m = read_manifest(directory)
    spec, config = manifest_spec(m), manifest_config(m)
    db = load_database(spec)
    rec = Recovery(db, read_logs(directory, config.streams), track_lv=not config.serial,
                   workers=workers, serial=serial, on_replay=on_replay)
    report = rec.run(timeout)
    report["digest"] = oracle.digest(db.items())
    return rec, report


def verify(directory, *, workers: int = 4, serial: bool = False, timeout: float = 60.0) -> dict:
    """Check a (possibly crashed) run directory against the independent oracle."""
    m = read_manifest(directory)
    spec, config = manifest_spec(m), manifest_config(m)
    n = config.streams
    result = {"pass": False, "checks": {}, "failure": None}
    checks = result["checks"]

    rec, report = recover_dir(directory, workers=workers, serial=serial, timeout=timeout)
    result["recovery"] = report
    recovered = rec.recovered()

    buffers = read_logs(directory, n)
    expected = oracle.admissible(buffers, track_lv=not config.serial)

    acked = [e for e in oracle.read_ledger(os.path.join(directory, LEDGER)) if e["end"] is not None]
    missing = [e for e in acked if (e["log"], e["end"]) not in recovered]
    checks["acknowledged_recovered"] = not missing
    if missing and result["failure"] is None:
        result["failure"] = f"acknowledged txn {missing[0]['txn']} (log {missing[0]['log']}, end {missing[0]['end']}) not recovered"

    exp_keys = set(expected)
    checks["admissible_set"] = recovered == exp_keys
    if recovered != exp_keys and result["failure"] is None:
        diff = sorted(recovered ^ exp_keys)[0]
        side = "recovered but not admissible" if diff in recovered else "admissible but not recovered"
        result["failure"] = f"txn at log {diff[0]} end {diff[1]} {side}"

    initial = load_database(spec)
    trace = oracle.read_trace(os.path.join(directory, TRACE))
    try:
        store = oracle.serial_replay(initial.items(), expected, trace, initial.widths)
        want = oracle.digest(oracle.store_items(store))
    except (KeyError, ValueError) as e:
        want = None
        if result["failure"] is None:
            result["failure"] = f"oracle replay failed: {e!r}"
    checks["digest"] = want == report["digest"]
    if want is not None and not checks["digest"] and result["failure"] is None:
        result["failure"] = "recovered state digest differs from the serial oracle"

    if spec.kind == "tpcc":
        problems = tpcc_consistency(rec.db, spec)
        checks["tpcc_consistency"] = not problems
        if problems and result["failure"] is None:
            result["failure"] = problems[0]

    result["acknowledged"] = len(acked)
    result["admissible"] = len(expected)
    result["pass"] = all(checks.values())
    return result


# ---------------------------------------------------------------- rho sweep

def sweep_rho(spec: WorkloadSpec, config: EngineConfig, rhos, root, *, txns: int,
              recovery_workers: int = 4) -> list[dict]:
    rows = []
    for rho in rhos:
        cfg = EngineConfig(**{**config.to_dict(), "rho": rho})
        directory = os.path.join(os.fspath(root), f"rho_{rho}")
        report = run(spec, cfg, directory, txns=txns, trace=False, ledger=False)
        rec, rrep = recover_dir(directory, workers=recovery_workers)
        wall = rrep["wall_time_s"]
        rows.append({
            "rho": rho,
            "metadata_per_record": report["metadata_per_record"],
            "anchors": report["anchor_records"],
            "records": report["log_records"],
            "recovery_throughput": rrep["replayed"] / wall if wall > 0 else 0.0,
        })
    return rows


def interior_minimum(values: list[float]) -> Optional[int]:
    """Index of the minimum if it is strictly below both end points, else None."""
    if len(values) < 3:
        return None
    k = min(range(len(values)), key=values.__getitem__)
    if 0 < k < len(values) - 1 and values[k] < values[0] and values[k] < values[-1]:
        return k
    return None
