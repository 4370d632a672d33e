"""Parallel, dependency-respecting log replay.

Recovery computes the ELV (intact prefix of every log), decodes each log into
a FIFO pool, admitting records while their LV is covered by the ELV, and lets
replay workers take a pool head once the RLV covers its LV.  After a replay
the worker moves ``RLV[i]`` up to just below the oldest record of log ``i``
that is still queued or being replayed.
"""

from __future__ import annotations

import collections
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import log_format
from . import lsn_vector as lvmod
from .errors import DuplicateKey, NoSuchRow, ReplayError, TaurusError, UserAbort
from .log_runtime import log_path
from .procedures import REGISTRY
from .storage import Database


@dataclass
class RecoveredTxn:
    log_id: int
    start: int
    end: int
    lv: tuple
    kind: int
    writes: list = field(default_factory=list)
    proc_id: int = 0
    params: bytes = b""


class RecoveryPool:
    def __init__(self, log_id: int):
        self.log_id = log_id
        self.items: collections.deque[RecoveredTxn] = collections.deque()
        self.max_lsn = 0
        self.latch = threading.Lock()
        self.in_flight: list[int] = []
        self.decode_done = False
        self.admitted: list[tuple[int, int]] = []
        self.ignored = 0

    def idle(self) -> bool:
        return not self.items and not self.in_flight

    def frontier(self) -> int:
        """Highest LSN below which every admitted record has been replayed.  Caller holds the latch."""
        if self.items or self.in_flight:
            low = min(self.in_flight) if self.in_flight else self.items[0].end
            if self.items:
                low = min(low, self.items[0].end)
            return low - 1
        return self.max_lsn


def read_logs(directory, n: int) -> list[bytes]:
    out = []
    for i in range(n):
        path = log_path(directory, i)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing log file {path}")
        with open(path, "rb") as f:
            out.append(f.read())
    return out


def compute_elv(buffers) -> list[int]:
    """Per log, the byte length of the longest prefix of whole, checksum-valid frames."""
    return [log_format.intact_prefix(b) for b in buffers]


class ReplayTx:
    """Stored-procedure view of the recovering store: no locks, no logging."""

    __slots__ = ("db",)

    def __init__(self, db: Database):
        self.db = db

    def read(self, table_id: int, key: int, for_update: bool = False) -> bytes:
        try:
            return self.db[table_id].read_row(key)
        except NoSuchRow as e:
            raise ReplayError(f"replay read of missing row {e}") from None

    def write(self, table_id: int, key: int, payload) -> None:
        try:
            self.db[table_id].write_row(key, payload)
        except NoSuchRow as e:
            raise ReplayError(f"replay write of missing row {e}") from None

    def insert(self, table_id: int, key: int, payload) -> None:
        try:
            self.db[table_id].index_insert(key, payload)
        except DuplicateKey as e:
            raise ReplayError(f"replay insert of existing row {e}") from None

    def delete(self, table_id: int, key: int) -> None:
        try:
            self.db[table_id].index_remove(key)
        except NoSuchRow as e:
            raise ReplayError(f"replay delete of missing row {e}") from None

    def scan(self, table_id: int, low: int, high: int):
        t = self.db[table_id]
        return [(k, t.rows[k]) for k in t.range_scan(low, high)]


class Recovery:
    """One recovery run over ``n`` log buffers into ``db``.

    ``track_lv=False`` reads serial-logging files: records carry no LV and
    replay follows LSN order.  ``on_replay(txn, phase)`` is an optional
    instrumentation hook called with phase "begin" and "end".
    """

    def __init__(self, db: Database, buffers: list[bytes], *, track_lv: bool = True,
                 registry=REGISTRY, workers: int = 4, serial: bool = False,
                 on_replay: Optional[Callable] = None):
        if workers < 1:
            raise ValueError("need at least one replay worker")
        self.db = db
        self.buffers = buffers
        self.n = len(buffers)
        self.track_lv = track_lv
        self.registry = registry
        self.workers = 1 if serial else workers
        self.serial = serial
        self.on_replay = on_replay
        self.widths = db.widths
        self.elv = compute_elv(buffers)
        self.rlv = [0] * self.n
        self.pools = [RecoveryPool(i) for i in range(self.n)]
        self.cond = threading.Condition()
        self.replayed = 0
        self._count_lock = threading.Lock()
        self.errors: list[BaseException] = []

    # ------------------------------------------------------------ RLV
    def _advance(self, i: int, value: int) -> None:
        with self.cond:
            if value > self.rlv[i]:
                self.rlv[i] = value
                self.cond.notify_all()

    def _settle(self, pool: RecoveryPool) -> None:
        """Move RLV[i] after a pool change.  Caller holds the pool latch."""
        value = pool.frontier()
        if pool.decode_done and pool.idle():
            # nothing beyond the admitted prefix will ever be replayed
            value = max(value, self.elv[pool.log_id])
        self._advance(pool.log_id, value)

    # ------------------------------------------------------------ decode
    def decode_log(self, i: int) -> None:
        pool = self.pools[i]
        elv = tuple(self.elv)
        lplv = lvmod.zero(self.n)
        stopped = False
        try:
            for rec in log_format.iter_records(self.buffers[i], self.n, self.widths, limit=elv[i]):
                if rec.kind == log_format.ANCHOR:
                    if stopped:
                        continue
                    lplv = tuple(rec.plv)
                    with pool.latch:
                        pool.max_lsn = rec.end
                        if pool.idle():
                            self._settle(pool)
                    continue
                if stopped:
                    pool.ignored += 1
                    continue
                if self.track_lv:
                    lv = lvmod.decompress(rec.clv, lplv)
                else:
                    lv = (rec.start,)
                if not lvmod.leq(lv, elv):
                    stopped = True
                    pool.ignored += 1
                    continue
                txn = RecoveredTxn(i, rec.start, rec.end, lv, rec.kind, rec.writes,
                                   rec.proc_id, rec.params)
                with pool.latch:
                    was_empty = not pool.items
                    pool.items.append(txn)
                    pool.max_lsn = rec.end
                    pool.admitted.append((rec.start, rec.end))
                if was_empty:
                    with self.cond:
                        self.cond.notify_all()
        finally:
            with pool.latch:
                pool.decode_done = True
                self._settle(pool)
            with self.cond:
                self.cond.notify_all()

    # ------------------------------------------------------------ replay
    def replay(self, txn: RecoveredTxn) -> None:
        if txn.kind == log_format.DATA:
            for table_id, key, image in txn.writes:
                table = self.db[table_id]
                if image is None:
                    table.discard(key)
                else:
                    table.upsert(key, image)
            return
        proc = self.registry.get(txn.proc_id)
        if proc is None:
            raise ReplayError(f"unknown procedure id {txn.proc_id}")
        try:
            proc.fn(ReplayTx(self.db), txn.params)
        except UserAbort:
            raise ReplayError(f"logged transaction at {txn.log_id}:{txn.end} aborted on replay") from None

    def fetch_next(self, home: int):
        """Take an eligible pool head, scanning round-robin from ``home``."""
        rlv = tuple(self.rlv)
        for k in range(self.n):
            pool = self.pools[(home + k) % self.n]
            if not pool.items:
                continue
            with pool.latch:
                if pool.items and lvmod.leq(pool.items[0].lv, rlv):
                    txn = pool.items.popleft()
                    pool.in_flight.append(txn.end)
                    return pool, txn
        return None

    def is_recovery_done(self) -> bool:
        for pool in self.pools:
            if not pool.decode_done or not pool.idle():
                return False
        return True

    def worker_loop(self, worker: int) -> None:
        home = worker % self.n
        hook = self.on_replay
        try:
            while not self.errors:
                got = self.fetch_next(home)
                if got is None:
                    with self.cond:
                        if self.is_recovery_done() or self.errors:
                            return
                        self.cond.wait(0.005)
                    continue
                pool, txn = got
                if hook is not None:
                    hook(txn, "begin")
                self.replay(txn)
                if hook is not None:
                    hook(txn, "end")
                with pool.latch:
                    pool.in_flight.remove(txn.end)
                    self._settle(pool)
                with self._count_lock:
                    self.replayed += 1
                home = pool.log_id
        except BaseException as e:  # surfaced by run()
            self.errors.append(e)
            with self.cond:
                self.cond.notify_all()

    # ------------------------------------------------------------ driver
    def run(self, timeout: Optional[float] = None) -> dict:
        t0 = time.perf_counter()
        if self.serial:
            for i in range(self.n):
                self.decode_log(i)
            self.worker_loop(0)
        else:
            threads = [threading.Thread(target=self._guard, args=(self.decode_log, i),
                                        name=f"decode-{i}", daemon=True) for i in range(self.n)]
            threads += [threading.Thread(target=self.worker_loop, args=(w,),
                                         name=f"replay-{w}", daemon=True) for w in range(self.workers)]
            for t in threads:
                t.start()
            deadline = None if timeout is None else time.monotonic() + timeout
            for t in threads:
                left = None if deadline is None else max(0.0, deadline - time.monotonic())
                t.join(left)
                if t.is_alive():
                    self.errors.append(TimeoutError(f"recovery did not finish within {timeout} s"))
                    with self.cond:
                        self.cond.notify_all()
                    break
        wall = time.perf_counter() - t0
        if self.errors:
            err = self.errors[0]
            if isinstance(err, (TaurusError, TimeoutError)):
                raise err
            raise ReplayError(f"replay worker failed: {err!r}") from err
        return self.report(wall)

    def _guard(self, fn, *args) -> None:
        try:
            fn(*args)
        except BaseException as e:
            self.errors.append(e)
            with self.cond:
                self.cond.notify_all()

    def report(self, wall: float) -> dict:
        return {
            "mode": "serial" if self.serial else "parallel",
            "workers": self.workers,
            "logs": [
                {"log": p.log_id, "elv": self.elv[p.log_id], "admitted": len(p.admitted),
                 "ignored": p.ignored}
                for p in self.pools
            ],
            "replayed": self.replayed,
            "wall_time_s": wall,
            "rlv": list(self.rlv),
        }

    def recovered(self) -> set[tuple[int, int]]:
        """(log id, end LSN) of every admitted transaction."""
        return {(p.log_id, end) for p in self.pools for _, end in p.admitted}


def recover(db: Database, directory, n: int, timeout: Optional[float] = None,
            **kwargs) -> tuple[Recovery, dict]:
    rec = Recovery(db, read_logs(directory, n), **kwargs)
    return rec, rec.run(timeout)
