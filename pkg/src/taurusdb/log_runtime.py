"""Per-stream log buffers, the log-manager flush loop and commit acknowledgement.

Each :class:`LogManager` owns one log file.  Workers reserve space with a
fetch-and-add on ``log_lsn`` and publish an (allocated, filled) pair around
the copy; the manager flushes only up to the lowest in-progress reservation
(``compute_ready_lsn``), publishes ``PLV[i]`` and acknowledges queued
transactions in LSN order once the whole PLV covers their LV.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import os
import threading
import time
from typing import Callable, Optional

from . import lsn_vector as lvmod
from .errors import EngineStopped, LogFailure
from .log_format import encode_anchor

log = logging.getLogger(__name__)

DEFAULT_BUFFER = 16 << 20
DEFAULT_FLUSH_INTERVAL = 0.005
U64_MAX = lvmod.U64_MAX

# Registered-but-idle worker: allocated < filled, so it never throttles readyLSN.
IDLE = (0, 1)
UNREGISTERED = (U64_MAX, 0)


def log_path(directory, log_id: int) -> str:
    return os.path.join(os.fspath(directory), f"log_{log_id}.taurus")


class CommitTicket:
    """Handle a worker polls for the asynchronous commit acknowledgement."""

    __slots__ = ("txn_id", "log_id", "lv", "start", "end", "acked", "ack_plv", "info")

    def __init__(self, txn_id, log_id: int, lv: tuple, start: Optional[int] = None,
                 end: Optional[int] = None, info=None):
        self.txn_id = txn_id
        self.log_id = log_id
        self.lv = lv
        self.start = start
        self.end = end
        self.acked = False
        self.ack_plv = None
        self.info = info

    @property
    def read_only(self) -> bool:
        return self.end is None

    def __repr__(self):
        return f"CommitTicket({self.txn_id!r}, log={self.log_id}, lv={self.lv}, end={self.end}, acked={self.acked})"


class LogManager:
    """One log stream: ring buffer, reservation protocol, flusher and commit queue.

    ``plv`` is the engine-wide PLV list; this manager is the only writer of
    ``plv[log_id]``.  ``rho`` is the anchor spacing in log bytes (None disables
    anchors).  ``on_ack`` runs on the manager thread for every acknowledged
    ticket, in acknowledgement order.
    """

    def __init__(self, log_id: int, n: int, workers: int, directory, plv: list, *,
                 buffer_size: int = DEFAULT_BUFFER, rho: Optional[int] = None,
                 fsync: bool = True, flush_interval: float = DEFAULT_FLUSH_INTERVAL,
                 on_ack: Optional[Callable[[CommitTicket], None]] = None):
        self.log_id = log_id
        self.n = n
        self.p = workers
        self.path = log_path(directory, log_id)
        self.plv = plv
        self.buffer_size = buffer_size
        self.rho = rho
        self.fsync = fsync
        self.flush_interval = flush_interval
        self.on_ack = on_ack

        self.log_lsn = 0
        self.flushed = 0
        self.buffer = bytearray(buffer_size)
        # slot p belongs to the manager itself (final anchor at shutdown)
        self.state = [UNREGISTERED] * (workers + 1)
        self._last_filled = [0] * (workers + 1)
        self.lplv = lvmod.zero(n)
        self.next_anchor = rho if rho else None
        self._reserve = threading.Lock()

        self._heap: list = []
        self._read_only: list = []
        self._seq = itertools.count()
        self._qlock = threading.Lock()
        self.ack_cursor = 0

        self._wake = threading.Event()
        self._stopping = False
        self._thread: Optional[threading.Thread] = None
        self.failed = False
        self.barriers = 0
        self.anchors = 0
        self.acked = 0
        self.full_waits = 0

        self.fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_APPEND, 0o644)

    # ----------------------------------------------------------- workers
    def register_worker(self, j: int) -> None:
        self.state[j] = IDLE

    def _copy_in(self, lsn: int, data) -> None:
        b, size = self.buffer_size, len(data)
        pos = lsn % b
        first = min(size, b - pos)
        self.buffer[pos:pos + first] = data[:first]
        if first < size:
            self.buffer[0:size - first] = data[first:]

    def write_log_buffer(self, j: int, record: bytes,
                         on_reserved: Optional[Callable[[int, int], None]] = None) -> int:
        """Reserve, copy and publish ``record``; returns its end LSN.

        ``on_reserved(start, end)`` runs after the copy but before the filled
        LSN is published, so the manager cannot flush the record before the
        hook has finished.
        """
        size = len(record)
        if size > self.buffer_size:
            raise ValueError(f"record of {size} bytes exceeds log buffer ({self.buffer_size})")
        backoff = 0.0002
        deadline = None
        while True:
            if self.failed:
                raise LogFailure(f"log {self.log_id} is in fail-stop mode")
            prev = self.state[j]
            self.state[j] = (self.log_lsn, self._last_filled[j])
            anchor = None
            with self._reserve:
                lsn = self.log_lsn
                need = size
                if self.next_anchor is not None and lsn >= self.next_anchor:
                    snap = tuple(self.plv)
                    anchor = encode_anchor(snap)
                    need += len(anchor)
                ok = lsn + need - self.flushed <= self.buffer_size
                if ok:
                    self.log_lsn = lsn + need
                    if anchor is not None:
                        self.next_anchor = lsn + self.rho
                        self.lplv = snap
                        self.anchors += 1
            if ok:
                break
            self.state[j] = prev
            if self._stopping:
                raise EngineStopped("log manager stopping while the buffer is full")
            deadline = deadline or time.monotonic() + 30.0
            if time.monotonic() > deadline:
                raise LogFailure(f"log {self.log_id}: buffer full for 30 s")
            self.full_waits += 1
            self._wake.set()
            time.sleep(backoff)
            backoff = min(backoff * 2, 0.01)
        if anchor is not None:
            self._copy_in(lsn, anchor)
            with self._qlock:
                heapq.heappush(self._heap, (lsn, next(self._seq), None, lsn + len(anchor)))
            lsn += len(anchor)
        self._copy_in(lsn, record)
        end = lsn + size
        if on_reserved is not None:
            on_reserved(lsn, end)
        self._last_filled[j] = end
        self.state[j] = (self.state[j][0], end)
        if self.log_lsn - self.flushed >= self.buffer_size // 2:
            self._wake.set()
        return end

    def enqueue(self, ticket: CommitTicket) -> None:
        with self._qlock:
            if ticket.end is None:
                self._read_only.append(ticket)
            else:
                heapq.heappush(self._heap, (ticket.start, next(self._seq), ticket, ticket.end))

    # ----------------------------------------------------------- manager
    def compute_ready_lsn(self) -> int:
        ready = self.log_lsn
        for alloc, filled in list(self.state):
            if alloc >= filled and alloc < ready:
                ready = alloc
        return ready

    def _write_out(self, start: int, stop: int) -> None:
        b = self.buffer_size
        mv = memoryview(self.buffer)
        while start < stop:
            pos = start % b
            chunk = min(stop - start, b - pos)
            written = os.write(self.fd, mv[pos:pos + chunk])
            start += written

    def flush_tick(self) -> int:
        """One pass of the flush loop; returns the number of bytes made durable."""
        if self.failed:
            return 0
        ready = self.compute_ready_lsn()
        flushed = self.flushed
        if ready > flushed:
            try:
                self._write_out(flushed, ready)
                if self.fsync:
                    os.fsync(self.fd)
            except OSError:
                log.exception("log %d: write failed, entering fail-stop", self.log_id)
                self.failed = True
                return 0
            self.barriers += 1
            self.flushed = ready
            self.plv[self.log_id] = ready
        self.drain()
        return ready - flushed

    def drain(self) -> int:
        """Acknowledge every queued transaction whose turn has come."""
        if self.failed:
            return 0
        plv = tuple(self.plv)
        done = []
        with self._qlock:
            heap = self._heap
            while heap and heap[0][0] == self.ack_cursor:
                _, _, ticket, end = heap[0]
                if ticket is not None and not lvmod.leq(ticket.lv, plv):
                    break
                heapq.heappop(heap)
                self.ack_cursor = end
                if ticket is not None:
                    done.append(ticket)
            if self._read_only:
                keep = []
                for t in self._read_only:
                    (done if lvmod.leq(t.lv, plv) else keep).append(t)
                self._read_only = keep
        for t in done:
            t.ack_plv = plv
            t.acked = True
            self.acked += 1
            if self.on_ack is not None:
                self.on_ack(t)
        return len(done)

    def pending(self) -> int:
        with self._qlock:
            return sum(1 for e in self._heap if e[2] is not None) + len(self._read_only)

    def _loop(self) -> None:
        while not self._stopping:
            self._wake.wait(self.flush_interval)
            self._wake.clear()
            self.flush_tick()

    def start(self) -> None:
        if self._thread is None:
            self._stopping = False
            self._thread = threading.Thread(target=self._loop, name=f"logmgr-{self.log_id}", daemon=True)
            self._thread.start()

    def stop_thread(self) -> None:
        if self._thread is not None:
            self._stopping = True
            self._wake.set()
            self._thread.join()
            self._thread = None

    def write_final_anchor(self) -> None:
        """Append the current PLV so every record is dominated by a later anchor."""
        if self.rho is None:
            return
        j = self.p
        self.state[j] = IDLE
        plv = tuple(self.plv)
        anchor = encode_anchor(plv)
        with self._reserve:
            lsn = self.log_lsn
            self.log_lsn = lsn + len(anchor)
            self.lplv = lvmod.elem_wise_max(self.lplv, plv)
            self.anchors += 1
        self._copy_in(lsn, anchor)
        with self._qlock:
            heapq.heappush(self._heap, (lsn, next(self._seq), None, lsn + len(anchor)))
        self._last_filled[j] = lsn + len(anchor)
        self.state[j] = (lsn, lsn + len(anchor))

    def close(self) -> None:
        self.stop_thread()
        try:
            os.close(self.fd)
        except OSError:
            pass

