"""Engine assembly: log managers, lock table, concurrency control and workers.

Worker ``w`` writes to log ``w // workers_per_log`` using slot
``w % workers_per_log``.  Serial logging is the single-stream baseline: one
log shared by every worker, records without LVs.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

from . import procedures
from .cc_2pl import TwoPhaseLocking
from .cc_occ import OptimisticCC
from .errors import TxnAborted, UserAbort
from .log_runtime import DEFAULT_BUFFER, DEFAULT_FLUSH_INTERVAL, CommitTicket, LogManager
from .storage import DEFAULT_DELTA, Database, LockTable
from .txn import Tracer, Tx

LOGGING_MODES = ("taurus-data", "taurus-command", "serial-data", "serial-command")
CC_MODES = ("2pl", "occ")
# lock-table entries the background sweeper examines per interval
SWEEP_BUDGET = 4096


@dataclass
class EngineConfig:
    logs: int = 4
    workers_per_log: int = 2
    logging: str = "taurus-command"
    cc: str = "2pl"
    rho: Optional[int] = 1 << 16
    delta: Optional[int] = DEFAULT_DELTA
    buffer_size: int = DEFAULT_BUFFER
    flush_interval: float = DEFAULT_FLUSH_INTERVAL
    fsync: bool = True
    sweep_interval: float = 0.1
    threads: Optional[int] = None

    def validate(self) -> None:
        if self.logging not in LOGGING_MODES:
            raise ValueError(f"logging must be one of {LOGGING_MODES}, got {self.logging!r}")
        if self.cc not in CC_MODES:
            raise ValueError(f"cc must be one of {CC_MODES}, got {self.cc!r}")
        if not 1 <= self.logs <= 64:
            raise ValueError("logs must be in [1, 64]")
        if self.workers_per_log < 1:
            raise ValueError("workers_per_log must be positive")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive or None")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive or None")
        if self.threads is not None:
            if self.threads < 1:
                raise ValueError("threads must be positive")
            if not self.serial and self.threads > self.logs * self.workers_per_log:
                raise ValueError("threads exceed logs * workers_per_log")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def serial(self) -> bool:
        return self.logging.startswith("serial")

    @property
    def body(self) -> str:
        return self.logging.split("-", 1)[1]

    @property
    def workers(self) -> int:
        if self.threads is not None:
            return self.threads
        return self.logs * self.workers_per_log

    @property
    def streams(self) -> int:
        """Number of physical log files."""
        return 1 if self.serial else self.logs


class Engine:
    """A running database instance writing its logs into ``directory``."""

    def __init__(self, db: Database, config: EngineConfig, directory, *,
                 tracer: Optional[Tracer] = None,
                 on_ack: Optional[Callable[[CommitTicket], None]] = None,
                 on_reserved: Optional[Callable] = None):
        config.validate()
        self.db = db
        self.config = config
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)
        n = config.streams
        per_log = config.workers if config.serial else config.workers_per_log
        self.plv = [0] * n
        # serial logging carries no LVs, so anchors would be dead weight
        rho = None if config.serial else config.rho
        self.logs = [
            LogManager(i, n, per_log, self.directory, self.plv, buffer_size=config.buffer_size,
                       rho=rho, fsync=config.fsync, flush_interval=config.flush_interval,
                       on_ack=on_ack)
            for i in range(n)
        ]
        self.locks = LockTable(n, self.plv, config.delta)
        cls = TwoPhaseLocking if config.cc == "2pl" else OptimisticCC
        self.cc = cls(db, self.locks, self.logs, body=config.body,
                      track_lv=not config.serial, tracer=tracer, on_reserved=on_reserved)
        for w in range(config.workers):
            log_id, slot = self.placement(w)
            self.logs[log_id].register_worker(slot)
        self._seq = [0] * config.workers
        self.commits = [0] * config.workers
        self.aborts = [0] * config.workers
        self.user_aborts = [0] * config.workers
        self._sweeper: Optional[threading.Thread] = None
        self._stop_sweep = threading.Event()
        self.running = False

    def placement(self, worker: int) -> tuple[int, int]:
        if self.config.serial:
            return 0, worker
        return worker // self.config.workers_per_log, worker % self.config.workers_per_log

    # ------------------------------------------------------------ lifecycle
    def start(self) -> "Engine":
        for mgr in self.logs:
            mgr.start()
        if self.config.delta is not None and self.config.sweep_interval:
            self._stop_sweep.clear()
            self._sweeper = threading.Thread(target=self._sweep_loop, name="lv-sweeper", daemon=True)
            self._sweeper.start()
        self.running = True
        return self

    def _sweep_loop(self) -> None:
        while not self._stop_sweep.wait(self.config.sweep_interval):
            self.locks.sweep(budget=SWEEP_BUDGET)

    def pending(self) -> int:
        return sum(m.pending() for m in self.logs)

    def quiesce(self, timeout: float = 60.0) -> None:
        """Flush until every queued transaction has been acknowledged."""
        deadline = time.monotonic() + timeout
        while True:
            for mgr in self.logs:
                mgr.flush_tick()
            # one more pass lets other logs' fresh PLV values reach every queue
            for mgr in self.logs:
                mgr.drain()
            if not self.pending():
                return
            if time.monotonic() > deadline:
                raise TimeoutError(f"{self.pending()} transactions still unacknowledged")
            time.sleep(0.001)

    def stop(self) -> None:
        if not self.running:
            return
        self._stop_sweep.set()
        if self._sweeper is not None:
            self._sweeper.join()
            self._sweeper = None
        for mgr in self.logs:
            mgr.stop_thread()
        self.quiesce()
        for mgr in self.logs:
            mgr.write_final_anchor()
        for mgr in self.logs:
            mgr.flush_tick()
        for mgr in self.logs:
            mgr.close()
        self.running = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # ------------------------------------------------------------ transactions
    def execute(self, worker: int, proc_id: int, params: bytes,
                max_retries: Optional[int] = None) -> Optional[CommitTicket]:
        """Run a stored procedure to precommit, retrying concurrency aborts.

        Returns the commit ticket, or None if the procedure aborted itself.
        """
        log_id, slot = self.placement(worker)
        self._seq[worker] += 1
        txn_id = (worker << 40) | self._seq[worker]
        cc = self.cc
        attempt = 0
        while True:
            ctx = cc.begin(txn_id, worker, slot, log_id, (proc_id, params))
            try:
                procedures.run(Tx(cc, ctx), proc_id, params)
                ticket = cc.commit(ctx)
            except UserAbort:
                cc.abort(ctx)
                self.user_aborts[worker] += 1
                return None
            except TxnAborted:
                cc.abort(ctx)
                self.aborts[worker] += 1
                attempt += 1
                if max_retries is not None and attempt > max_retries:
                    raise
                # short backoff after repeated conflicts so NO_WAIT retries do not spin
                time.sleep(0 if attempt < 4 else min(0.0001 * attempt, 0.002))
                continue
            except BaseException:
                cc.abort(ctx)
                raise
            self.commits[worker] += 1
            return ticket
