"""Transaction context and the logging tail shared by the 2PL and OCC engines."""

from __future__ import annotations

import enum
from typing import Callable, Optional

from . import log_format
from . import lsn_vector as lvmod
from .log_runtime import CommitTicket, LogManager
from .storage import Database, LockTable

READ = 0
WRITE = 1


class Status(enum.Enum):
    ACTIVE = "active"
    ABORTED = "aborted"
    PRECOMMIT = "precommit"
    COMMITTED = "committed"


class Access:
    """One entry of a 2PL access set."""

    __slots__ = ("table_id", "key", "gkey", "meta", "mode", "before", "image",
                 "written", "inserted", "deleted")

    def __init__(self, table_id: int, key: int, g: int, meta, mode: int):
        self.table_id = table_id
        self.key = key
        self.gkey = g
        self.meta = meta
        self.mode = mode
        self.before = None
        self.image = None
        self.written = False
        self.inserted = False
        self.deleted = False


class TxnContext:
    """Per-attempt transaction state, owned by a single worker thread."""

    __slots__ = ("txn_id", "worker_id", "slot", "log_id", "lv", "accesses", "order",
                 "command", "status", "scan_notes", "reads", "writes", "pinned",
                 "pending", "locked")

    def __init__(self, txn_id, worker_id: int, slot: int, log_id: int, n: int, command=None):
        self.txn_id = txn_id
        self.worker_id = worker_id
        self.slot = slot
        self.log_id = log_id
        self.lv = (0,) * n
        self.accesses: dict[int, Access] = {}
        self.order: list[Access] = []
        self.command = command
        self.status = Status.ACTIVE
        self.scan_notes: list[tuple[int, int, int, int]] = []
        # OCC only
        self.reads: dict = {}
        self.writes: dict = {}
        self.pinned: dict = {}
        self.pending: list = []
        self.locked: list = []


class Tracer:
    """Instrumentation hooks; the default implementation does nothing.

    ``on_access`` runs under the tuple's latch at the point where the access
    becomes visible to conflicting transactions, so calls for one key arrive
    in conflict order.
    """

    def on_access(self, g: int, txn_id, is_write: bool) -> None:
        pass

    def on_commit(self, txn: TxnContext, ticket: CommitTicket) -> None:
        pass


class LoggingTail:
    """Record construction, buffer write and commit-queue handoff.

    ``body`` selects data or command records.  With ``track_lv`` off (serial
    logging) records carry no LV and the transaction's LV is just its own end
    LSN on the single log.
    """

    def __init__(self, db: Database, locks: LockTable, logs: list[LogManager], *,
                 body: str = "command", track_lv: bool = True,
                 tracer: Optional[Tracer] = None,
                 on_reserved: Optional[Callable] = None):
        if body not in ("data", "command"):
            raise ValueError(f"unknown record body {body!r}")
        self.db = db
        self.locks = locks
        self.logs = logs
        self.n = len(logs) if track_lv else 1
        self.body = body
        self.track_lv = track_lv
        self.tracer = tracer
        self.on_reserved = on_reserved

    def begin(self, txn_id, worker_id: int, slot: int, log_id: int, command=None) -> TxnContext:
        return TxnContext(txn_id, worker_id, slot, log_id, self.n, command)

    def _encode(self, txn: TxnContext, writes) -> bytes:
        mgr = self.logs[txn.log_id]
        if self.track_lv:
            clv = lvmod.compress(txn.lv, mgr.lplv)
        else:
            clv = log_format.EMPTY_LV
        if self.body == "command":
            if txn.command is None:
                raise ValueError("command logging needs the transaction's procedure and parameters")
            proc_id, params = txn.command
            return log_format.encode_command(clv, proc_id, params)
        return log_format.encode_data(clv, writes)

    def write_record(self, txn: TxnContext, writes) -> tuple[int, int]:
        """Snapshot the LV into a record, append it and fold the end LSN into ``txn.lv``."""
        record = self._encode(txn, writes)
        mgr = self.logs[txn.log_id]
        hook = None
        if self.on_reserved is not None:
            cb, log_id = self.on_reserved, txn.log_id
            hook = lambda s, e: cb(log_id, s, e, txn)  # noqa: E731
        end = mgr.write_log_buffer(txn.slot, record, hook)
        i = txn.log_id
        if self.track_lv:
            lv = txn.lv
            txn.lv = lv[:i] + (end,) + lv[i + 1:]
        else:
            txn.lv = (end,)
        return end - len(record), end

    def read_only_lv(self, txn: TxnContext) -> tuple:
        if self.track_lv:
            return txn.lv
        # a serial log orders everything; wait for whatever is already reserved
        return (self.logs[0].log_lsn,)

    def finish(self, txn: TxnContext, span: Optional[tuple[int, int]]) -> CommitTicket:
        if span is None:
            ticket = CommitTicket(txn.txn_id, txn.log_id, self.read_only_lv(txn))
        else:
            ticket = CommitTicket(txn.txn_id, txn.log_id, txn.lv, span[0], span[1])
        txn.status = Status.PRECOMMIT
        if self.tracer is not None:
            self.tracer.on_commit(txn, ticket)
        self.logs[txn.log_id].enqueue(ticket)
        return ticket


class Tx:
    """What a stored procedure sees: row operations bound to one transaction."""

    __slots__ = ("cc", "ctx")

    def __init__(self, cc, ctx: TxnContext):
        self.cc = cc
        self.ctx = ctx

    def read(self, table_id: int, key: int, for_update: bool = False) -> bytes:
        return self.cc.read(self.ctx, table_id, key, for_update)

    def write(self, table_id: int, key: int, payload) -> None:
        self.cc.write(self.ctx, table_id, key, payload)

    def insert(self, table_id: int, key: int, payload) -> None:
        self.cc.insert_row(self.ctx, table_id, key, payload)

    def delete(self, table_id: int, key: int) -> None:
        self.cc.delete_row(self.ctx, table_id, key)

    def scan(self, table_id: int, low: int, high: int) -> list[tuple[int, bytes]]:
        return self.cc.scan(self.ctx, table_id, low, high)
