"""Optimistic concurrency control with LSN Vector propagation.

Execution buffers writes and records a (value, version, writeLV) snapshot for
every tuple it touches.  Commit locks the write set in key order, raises the
readLV of every read-set tuple to the transaction's LV, validates versions,
and then shares the logging tail with the 2PL engine.

Read-set tuples also carry a ``pending_readers`` count from the readLV step
until the reader's final LV (including its own end LSN) has been folded into
readLV.  A writer that finds pending readers aborts instead of locking, which
guarantees every later writer of the tuple observes the reader's end LSN.
"""

from __future__ import annotations

import time
from typing import Optional

from . import lsn_vector as lvmod
from .errors import NoSuchRow, TxnAborted
from .log_runtime import CommitTicket
from .storage import gkey
from .txn import LoggingTail, Status, TxnContext

_ewm = lvmod.elem_wise_max

UPDATE = "update"
INSERT = "insert"
DELETE = "delete"

LOCK_SPINS = 16


class OptimisticCC(LoggingTail):

    # ------------------------------------------------------------ execution
    def _check_active(self, txn: TxnContext) -> None:
        if txn.status is not Status.ACTIVE:
            raise RuntimeError(f"transaction {txn.txn_id} is {txn.status.value}")

    def access(self, txn: TxnContext, table_id: int, key: int):
        """Snapshot the tuple once per transaction; returns the observed payload or None."""
        self._check_active(txn)
        g = gkey(table_id, key)
        seen = txn.reads.get(g)
        if seen is not None:
            return seen[4]
        table = self.db[table_id]
        with self.locks.latch_for(g):
            meta = self.locks.lookup_latched(g)
            if g not in txn.pinned:
                meta.pin_count += 1
                txn.pinned[g] = meta
            # writers apply under this latch, so the three fields agree
            row = table.rows.get(key)
            version = meta.version
            wlv = meta.write_lv
        txn.reads[g] = (table_id, key, meta, version, row)
        if self.track_lv:
            txn.lv = _ewm(txn.lv, wlv)
        return row

    def _own(self, txn: TxnContext, table_id: int, key: int):
        return txn.writes.get(gkey(table_id, key))

    def read(self, txn: TxnContext, table_id: int, key: int, for_update: bool = False) -> bytes:
        own = self._own(txn, table_id, key)
        if own is not None:
            if own[2] == DELETE:
                raise NoSuchRow(f"{self.db[table_id].spec.name}[{key}]")
            return own[3]
        row = self.access(txn, table_id, key)
        if row is None:
            raise NoSuchRow(f"{self.db[table_id].spec.name}[{key}]")
        return row

    def write(self, txn: TxnContext, table_id: int, key: int, payload) -> None:
        table = self.db[table_id]
        if len(payload) != table.spec.row_width:
            raise ValueError(f"{table.spec.name}: bad row width {len(payload)}")
        g = gkey(table_id, key)
        own = txn.writes.get(g)
        if own is not None:
            if own[2] == DELETE:
                raise NoSuchRow(f"{table.spec.name}[{key}]")
            txn.writes[g] = (table_id, key, own[2], bytes(payload))
            return
        if self.access(txn, table_id, key) is None:
            raise NoSuchRow(f"{table.spec.name}[{key}]")
        txn.writes[g] = (table_id, key, UPDATE, bytes(payload))

    def insert_row(self, txn: TxnContext, table_id: int, key: int, payload) -> None:
        table = self.db[table_id]
        if len(payload) != table.spec.row_width:
            raise ValueError(f"{table.spec.name}: bad row width {len(payload)}")
        g = gkey(table_id, key)
        if g in txn.writes or self.access(txn, table_id, key) is not None:
            self.abort(txn)
            raise TxnAborted("duplicate key")
        txn.writes[g] = (table_id, key, INSERT, bytes(payload))

    def delete_row(self, txn: TxnContext, table_id: int, key: int) -> None:
        g = gkey(table_id, key)
        own = txn.writes.get(g)
        if own is not None and own[2] == INSERT:
            raise ValueError("deleting a row inserted by the same transaction is not supported")
        if (own is not None and own[2] == DELETE) or (
                own is None and self.access(txn, table_id, key) is None):
            self.abort(txn)
            raise TxnAborted("delete of absent key")
        txn.writes[g] = (table_id, key, DELETE, None)

    def scan(self, txn: TxnContext, table_id: int, low: int, high: int) -> list[tuple[int, bytes]]:
        table = self.db[table_id]
        keys = table.range_scan(low, high)
        out = []
        for key in keys:
            own = self._own(txn, table_id, key)
            if own is not None:
                if own[2] != DELETE:
                    out.append((key, own[3]))
                continue
            row = self.access(txn, table_id, key)
            if row is not None:
                out.append((key, row))
        txn.scan_notes.append((table_id, low, high, len(keys)))
        return out

    # ------------------------------------------------------------ commit
    def _lock_one(self, txn: TxnContext, g: int, table_id: int, key: int, kind: str) -> bool:
        tid = txn.txn_id
        table = self.db[table_id]
        for _ in range(LOCK_SPINS):
            with self.locks.latch_for(g):
                meta = txn.pinned.get(g)
                if meta is None:
                    meta = self.locks.lookup_latched(g)
                    meta.pin_count += 1
                    txn.pinned[g] = meta
                if meta.pending_readers or (meta.inserting is not None and meta.inserting != tid):
                    return False
                if meta.owner is None:
                    present = key in table
                    if present == (kind == INSERT):
                        return False
                    meta.owner = tid
                    if kind == INSERT:
                        meta.inserting = tid
                    txn.locked.append(meta)
                    return True
            time.sleep(0)
        return False

    def _fail(self, txn: TxnContext, reason: str):
        self.abort(txn)
        raise TxnAborted(reason)

    def commit(self, txn: TxnContext) -> CommitTicket:
        self._check_active(txn)
        tid = txn.txn_id
        track = self.track_lv

        # 1. lock the write set in key order
        for g in sorted(txn.writes):
            table_id, key, kind, _ = txn.writes[g]
            if not self._lock_one(txn, g, table_id, key, kind):
                self._fail(txn, "write-set lock conflict")

        # 2. raise readLV of every read-set tuple before validating
        lv = txn.lv
        n = len(lv)
        for g, (_, _, meta, _, _) in txn.reads.items():
            with self.locks.latch_for(g):
                if meta.owner is not None and meta.owner != tid:
                    ok = False
                else:
                    ok = True
                    if track:
                        for d in range(n):
                            meta.advance_read_dim(d, lv[d])
                    meta.pending_readers += 1
            if not ok:
                self._fail(txn, "read-set tuple locked")
            txn.pending.append(meta)

        # 3. a writer also follows earlier readers and writers of its write set
        if track:
            for meta in txn.locked:
                with self.locks.latch_for(meta.key):
                    lv = _ewm(_ewm(lv, meta.read_lv), meta.write_lv)
            txn.lv = lv

        # 4. validate
        for g, (_, _, meta, version, _) in txn.reads.items():
            if meta.version != version:
                self._fail(txn, "validation: version changed")
        for table_id, low, high, count in txn.scan_notes:
            if self.db[table_id].count_range(low, high) != count:
                self._fail(txn, "validation: phantom")

        # 5. log
        span: Optional[tuple[int, int]] = None
        if txn.writes:
            writes = None
            if self.body == "data":
                writes = [(t, k, img) for g, (t, k, _, img) in sorted(txn.writes.items())]
            span = self.write_record(txn, writes)
        lv = txn.lv

        # 6. apply and release the write set
        tracer = self.tracer
        for g in sorted(txn.writes):
            table_id, key, kind, image = txn.writes[g]
            table = self.db[table_id]
            meta = txn.pinned[g]
            with self.locks.latch_for(g):
                if kind == UPDATE:
                    table.write_row(key, image)
                elif kind == INSERT:
                    table.index_insert(key, image)
                    meta.inserting = None
                else:
                    table.index_remove(key)
                if track:
                    meta.write_lv = _ewm(meta.write_lv, lv)
                meta.version += 1
                meta.owner = None
                if tracer is not None:
                    tracer.on_access(g, tid, True)
        txn.locked.clear()

        # 7. publish the final LV to the read set and unpin
        for meta in txn.pending:
            g = meta.key
            with self.locks.latch_for(g):
                if track:
                    meta.read_lv = _ewm(meta.read_lv, lv)
                if tracer is not None and g not in txn.writes:
                    tracer.on_access(g, tid, False)
                meta.pending_readers -= 1
        txn.pending.clear()
        self._unpin_all(txn)
        return self.finish(txn, span)

    def _unpin_all(self, txn: TxnContext) -> None:
        for g, meta in txn.pinned.items():
            with self.locks.latch_for(g):
                meta.pin_count -= 1
        txn.pinned.clear()

    def abort(self, txn: TxnContext) -> None:
        if txn.status is not Status.ACTIVE:
            return
        tid = txn.txn_id
        for meta in txn.locked:
            with self.locks.latch_for(meta.key):
                if meta.inserting == tid:
                    meta.inserting = None
                if meta.owner == tid:
                    meta.owner = None
        txn.locked.clear()
        for meta in txn.pending:
            with self.locks.latch_for(meta.key):
                meta.pending_readers -= 1
        txn.pending.clear()
        self._unpin_all(txn)
        txn.reads.clear()
        txn.writes.clear()
        txn.status = Status.ABORTED
