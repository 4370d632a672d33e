"""Strict two-phase locking with NO_WAIT and LSN Vector propagation.

Lock acquisition joins the tuple's writeLV (and readLV for writes) into the
transaction's LV.  Commit writes one log record, folds the returned end LSN
into the LV, stamps the LV into every accessed tuple and releases each lock
under the tuple's latch (early lock release), then hands the transaction to
its log manager for the asynchronous durability check.
"""

from __future__ import annotations

from typing import Optional

from . import lsn_vector as lvmod
from .errors import NoSuchRow, TxnAborted
from .log_runtime import CommitTicket
from .storage import gkey
from .txn import READ, WRITE, Access, LoggingTail, Status, TxnContext

_ewm = lvmod.elem_wise_max


class TwoPhaseLocking(LoggingTail):

    def lock(self, txn: TxnContext, table_id: int, key: int, mode: int) -> Access:
        """Acquire (or upgrade to) ``mode`` on the tuple, aborting on any conflict."""
        if txn.status is not Status.ACTIVE:
            raise RuntimeError(f"transaction {txn.txn_id} is {txn.status.value}")
        g = gkey(table_id, key)
        acc = txn.accesses.get(g)
        if acc is not None and acc.mode >= mode:
            return acc
        tid = txn.txn_id
        latch = self.locks.latch_for(g)
        with latch:
            meta = acc.meta if acc is not None else self.locks.lookup_latched(g)
            ok = meta.inserting is None or meta.inserting == tid
            if ok:
                if mode == READ:
                    ok = meta.owner is None
                    if ok:
                        meta.shared += 1
                elif acc is None:
                    ok = meta.owner is None and meta.shared == 0
                    if ok:
                        meta.owner = tid
                else:
                    # upgrade: we must be the only shared holder
                    ok = meta.owner is None and meta.shared == 1
                    if ok:
                        meta.shared = 0
                        meta.owner = tid
            if ok:
                if acc is None:
                    meta.pin_count += 1
                if self.track_lv:
                    lv = _ewm(txn.lv, meta.write_lv)
                    if mode == WRITE:
                        lv = _ewm(lv, meta.read_lv)
                    txn.lv = lv
        if not ok:
            self.abort(txn)
            raise TxnAborted("lock conflict")
        if acc is None:
            acc = Access(table_id, key, g, meta, mode)
            txn.accesses[g] = acc
            txn.order.append(acc)
        else:
            acc.mode = mode
        return acc

    # ------------------------------------------------------------ row ops
    def read(self, txn: TxnContext, table_id: int, key: int, for_update: bool = False) -> bytes:
        table = self.db[table_id]
        g = gkey(table_id, key)
        own = txn.accesses.get(g)
        if own is None and key not in table:
            raise NoSuchRow(f"{table.spec.name}[{key}]")
        acc = self.lock(txn, table_id, key, WRITE if for_update else READ)
        if acc.inserted:
            return acc.image
        if acc.deleted:
            raise NoSuchRow(f"{table.spec.name}[{key}]")
        return table.read_row(key)

    def write(self, txn: TxnContext, table_id: int, key: int, payload) -> None:
        table = self.db[table_id]
        acc = self.lock(txn, table_id, key, WRITE)
        if acc.inserted:
            acc.image = bytes(payload)
            return
        if acc.deleted:
            raise NoSuchRow(f"{table.spec.name}[{key}]")
        if acc.before is None:
            acc.before = table.read_row(key)
        table.write_row(key, payload)
        acc.written = True

    def insert_row(self, txn: TxnContext, table_id: int, key: int, payload) -> None:
        table = self.db[table_id]
        if len(payload) != table.spec.row_width:
            raise ValueError(f"{table.spec.name}: bad row width {len(payload)}")
        g = gkey(table_id, key)
        if key in table or g in txn.accesses:
            self.abort(txn)
            raise TxnAborted("duplicate key")
        acc = self.lock(txn, table_id, key, WRITE)
        with self.locks.latch_for(g):
            dup = key in table
            if not dup:
                acc.meta.inserting = txn.txn_id
        if dup:
            self.abort(txn)
            raise TxnAborted("duplicate key")
        acc.inserted = True
        acc.written = True
        acc.image = bytes(payload)

    def delete_row(self, txn: TxnContext, table_id: int, key: int) -> None:
        table = self.db[table_id]
        g = gkey(table_id, key)
        own = txn.accesses.get(g)
        if own is not None and own.inserted:
            raise ValueError("deleting a row inserted by the same transaction is not supported")
        if own is None and key not in table:
            self.abort(txn)
            raise TxnAborted("delete of absent key")
        acc = self.lock(txn, table_id, key, WRITE)
        if acc.deleted or key not in table:
            self.abort(txn)
            raise TxnAborted("delete of absent key")
        if acc.before is None:
            acc.before = table.read_row(key)
        acc.deleted = True
        acc.written = True

    def scan(self, txn: TxnContext, table_id: int, low: int, high: int) -> list[tuple[int, bytes]]:
        """Shared-lock every row in [low, high]; the row count is re-checked at commit."""
        table = self.db[table_id]
        keys = table.range_scan(low, high)
        out = []
        for key in keys:
            acc = self.lock(txn, table_id, key, READ)
            if acc.deleted:
                continue
            if acc.inserted:
                out.append((key, acc.image))
                continue
            row = table.rows.get(key)
            if row is not None:
                out.append((key, row))
        txn.scan_notes.append((table_id, low, high, len(keys)))
        return out

    # ------------------------------------------------------------ commit/abort
    def _data_writes(self, txn: TxnContext):
        out = []
        for acc in txn.order:
            if not acc.written:
                continue
            if acc.deleted:
                out.append((acc.table_id, acc.key, None))
            elif acc.inserted:
                out.append((acc.table_id, acc.key, acc.image))
            else:
                out.append((acc.table_id, acc.key, self.db[acc.table_id].rows[acc.key]))
        return out

    def commit(self, txn: TxnContext) -> CommitTicket:
        if txn.status is not Status.ACTIVE:
            raise RuntimeError(f"transaction {txn.txn_id} is {txn.status.value}")
        for table_id, low, high, count in txn.scan_notes:
            if self.db[table_id].count_range(low, high) != count:
                self.abort(txn)
                raise TxnAborted("phantom")

        writer = any(a.written for a in txn.order)
        span: Optional[tuple[int, int]] = None
        if writer:
            writes = self._data_writes(txn) if self.body == "data" else None
            span = self.write_record(txn, writes)

        lv = txn.lv
        tid = txn.txn_id
        tracer = self.tracer
        for acc in txn.order:
            meta = acc.meta
            table = self.db[acc.table_id]
            with self.locks.latch_for(acc.gkey):
                if acc.written:
                    if acc.deleted:
                        table.index_remove(acc.key)
                    if not acc.inserted and self.track_lv:
                        # txn.lv already dominates writeLV: it was joined at lock time
                        meta.write_lv = lv
                elif self.track_lv:
                    meta.read_lv = _ewm(meta.read_lv, lv)
                if meta.owner == tid:
                    meta.owner = None
                else:
                    meta.shared -= 1
                if tracer is not None:
                    tracer.on_access(acc.gkey, tid, acc.written)
                if acc.inserted:
                    if self.track_lv:
                        meta.write_lv = lv
                    table.index_insert(acc.key, acc.image)
                    meta.inserting = None
                meta.pin_count -= 1
        txn.accesses.clear()
        txn.order.clear()
        return self.finish(txn, span)

    def abort(self, txn: TxnContext) -> None:
        if txn.status is not Status.ACTIVE:
            return
        tid = txn.txn_id
        for acc in reversed(txn.order):
            meta = acc.meta
            with self.locks.latch_for(acc.gkey):
                if acc.before is not None and not acc.deleted:
                    self.db[acc.table_id].write_row(acc.key, acc.before)
                if acc.inserted and meta.inserting == tid:
                    meta.inserting = None
                if meta.owner == tid:
                    meta.owner = None
                else:
                    meta.shared -= 1
                meta.pin_count -= 1
        txn.accesses.clear()
        txn.order.clear()
        txn.status = Status.ABORTED
