"""Shadow conflict tracker: records conflict edges independently of the LVs.

The engine calls ``on_access`` under the tuple's latch at the moment an
access becomes visible to conflicting transactions, so for each key the
calls arrive in conflict order.  From that stream the tracker derives every
RAW, WAR and WAW edge and later checks each one against the LVs the
transactions committed with.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from ..txn import Tracer


@dataclass
class Committed:
    log_id: int
    end: int | None
    lv: tuple


class ConflictTracker(Tracer):

    def __init__(self):
        self._keys: dict[int, list] = {}
        self.edges: list[tuple] = []
        self.committed: dict = {}
        self._lock = threading.Lock()

    def on_access(self, g: int, txn_id, is_write: bool) -> None:
        state = self._keys.get(g)
        if state is None:
            state = self._keys.setdefault(g, [None, []])
        last_writer, readers = state
        if is_write:
            if last_writer is not None and last_writer != txn_id:
                self.edges.append((last_writer, txn_id, "waw"))
            for r in readers:
                if r != txn_id:
                    self.edges.append((r, txn_id, "war"))
            state[0] = txn_id
            state[1] = []
        else:
            if last_writer is not None and last_writer != txn_id:
                self.edges.append((last_writer, txn_id, "raw"))
            readers.append(txn_id)

    def on_commit(self, txn, ticket) -> None:
        with self._lock:
            self.committed[txn.txn_id] = Committed(ticket.log_id, ticket.end, tuple(ticket.lv))

    def violations(self) -> tuple[int, list]:
        """(edges checked, violating edges) for edges whose source wrote a log record."""
        checked, bad = 0, []
        for t1, t2, kind in self.edges:
            a, b = self.committed.get(t1), self.committed.get(t2)
            if a is None or b is None or a.end is None:
                continue
            checked += 1
            if b.lv[a.log_id] < a.end:
                bad.append((t1, t2, kind, a.end, b.lv))
        return checked, bad
