"""Independent checking code for crash experiments.

Nothing here reuses the engine's log decoder or recovery: the frame walk,
the admission rule and the serial replay are written against the on-disk
format directly, so a bug in the engine's reader cannot hide itself.
"""

from __future__ import annotations

import bisect
import graphlib
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

from .. import procedures as P

_HDR = struct.Struct("<BII")
_KINDS = {1, 2, 3}


@dataclass
class Frame:
    kind: int
    start: int
    end: int
    body: bytes


def frame_walk(buf: bytes) -> tuple[list[Frame], int]:
    """Whole, checksum-valid frames from the start of ``buf`` and the intact length."""
    frames, off = [], 0
    while off + _HDR.size <= len(buf):
        kind, size, crc = _HDR.unpack_from(buf, off)
        end = off + _HDR.size + size
        if kind not in _KINDS or end > len(buf):
            break
        body = bytes(buf[off + _HDR.size:end])
        if zlib.crc32(body) != crc:
            break
        frames.append(Frame(kind, off, end, body))
        off = end
    return frames, off


def _lv_field(body: bytes, n: int) -> tuple[dict[int, int], int]:
    count = body[0]
    (mask,) = struct.unpack_from("<Q", body, 1)
    dims = [j for j in range(64) if mask >> j & 1]
    if len(dims) != count or any(j >= n for j in dims):
        raise ValueError("malformed LV field")
    vals = struct.unpack_from(f"<{count}Q", body, 9)
    return dict(zip(dims, vals)), 9 + 8 * count


def anchor_plv(frame: Frame, n: int) -> tuple:
    _, pos = _lv_field(frame.body, n)
    return struct.unpack_from(f"<{n}Q", frame.body, pos)


@dataclass
class LoggedTxn:
    log_id: int
    start: int
    end: int
    kind: int
    lv: tuple
    body: bytes = field(repr=False, default=b"")


def admissible(buffers: list[bytes], track_lv: bool = True) -> dict[tuple[int, int], LoggedTxn]:
    """Transactions recovery must restore, keyed by (log id, end LSN).

    Per log, the maximal prefix of transaction records whose full LV (stored
    dimensions over the latest anchor) is covered by the intact lengths.
    """
    n = len(buffers)
    walks = [frame_walk(b) for b in buffers]
    elv = [length for _, length in walks]
    out: dict[tuple[int, int], LoggedTxn] = {}
    for i, (frames, _) in enumerate(walks):
        anchor = [0] * n
        for f in frames:
            stored, pos = _lv_field(f.body, n)
            if f.kind == 3:
                anchor = list(struct.unpack_from(f"<{n}Q", f.body, pos))
                continue
            if track_lv:
                lv = tuple(stored.get(j, anchor[j]) for j in range(n))
            else:
                lv = (f.start,)
            if any(v > e for v, e in zip(lv, elv)):
                break
            out[(i, f.end)] = LoggedTxn(i, f.start, f.end, f.kind, lv, f.body[pos:])
    return out


def dependency_order(txns: dict[tuple[int, int], LoggedTxn], n: int) -> list[tuple[int, int]]:
    """Topologically sort the graph the LVs induce; raises graphlib.CycleError on a cycle.

    T depends on every record of log j ending at or before ``T.lv[j]``.  That
    is expressed with one edge from the latest such record plus an edge from
    each record to its successor on the same log, which has the same cycles.
    """
    per_log: list[list[int]] = [[] for _ in range(n)]
    for (i, end) in sorted(txns):
        per_log[i].append(end)
    ts = graphlib.TopologicalSorter()
    for (i, end), t in txns.items():
        ts.add((i, end))
        for j, bound in enumerate(t.lv):
            ends = per_log[j]
            k = bisect.bisect_right(ends, bound) - 1
            if k >= 0 and (j, ends[k]) != (i, end):
                ts.add((i, end), (j, ends[k]))
    for i, ends in enumerate(per_log):
        for a, b in zip(ends, ends[1:]):
            ts.add((i, b), (i, a))
    return list(ts.static_order())


# ---------------------------------------------------------------- replay

class DictStore:
    """Plain dict store keyed by (table, key) that stored procedures can run against."""

    def __init__(self, items=()):
        self.rows = {(t, k): bytes(v) for t, k, v in items}

    def read(self, table_id, key, for_update=False):
        return self.rows[(table_id, key)]

    def write(self, table_id, key, payload):
        if (table_id, key) not in self.rows:
            raise KeyError((table_id, key))
        self.rows[(table_id, key)] = bytes(payload)

    def insert(self, table_id, key, payload):
        if (table_id, key) in self.rows:
            raise KeyError((table_id, key))
        self.rows[(table_id, key)] = bytes(payload)

    def delete(self, table_id, key):
        del self.rows[(table_id, key)]

    def scan(self, table_id, low, high):
        return sorted((k, v) for (t, k), v in self.rows.items() if t == table_id and low <= k <= high)


def apply(store: DictStore, txn: LoggedTxn, widths: dict[int, int]) -> None:
    body = txn.body
    if txn.kind == 2:
        (proc_id,) = struct.unpack_from("<H", body, 0)
        P.REGISTRY[proc_id].fn(store, body[2:])
        return
    (count,) = struct.unpack_from("<I", body, 0)
    pos = 4
    for _ in range(count):
        table, key = struct.unpack_from("<HQ", body, pos)
        pos += 10
        if table & 0x8000:
            store.rows.pop((table & 0x7FFF, key), None)
            continue
        w = widths[table]
        store.rows[(table, key)] = body[pos:pos + w]
        pos += w


def digest(items) -> str:
    """sha256 over the sorted (table, key, payload hash) stream."""
    h = hashlib.sha256()
    for table, key, payload in sorted(items):
        h.update(struct.pack("<HQ", table, key))
        h.update(hashlib.blake2b(payload, digest_size=16).digest())
    return h.hexdigest()


def store_items(store: DictStore):
    return ((t, k, v) for (t, k), v in store.rows.items())


def read_trace(path) -> list[tuple[int, int, int]]:
    """Commit-order trace lines: (log id, start, end) in the order records were reserved."""
    out = []
    if not os.path.exists(path):
        return out
    with open(path, "rb") as f:
        for line in f:
            if not line.endswith(b"\n"):
                break
            log_id, start, end = map(int, line.split())
            out.append((log_id, start, end))
    return out


def read_ledger(path) -> list[dict]:
    out = []
    if not os.path.exists(path):
        return out
    with open(path, "rb") as f:
        for line in f:
            if not line.endswith(b"\n"):
                break
            out.append(json.loads(line))
    return out


def serial_replay(initial_items, txns: dict[tuple[int, int], LoggedTxn],
                  trace: list[tuple[int, int, int]], widths: dict[int, int]) -> DictStore:
    """Replay the admissible transactions one at a time in original commit order."""
    store = DictStore(initial_items)
    seen = 0
    for log_id, _, end in trace:
        t = txns.get((log_id, end))
        if t is None:
            continue
        apply(store, t, widths)
        seen += 1
    if seen != len(txns):
        raise ValueError(f"trace covers {seen} of {len(txns)} admissible transactions")
    return store
