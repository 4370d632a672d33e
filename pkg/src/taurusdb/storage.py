"""In-memory tables and the lock table that carries per-tuple LSN Vectors.

Tuple LVs live only in the lock table.  An entry is created on first access
with both LVs set to ``max(PLV - delta, 0)`` and may be evicted once nobody
pins it and both LVs trail the current PLV by at least ``delta`` in every
dimension.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Optional

from sortedcontainers import SortedList

from .errors import DuplicateKey, NoSuchRow

DEFAULT_DELTA = 4 << 20
DEFAULT_CHAIN_LIMIT = 8


def gkey(table_id: int, key: int) -> int:
    """Lock-table key: table id in the bits above the 64-bit primary key."""
    return (table_id << 64) | key


@dataclass(frozen=True)
class TableSpec:
    table_id: int
    name: str
    row_width: int


class Table:
    """Primary-key hash map plus an ordered index for range scans.

    The row map and the index change together under one latch, so point
    lookups and scans never observe a half-applied insert or remove.
    """

    def __init__(self, spec: TableSpec):
        self.spec = spec
        self.rows: dict[int, bytes] = {}
        self.index = SortedList()
        self.latch = threading.Lock()

    def _check_width(self, payload) -> None:
        if len(payload) != self.spec.row_width:
            raise ValueError(
                f"{self.spec.name}: row width is {self.spec.row_width}, got {len(payload)}"
            )

    def load(self, items: Iterable[tuple[int, bytes]]) -> None:
        """Bulk load, used for the initial population only."""
        with self.latch:
            for key, payload in items:
                self._check_width(payload)
                self.rows[key] = bytes(payload)
            self.index = SortedList(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, key: int) -> bool:
        return key in self.rows

    def read_row(self, key: int) -> bytes:
        try:
            return self.rows[key]
        except KeyError:
            raise NoSuchRow(f"{self.spec.name}[{key}]") from None

    def write_row(self, key: int, payload) -> None:
        self._check_width(payload)
        with self.latch:
            if key not in self.rows:
                raise NoSuchRow(f"{self.spec.name}[{key}]")
            self.rows[key] = bytes(payload)

    def index_insert(self, key: int, payload) -> None:
        self._check_width(payload)
        with self.latch:
            if key in self.rows:
                raise DuplicateKey(f"{self.spec.name}[{key}]")
            self.rows[key] = bytes(payload)
            self.index.add(key)

    def index_remove(self, key: int) -> None:
        with self.latch:
            if key not in self.rows:
                raise NoSuchRow(f"{self.spec.name}[{key}]")
            del self.rows[key]
            self.index.remove(key)

    def upsert(self, key: int, payload) -> None:
        """Blind overwrite used by data-log replay."""
        self._check_width(payload)
        with self.latch:
            if key not in self.rows:
                self.index.add(key)
            self.rows[key] = bytes(payload)

    def discard(self, key: int) -> None:
        with self.latch:
            if self.rows.pop(key, None) is not None:
                self.index.remove(key)

    def range_scan(self, low: int, high: int) -> list[int]:
        if low > high:
            return []
        with self.latch:
            return list(self.index.irange(low, high))

    def count_range(self, low: int, high: int) -> int:
        if low > high:
            return 0
        with self.latch:
            idx = self.index
            return idx.bisect_right(high) - idx.bisect_left(low)


class Database:
    def __init__(self, specs: Iterable[TableSpec]):
        self.tables: dict[int, Table] = {}
        for s in specs:
            if s.table_id in self.tables or s.table_id >= 0x8000:
                raise ValueError(f"bad or duplicate table id {s.table_id}")
            self.tables[s.table_id] = Table(s)

    def __getitem__(self, table_id: int) -> Table:
        return self.tables[table_id]

    @property
    def widths(self) -> dict[int, int]:
        return {tid: t.spec.row_width for tid, t in self.tables.items()}

    def items(self):
        """All (table_id, key, payload) in (table, key) order."""
        for tid in sorted(self.tables):
            t = self.tables[tid]
            for key in t.index:
                yield tid, key, t.rows[key]


class TupleMeta:
    """Lock state and LVs of one active tuple.

    ``shared`` counts shared holders, ``owner`` is the exclusive holder's txn
    id.  ``pin_count`` counts transactions that currently reference the entry;
    pinned entries are never evicted.
    """

    __slots__ = (
        "key", "read_lv", "write_lv", "shared", "owner", "pin_count",
        "version", "pending_readers", "inserting",
    )

    def __init__(self, key: int, lv: tuple):
        self.key = key
        self.read_lv = lv
        self.write_lv = lv
        self.shared = 0
        self.owner = None
        self.pin_count = 0
        self.version = 0
        self.pending_readers = 0
        self.inserting = None

    @property
    def lock_state(self):
        if self.owner is not None:
            return ("exclusive", self.owner)
        if self.shared:
            return ("shared", self.shared)
        return ("free", None)

    def is_free(self) -> bool:
        return self.owner is None and self.shared == 0

    def advance_read_dim(self, d: int, value: int) -> None:
        """Raise ``read_lv[d]`` to ``value`` if smaller.  Caller holds the bucket latch."""
        rl = self.read_lv
        if rl[d] < value:
            self.read_lv = rl[:d] + (value,) + rl[d + 1:]


class LockTable:
    """Bucketed map of gkey -> TupleMeta, one latch per bucket.

    ``plv`` is the engine's shared PLV list, read as one snapshot per check.
    ``delta=None`` disables eviction and initializes fresh entries to zero.
    """

    def __init__(self, n: int, plv: list, delta: Optional[int] = DEFAULT_DELTA,
                 buckets: int = 1024, chain_limit: int = DEFAULT_CHAIN_LIMIT):
        if buckets & (buckets - 1):
            raise ValueError("bucket count must be a power of two")
        self.n = n
        self.plv = plv
        self.delta = delta
        self.chain_limit = chain_limit
        self._mask = buckets - 1
        self._buckets: list[dict[int, TupleMeta]] = [{} for _ in range(buckets)]
        self._latches = [threading.Lock() for _ in range(buckets)]
        # per-bucket size that triggers the next eviction attempt; doubled when
        # an attempt frees little, so inserts stay amortized O(1)
        self._limits = [chain_limit] * buckets
        self._cursor = 0
        self.evictions = 0

    def latch_for(self, key: int) -> threading.Lock:
        return self._latches[hash(key) & self._mask]

    def _fresh_lv(self) -> tuple:
        if self.delta is None:
            return (0,) * self.n
        d = self.delta
        return tuple(p - d if p > d else 0 for p in tuple(self.plv))

    def lookup_latched(self, key: int) -> TupleMeta:
        """Get-or-insert; the caller must hold ``latch_for(key)``."""
        b = hash(key) & self._mask
        bucket = self._buckets[b]
        meta = bucket.get(key)
        if meta is None:
            if len(bucket) >= self._limits[b] and self.delta is not None:
                self._evict_bucket(bucket)
                self._limits[b] = max(self.chain_limit, 2 * len(bucket))
            meta = bucket[key] = TupleMeta(key, self._fresh_lv())
        return meta

    def get_or_insert_meta(self, key: int) -> TupleMeta:
        with self.latch_for(key):
            return self.lookup_latched(key)

    def pin(self, key: int) -> TupleMeta:
        """Get-or-insert and pin the entry so it cannot be evicted."""
        with self.latch_for(key):
            meta = self.lookup_latched(key)
            meta.pin_count += 1
            return meta

    def unpin(self, meta: TupleMeta) -> None:
        with self.latch_for(meta.key):
            meta.pin_count -= 1

    def get(self, key: int) -> Optional[TupleMeta]:
        return self._buckets[hash(key) & self._mask].get(key)

    def __contains__(self, key: int) -> bool:
        return key in self._buckets[hash(key) & self._mask]

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets)

    def _evictable(self, meta: TupleMeta, plv: tuple) -> bool:
        if (meta.pin_count or meta.owner is not None or meta.shared
                or meta.pending_readers or meta.inserting is not None):
            return False
        d = self.delta
        for p, r, w in zip(plv, meta.read_lv, meta.write_lv):
            if p - r < d or p - w < d:
                return False
        return True

    def try_evict(self, key: int) -> bool:
        """Evict ``key`` if allowed.  Caller holds the bucket latch."""
        if self.delta is None:
            return False
        bucket = self._buckets[hash(key) & self._mask]
        meta = bucket.get(key)
        if meta is None or not self._evictable(meta, tuple(self.plv)):
            return False
        del bucket[key]
        self.evictions += 1
        return True

    def _evict_bucket(self, bucket: dict) -> int:
        plv = tuple(self.plv)
        victims = [k for k, m in bucket.items() if self._evictable(m, plv)]
        for k in victims:
            del bucket[k]
        self.evictions += len(victims)
        return len(victims)

    def sweep(self, budget: Optional[int] = None) -> int:
        """Try to evict entries bucket by bucket; returns the number evicted.

        With ``budget`` the sweep stops after examining about that many
        entries and the next call resumes where this one stopped.
        """
        if self.delta is None:
            return 0
        total = examined = 0
        for _ in range(len(self._buckets)):
            b = self._cursor
            self._cursor = (b + 1) & self._mask
            bucket = self._buckets[b]
            if bucket:
                with self._latches[b]:
                    examined += len(bucket)
                    total += self._evict_bucket(bucket)
                    self._limits[b] = max(self.chain_limit, 2 * len(bucket))
            if budget is not None and examined >= budget:
                break
        return total

    def bucket_volume(self) -> float:
        used = [len(b) for b in self._buckets if b]
        return sum(used) / len(used) if used else 0.0
