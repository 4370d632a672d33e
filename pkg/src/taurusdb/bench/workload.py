"""Workload definitions: initial database population and per-worker transaction streams."""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass

import numpy as np

from .. import procedures as P
from ..storage import Database

WORKLOADS = ("ycsb", "tpcc")


@dataclass
class WorkloadSpec:
    kind: str = "ycsb"
    rows: int = 100_000
    theta: float = 0.6
    txn_size: int = 2
    read_fraction: float = 0.5
    row_width: int = P.YCSB_ROW
    warehouses: int = 80
    items: int = 1000
    customers: int = 100
    new_order_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in WORKLOADS:
            raise ValueError(f"workload must be one of {WORKLOADS}, got {self.kind!r}")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        for name in ("read_fraction", "new_order_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.rows < 1 or self.txn_size < 1 or self.row_width < 1:
            raise ValueError("rows, txn_size and row_width must be positive")
        if self.kind == "ycsb" and self.txn_size > self.rows:
            raise ValueError("txn_size cannot exceed the number of rows")
        if self.warehouses < 1 or self.items < 16 or self.customers < 1:
            raise ValueError("tpcc needs >= 1 warehouse, >= 16 items and >= 1 customer per district")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def schema(self):
        return P.ycsb_schema(self.row_width) if self.kind == "ycsb" else P.TPCC_SCHEMA


class Zipf:
    """Finite Zipf sampler over [0, n): P(k) proportional to 1 / (k + 1) ** theta."""

    def __init__(self, n: int, theta: float, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        if theta == 0:
            self.cdf = None
        else:
            w = np.arange(1, n + 1, dtype=np.float64) ** -theta
            self.cdf = np.cumsum(w)
            self.cdf /= self.cdf[-1]

    def sample(self, size: int) -> np.ndarray:
        if self.cdf is None:
            return self.rng.integers(0, self.n, size)
        u = self.rng.random(size)
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.n - 1)


def load_database(spec: WorkloadSpec) -> Database:
    """Deterministically build the initial database for ``spec``."""
    spec.validate()
    db = Database(spec.schema)
    if spec.kind == "ycsb":
        db[P.YCSB_TABLE].load((k, P.ycsb_initial_row(spec.seed, k, spec.row_width)) for k in range(spec.rows))
        return db
    rng = random.Random(spec.seed)
    W, I, C = spec.warehouses, spec.items, spec.customers
    d_ytd = 3_000_000
    db[P.WAREHOUSE].load((w, P.W_ROW.pack(P.DISTRICTS * d_ytd, rng.randrange(2000))) for w in range(W))
    db[P.DISTRICT].load(
        (P.district_key(w, d), P.D_ROW.pack(d_ytd, rng.randrange(2000), 1))
        for w in range(W) for d in range(P.DISTRICTS))
    db[P.CUSTOMER].load(
        (P.customer_key(w, d, c, C), P.C_ROW.pack(-1000, 1000, 1, rng.randrange(5000)))
        for w in range(W) for d in range(P.DISTRICTS) for c in range(C))
    db[P.ITEM].load((i, P.I_ROW.pack(rng.randrange(100, 10000))) for i in range(I))
    db[P.STOCK].load(
        (P.stock_key(w, i, I), P.S_ROW.pack(rng.randrange(10, 101), 0, 0, 0))
        for w in range(W) for i in range(I))
    return db


class TxnStream:
    """Deterministic stream of (proc_id, params) for one worker."""

    BATCH = 4096

    def __init__(self, spec: WorkloadSpec, worker: int):
        spec.validate()
        self.spec = spec
        self.worker = worker
        self.rng = np.random.default_rng([spec.seed, worker])
        self.py = random.Random(spec.seed * 1_000_003 + worker)
        self.seq = 0
        if spec.kind == "ycsb":
            self.zipf = Zipf(spec.rows, spec.theta, self.rng)
            self._keys = iter(())

    def _key(self) -> int:
        try:
            return next(self._keys)
        except StopIteration:
            self._keys = iter(self.zipf.sample(self.BATCH).tolist())
            return next(self._keys)

    def next(self) -> tuple[int, bytes]:
        self.seq += 1
        if self.spec.kind == "ycsb":
            return self._ycsb()
        if self.py.random() < self.spec.new_order_fraction:
            return self._new_order()
        return self._payment()

    __next__ = next

    def __iter__(self):
        return self

    def _ycsb(self) -> tuple[int, bytes]:
        keys: list[int] = []
        while len(keys) < self.spec.txn_size:
            k = self._key()
            if k not in keys:
                keys.append(k)
        rf = self.spec.read_fraction
        ops = [(k, self.py.random() >= rf) for k in keys]
        return P.YCSB_RMW, P.encode_ycsb(ops)

    def _new_order(self) -> tuple[int, bytes]:
        s, r = self.spec, self.py
        w = r.randrange(s.warehouses)
        d = r.randrange(P.DISTRICTS)
        c = r.randrange(s.customers)
        count = r.randint(5, 15)
        items = r.sample(range(s.items), count)
        lines = []
        for i_id in items:
            supply = w
            if s.warehouses > 1 and r.random() < 0.01:
                supply = r.choice([x for x in range(s.warehouses) if x != w])
            lines.append((i_id, supply, r.randint(1, 10)))
        if r.random() < 0.01:
            # an unused item number makes the transaction roll back
            lines[-1] = (s.items, lines[-1][1], lines[-1][2])
        return P.TPCC_NEW_ORDER, P.encode_new_order(w, d, c, s.customers, s.items, lines)

    def _payment(self) -> tuple[int, bytes]:
        s, r = self.spec, self.py
        w = r.randrange(s.warehouses)
        d = r.randrange(P.DISTRICTS)
        c = r.randrange(s.customers)
        h_id = (self.worker << 40) | self.seq
        return P.TPCC_PAYMENT, P.encode_payment(w, d, c, s.customers, h_id, r.randint(100, 500_000))


def tpcc_consistency(db, spec: WorkloadSpec) -> list[str]:
    """Desk-scale TPC-C consistency conditions; returns human-readable violations."""
    problems = []
    W = spec.warehouses
    districts = db[P.DISTRICT].rows
    orders = db[P.ORDER]
    new_orders = db[P.NEW_ORDER]
    lines = db[P.ORDER_LINE]
    for w in range(W):
        w_ytd, _ = P.W_ROW.unpack(db[P.WAREHOUSE].rows[w])
        d_sum = sum(P.D_ROW.unpack(districts[P.district_key(w, d)])[0] for d in range(P.DISTRICTS))
        if w_ytd != d_sum:
            problems.append(f"warehouse {w}: W_YTD {w_ytd} != sum(D_YTD) {d_sum}")
        for d in range(P.DISTRICTS):
            dk = P.district_key(w, d)
            _, _, next_o = P.D_ROW.unpack(districts[dk])
            lo, hi = dk << 32, (dk << 32) | 0xFFFFFFFF
            okeys = orders.range_scan(lo, hi)
            max_o = (okeys[-1] & 0xFFFFFFFF) if okeys else 0
            if next_o - 1 != max_o:
                problems.append(f"district {w}/{d}: next_o_id {next_o} but max order id {max_o}")
            if len(okeys) != max_o:
                problems.append(f"district {w}/{d}: {len(okeys)} orders for ids up to {max_o}")
            if new_orders.count_range(lo, hi) != len(okeys):
                problems.append(f"district {w}/{d}: new_order count differs from order count")
            for ok in okeys:
                _, ol_cnt, _, _ = P.O_ROW.unpack(orders.rows[ok])
                got = lines.count_range(P.order_line_key(ok, 0), P.order_line_key(ok, 15))
                if got != ol_cnt:
                    problems.append(f"order {ok:#x}: {got} order lines, expected {ol_cnt}")
    return problems
