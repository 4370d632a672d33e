"""Stored procedures, their parameter codecs, and table schemas.

Procedures must be deterministic functions of (parameters, database state):
command-log replay re-executes them and expects the original effects.  The
registry is versioned; a log directory records the version it was written
with and recovery refuses a mismatch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable

from .errors import UserAbort
from .storage import TableSpec

REGISTRY_VERSION = 1


@dataclass(frozen=True)
class Procedure:
    proc_id: int
    name: str
    fn: Callable


REGISTRY: dict[int, Procedure] = {}


def _register(proc_id: int, name: str):
    def deco(fn):
        if proc_id in REGISTRY:
            raise ValueError(f"duplicate procedure id {proc_id}")
        REGISTRY[proc_id] = Procedure(proc_id, name, fn)
        return fn
    return deco


def run(tx, proc_id: int, params: bytes):
    return REGISTRY[proc_id].fn(tx, params)


# ---------------------------------------------------------------- YCSB

YCSB_TABLE = 0
YCSB_ROW = 1000  # default row width: 10 fields of 100 bytes
YCSB_RMW = 1

_YHEAD = struct.Struct("<H")
_YOP = struct.Struct("<QB")


def ycsb_schema(row_width: int = YCSB_ROW) -> tuple:
    return (TableSpec(YCSB_TABLE, "usertable", row_width),)


def encode_ycsb(ops) -> bytes:
    """``ops`` is a sequence of (key, is_write)."""
    return _YHEAD.pack(len(ops)) + b"".join(_YOP.pack(k, int(w)) for k, w in ops)


def decode_ycsb(params: bytes) -> list[tuple[int, bool]]:
    (count,) = _YHEAD.unpack_from(params, 0)
    return [
        (k, bool(w)) for k, w in
        (_YOP.unpack_from(params, _YHEAD.size + i * _YOP.size) for i in range(count))
    ]


def ycsb_initial_row(seed: int, key: int, row_width: int = YCSB_ROW) -> bytes:
    return hashlib.shake_128(struct.pack("<qQ", seed, key)).digest(row_width)


@_register(YCSB_RMW, "ycsb_rmw")
def ycsb_rmw(tx, params: bytes) -> None:
    """Read every key in order; each written value hashes all values read so far.

    The chaining makes the final state depend on the order conflicting
    transactions are replayed in.
    """
    acc = hashlib.shake_128(params)
    for key, is_write in decode_ycsb(params):
        row = tx.read(YCSB_TABLE, key, for_update=is_write)
        acc.update(row)
        if is_write:
            tx.write(YCSB_TABLE, key, acc.digest(len(row)))


# ---------------------------------------------------------------- TPC-C
# Desk-scale schema: Payment and New-Order only, integer-coded columns.

WAREHOUSE, DISTRICT, CUSTOMER, ITEM, STOCK, ORDER, NEW_ORDER, ORDER_LINE, HISTORY = range(1, 10)

DISTRICTS = 10

W_ROW = struct.Struct("<qI")        # ytd, tax
D_ROW = struct.Struct("<qII")       # ytd, tax, next_o_id
C_ROW = struct.Struct("<qqII")      # balance, ytd_payment, payment_cnt, discount
I_ROW = struct.Struct("<I")         # price
S_ROW = struct.Struct("<IIqI")      # quantity, order_cnt, ytd, remote_cnt
O_ROW = struct.Struct("<IIII")      # c_id, ol_cnt, all_local, o_id
NO_ROW = struct.Struct("<I")        # o_id
OL_ROW = struct.Struct("<IIIq")     # i_id, supply_w, quantity, amount
H_ROW = struct.Struct("<QIq")       # customer key, district key, amount

TPCC_SCHEMA = (
    TableSpec(WAREHOUSE, "warehouse", W_ROW.size),
    TableSpec(DISTRICT, "district", D_ROW.size),
    TableSpec(CUSTOMER, "customer", C_ROW.size),
    TableSpec(ITEM, "item", I_ROW.size),
    TableSpec(STOCK, "stock", S_ROW.size),
    TableSpec(ORDER, "orders", O_ROW.size),
    TableSpec(NEW_ORDER, "new_order", NO_ROW.size),
    TableSpec(ORDER_LINE, "order_line", OL_ROW.size),
    TableSpec(HISTORY, "history", H_ROW.size),
)

TPCC_NEW_ORDER = 2
TPCC_PAYMENT = 3


def district_key(w: int, d: int) -> int:
    return w * DISTRICTS + d


def customer_key(w: int, d: int, c: int, per_district: int) -> int:
    return district_key(w, d) * per_district + c


def stock_key(w: int, i: int, items: int) -> int:
    return w * items + i


def order_key(w: int, d: int, o_id: int) -> int:
    return (district_key(w, d) << 32) | o_id


def order_line_key(okey: int, number: int) -> int:
    return (okey << 4) | number


_NO_HEAD = struct.Struct("<IIIIIB")  # w, d, c, customers/district, items, line count
_NO_LINE = struct.Struct("<III")     # i_id, supply_w, quantity
_PAY = struct.Struct("<IIIIQq")      # w, d, c, customers/district, h_id, amount


def encode_new_order(w, d, c, per_district, items, lines) -> bytes:
    return _NO_HEAD.pack(w, d, c, per_district, items, len(lines)) + b"".join(
        _NO_LINE.pack(*line) for line in lines)


def decode_new_order(params: bytes):
    w, d, c, per_district, items, count = _NO_HEAD.unpack_from(params, 0)
    lines = [_NO_LINE.unpack_from(params, _NO_HEAD.size + k * _NO_LINE.size) for k in range(count)]
    return w, d, c, per_district, items, lines


def encode_payment(w, d, c, per_district, h_id, amount) -> bytes:
    return _PAY.pack(w, d, c, per_district, h_id, amount)


@_register(TPCC_NEW_ORDER, "tpcc_new_order")
def new_order(tx, params: bytes) -> None:
    w, d, c, per_district, items, lines = decode_new_order(params)
    tx.read(WAREHOUSE, w)
    dk = district_key(w, d)
    d_ytd, d_tax, next_o = D_ROW.unpack(tx.read(DISTRICT, dk, for_update=True))
    tx.write(DISTRICT, dk, D_ROW.pack(d_ytd, d_tax, next_o + 1))
    tx.read(CUSTOMER, customer_key(w, d, c, per_district))

    all_local = int(all(sw == w for _, sw, _ in lines))
    okey = order_key(w, d, next_o)
    tx.insert(ORDER, okey, O_ROW.pack(c, len(lines), all_local, next_o))
    tx.insert(NEW_ORDER, okey, NO_ROW.pack(next_o))
    for number, (i_id, supply_w, qty) in enumerate(lines, 1):
        if i_id >= items:
            # TPC-C's 1% rollback case: an unused item number
            raise UserAbort("invalid item")
        (price,) = I_ROW.unpack(tx.read(ITEM, i_id))
        sk = stock_key(supply_w, i_id, items)
        s_qty, s_cnt, s_ytd, s_remote = S_ROW.unpack(tx.read(STOCK, sk, for_update=True))
        s_qty = s_qty - qty if s_qty >= qty + 10 else s_qty - qty + 91
        tx.write(STOCK, sk, S_ROW.pack(s_qty, s_cnt + 1, s_ytd + qty, s_remote + (supply_w != w)))
        tx.insert(ORDER_LINE, order_line_key(okey, number),
                  OL_ROW.pack(i_id, supply_w, qty, qty * price))


@_register(TPCC_PAYMENT, "tpcc_payment")
def payment(tx, params: bytes) -> None:
    w, d, c, per_district, h_id, amount = _PAY.unpack(params)
    w_ytd, w_tax = W_ROW.unpack(tx.read(WAREHOUSE, w, for_update=True))
    tx.write(WAREHOUSE, w, W_ROW.pack(w_ytd + amount, w_tax))
    dk = district_key(w, d)
    d_ytd, d_tax, next_o = D_ROW.unpack(tx.read(DISTRICT, dk, for_update=True))
    tx.write(DISTRICT, dk, D_ROW.pack(d_ytd + amount, d_tax, next_o))
    ck = customer_key(w, d, c, per_district)
    bal, ytd, cnt, disc = C_ROW.unpack(tx.read(CUSTOMER, ck, for_update=True))
    tx.write(CUSTOMER, ck, C_ROW.pack(bal - amount, ytd + amount, cnt + 1, disc))
    tx.insert(HISTORY, h_id, H_ROW.pack(ck, dk, amount))
