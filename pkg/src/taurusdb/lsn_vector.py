"""LSN Vector algebra and the anchor-relative compression codec.

An LSN Vector (LV) holds one byte offset per log stream.  Vectors are plain
tuples of ints so they are immutable, hashable and cheap to copy; the helpers
below check that both operands have the same dimension.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

from .errors import CorruptRecord, DimensionMismatch

MAX_DIMS = 64
U64_MAX = (1 << 64) - 1

LsnVector = tuple  # tuple[int, ...]

_HEAD = struct.Struct("<BQ")


def zero(n: int) -> tuple:
    if not 0 < n <= MAX_DIMS:
        raise ValueError(f"LSN Vector dimension must be in [1, {MAX_DIMS}], got {n}")
    return (0,) * n


def _check(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) != len(b):
        raise DimensionMismatch(f"LSN Vector length mismatch: {len(a)} != {len(b)}")


def elem_wise_max(a: Sequence[int], b: Sequence[int]) -> tuple:
    _check(a, b)
    return tuple(map(max, a, b))


def leq(a: Sequence[int], b: Sequence[int]) -> bool:
    """Partial order: True iff a[i] <= b[i] for every dimension."""
    _check(a, b)
    for x, y in zip(a, b):
        if x > y:
            return False
    return True


@dataclass(frozen=True)
class CompressedLv:
    """Dimensions of an LV that exceed the log's last anchor.

    Bit ``j`` of ``mask`` is set iff dimension ``j`` is stored; ``values`` holds
    the stored offsets in ascending dimension order.
    """

    mask: int
    values: tuple = ()

    def __post_init__(self):
        if bin(self.mask).count("1") != len(self.values):
            raise ValueError("mask popcount does not match number of values")

    def dims(self) -> list[int]:
        out, m, j = [], self.mask, 0
        while m:
            if m & 1:
                out.append(j)
            m >>= 1
            j += 1
        return out

    @property
    def nbytes(self) -> int:
        return _HEAD.size + 8 * len(self.values)

    def encode(self) -> bytes:
        k = len(self.values)
        return _HEAD.pack(k, self.mask) + struct.pack(f"<{k}Q", *self.values)

    @classmethod
    def decode(cls, buf, offset: int, n: int) -> tuple["CompressedLv", int]:
        """Parse a compressed LV at ``offset``; returns it and the offset past it."""
        if offset + _HEAD.size > len(buf):
            raise CorruptRecord("truncated compressed LV header")
        k, mask = _HEAD.unpack_from(buf, offset)
        offset += _HEAD.size
        if mask >> n:
            raise CorruptRecord(f"compressed LV names a dimension >= {n}")
        if bin(mask).count("1") != k:
            raise CorruptRecord("compressed LV count does not match its mask")
        if offset + 8 * k > len(buf):
            raise CorruptRecord("truncated compressed LV values")
        values = struct.unpack_from(f"<{k}Q", buf, offset)
        return cls(mask, values), offset + 8 * k


def compress(lv: Sequence[int], lplv: Sequence[int]) -> CompressedLv:
    _check(lv, lplv)
    mask = 0
    values = []
    for j, (v, a) in enumerate(zip(lv, lplv)):
        if v > a:
            mask |= 1 << j
            values.append(v)
    return CompressedLv(mask, tuple(values))


def decompress(c: CompressedLv, lplv: Sequence[int]) -> tuple:
    n = len(lplv)
    if c.mask >> n:
        raise CorruptRecord(f"compressed LV names a dimension >= {n}")
    out = list(lplv)
    it = iter(c.values)
    m, j = c.mask, 0
    while m:
        if m & 1:
            out[j] = next(it)
        m >>= 1
        j += 1
    return tuple(out)
