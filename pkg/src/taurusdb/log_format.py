"""On-disk log record framing.

Every frame is ``type:u8 | body_len:u32 | crc32:u32`` followed by ``body_len``
bytes: a compressed LV and then the type-specific body.  The checksum covers
everything after the 9-byte header.  All integers are little-endian.

Body layouts:

* data:    ``count:u32`` then ``count`` x (``table:u16 key:u64 after-image``).
  The after-image length is the table's fixed row width.  A set high bit in
  ``table`` marks a delete, which carries no after-image.
* command: ``proc_id:u16`` then the parameter bytes.
* anchor:  ``n`` x ``u64`` holding the full PLV.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional

from .errors import CorruptRecord
from .lsn_vector import CompressedLv

DATA = 1
COMMAND = 2
ANCHOR = 3
KINDS = {DATA: "data", COMMAND: "command", ANCHOR: "anchor"}

HEADER = struct.Struct("<BII")
HEADER_SIZE = HEADER.size
DELETE_FLAG = 0x8000

_COUNT = struct.Struct("<I")
_WRITE = struct.Struct("<HQ")
_PROC = struct.Struct("<H")

EMPTY_LV = CompressedLv(0, ())


def _frame(kind: int, payload: bytes) -> bytes:
    return HEADER.pack(kind, len(payload), zlib.crc32(payload)) + payload


def encode_data(clv: CompressedLv, writes) -> bytes:
    """``writes`` is an iterable of (table_id, key, after_image or None for delete)."""
    parts = [clv.encode(), b""]
    count = 0
    for table_id, key, image in writes:
        if image is None:
            parts.append(_WRITE.pack(table_id | DELETE_FLAG, key))
        else:
            parts.append(_WRITE.pack(table_id, key))
            parts.append(image)
        count += 1
    parts[1] = _COUNT.pack(count)
    return _frame(DATA, b"".join(parts))


def encode_command(clv: CompressedLv, proc_id: int, params: bytes) -> bytes:
    return _frame(COMMAND, clv.encode() + _PROC.pack(proc_id) + params)


def encode_anchor(plv) -> bytes:
    return _frame(ANCHOR, EMPTY_LV.encode() + struct.pack(f"<{len(plv)}Q", *plv))


@dataclass
class Record:
    kind: int
    start: int
    end: int
    clv: CompressedLv
    writes: list = field(default_factory=list)
    proc_id: int = 0
    params: bytes = b""
    plv: Optional[tuple] = None

    @property
    def metadata_bytes(self) -> int:
        """Dependency metadata carried by this record (LV bytes, plus the PLV for anchors)."""
        extra = 8 * len(self.plv) if self.plv is not None else 0
        return self.clv.nbytes + extra


def frame_length(buf, offset: int) -> Optional[int]:
    """Length of an intact, checksum-valid frame at ``offset``, else None."""
    if offset + HEADER_SIZE > len(buf):
        return None
    kind, body_len, crc = HEADER.unpack_from(buf, offset)
    if kind not in KINDS:
        return None
    end = offset + HEADER_SIZE + body_len
    if end > len(buf):
        return None
    if zlib.crc32(memoryview(buf)[offset + HEADER_SIZE:end]) != crc:
        return None
    return HEADER_SIZE + body_len


def decode(buf, offset: int, n: int, widths: Mapping[int, int]) -> Record:
    """Decode one frame; raises CorruptRecord if it is torn or malformed."""
    length = frame_length(buf, offset)
    if length is None:
        raise CorruptRecord(f"no intact frame at offset {offset}")
    kind = buf[offset]
    end = offset + length
    clv, pos = CompressedLv.decode(buf, offset + HEADER_SIZE, n)
    rec = Record(kind, offset, end, clv)
    if kind == DATA:
        (count,) = _COUNT.unpack_from(buf, pos)
        pos += _COUNT.size
        writes = []
        for _ in range(count):
            tid, key = _WRITE.unpack_from(buf, pos)
            pos += _WRITE.size
            if tid & DELETE_FLAG:
                writes.append((tid & ~DELETE_FLAG, key, None))
                continue
            try:
                w = widths[tid]
            except KeyError:
                raise CorruptRecord(f"unknown table id {tid}") from None
            writes.append((tid, key, bytes(buf[pos:pos + w])))
            pos += w
        rec.writes = writes
    elif kind == COMMAND:
        (rec.proc_id,) = _PROC.unpack_from(buf, pos)
        rec.params = bytes(buf[pos + _PROC.size:end])
        pos = end
    else:
        rec.plv = struct.unpack_from(f"<{n}Q", buf, pos)
        pos += 8 * n
    if pos != end:
        raise CorruptRecord(f"record at {offset} has {end - pos} trailing bytes")
    return rec


def iter_records(buf, n: int, widths: Mapping[int, int], limit: Optional[int] = None) -> Iterator[Record]:
    """Yield records from the start of ``buf`` until ``limit`` or the first bad frame."""
    stop = len(buf) if limit is None else limit
    off = 0
    while off < stop:
        try:
            rec = decode(buf, off, n, widths)
        except (CorruptRecord, struct.error):
            return
        if rec.end > stop:
            return
        yield rec
        off = rec.end


def intact_prefix(buf) -> int:
    """Length of the longest prefix of whole checksum-valid frames."""
    off = 0
    while True:
        length = frame_length(buf, off)
        if length is None:
            return off
        off += length
