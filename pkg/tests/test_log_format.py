import struct

import pytest

from taurusdb import log_format as lf
from taurusdb.errors import CorruptRecord
from taurusdb.lsn_vector import CompressedLv, compress

WIDTHS = {0: 4, 1: 8}


def _log():
    clv = compress((10, 0, 30), (0, 5, 5))
    frames = [
        lf.encode_data(clv, [(0, 7, b"abcd"), (1, 2, None), (1, 3, b"12345678")]),
        lf.encode_command(lf.EMPTY_LV, 9, b"params"),
        lf.encode_anchor((1, 2, 3)),
    ]
    return frames, b"".join(frames)


def test_records_round_trip():
    frames, buf = _log()
    recs = list(lf.iter_records(buf, 3, WIDTHS))
    assert [r.kind for r in recs] == [lf.DATA, lf.COMMAND, lf.ANCHOR]
    assert recs[0].writes == [(0, 7, b"abcd"), (1, 2, None), (1, 3, b"12345678")]
    assert recs[0].clv.dims() == [0, 2]
    assert (recs[1].proc_id, recs[1].params) == (9, b"params")
    assert recs[2].plv == (1, 2, 3)
    assert recs[2].metadata_bytes == 9 + 24
    assert recs[-1].end == len(buf)
    assert [r.start for r in recs] == [0, len(frames[0]), len(frames[0]) + len(frames[1])]


def test_intact_prefix_stops_at_every_torn_offset():
    frames, buf = _log()
    bounds = [0]
    for f in frames:
        bounds.append(bounds[-1] + len(f))
    for cut in range(len(buf) + 1):
        want = max(b for b in bounds if b <= cut)
        assert lf.intact_prefix(buf[:cut]) == want


def test_checksum_catches_flipped_byte():
    frames, buf = _log()
    bad = bytearray(buf)
    bad[lf.HEADER_SIZE + 3] ^= 0xFF
    assert lf.intact_prefix(bytes(bad)) == 0
    with pytest.raises(CorruptRecord):
        lf.decode(bytes(bad), 0, 3, WIDTHS)


def test_unknown_table_is_corrupt():
    buf = lf.encode_data(lf.EMPTY_LV, [(5, 1, b"zzzz")])
    with pytest.raises(CorruptRecord):
        lf.decode(buf, 0, 3, WIDTHS)


def test_trailing_bytes_are_corrupt():
    payload = lf.EMPTY_LV.encode() + struct.pack("<3Q", 1, 2, 3) + b"x"
    buf = lf._frame(lf.ANCHOR, payload)
    with pytest.raises(CorruptRecord):
        lf.decode(buf, 0, 3, WIDTHS)


def test_iter_records_honours_limit():
    frames, buf = _log()
    recs = list(lf.iter_records(buf, 3, WIDTHS, limit=len(frames[0])))
    assert len(recs) == 1
    assert list(lf.iter_records(buf, 3, WIDTHS, limit=len(frames[0]) - 1)) == []


def test_empty_lv_is_nine_bytes():
    assert lf.EMPTY_LV == CompressedLv(0, ())
    assert len(lf.EMPTY_LV.encode()) == 9
