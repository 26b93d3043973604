import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_find
from ramsleuth.dumpstore import LoadedDump, TranslationRecord
from ramsleuth.scan import (Pattern, find_pattern, find_pointers_to, find_punicode_refs, plan_chunks)


def random_dump(seed, spans=(3, 1, 5, 2), gap=0x10000):
    """Records with random content, stored high address first like a real dump."""
    rng = np.random.default_rng(seed)
    payload = bytearray(rng.bytes(sum(spans) * 0x1000))
    records, off, va = [], 0, 0x80000000 + gap * len(spans)
    for n in spans:
        va -= gap
        records.append(TranslationRecord(va, va + n * 0x1000 - 1, off))
        off += n * 0x1000
    return payload, records


def _dump(payload, records):
    return LoadedDump(bytes(payload), tuple(records))


def _plant(payload, records, va, data):
    d = _dump(payload, records)
    off = d.vaom_to_oduf(va)
    payload[off:off + len(data)] = data


def test_absent_pattern():
    payload, records = random_dump(0)
    assert find_pattern(_dump(payload, records), Pattern.narrow("definitely-not-here")) == []


def test_wide_string_single_hit():
    payload, records = random_dump(1)
    target = records[2].start_addr + 0x1234
    _plant(payload, records, target, "MyEvilDrv".encode("utf-16-le"))
    d = _dump(payload, records)
    hits = find_pattern(d, Pattern.wide("MyEvilDrv"))
    assert [h.vaom for h in hits] == [target]
    assert [(h.vaom, h.oduf) for h in hits] == naive_find(d.payload, records, "MyEvilDrv".encode("utf-16-le"), 1)


def test_stride_four_skips_unaligned():
    payload, records = random_dump(2)
    _plant(payload, records, records[0].start_addr + 0x101, b"\xde\xad\xbe\xef\x01")
    d = _dump(payload, records)
    assert find_pattern(d, Pattern.raw(b"\xde\xad\xbe\xef\x01", 4)) == []
    assert len(find_pattern(d, Pattern.raw(b"\xde\xad\xbe\xef\x01", 1))) == 1


def test_no_match_across_record_boundary():
    payload, records = random_dump(3)
    # the tail of record 0 and the head of record 1 are adjacent in the payload
    edge = records[0].span
    payload[edge - 2:edge + 2] = b"SPAN"
    hits = find_pattern(_dump(payload, records), Pattern.narrow("SPAN"))
    assert hits == []


def test_pointer_search():
    payload, records = random_dump(4)
    d = _dump(payload, records)
    absent = next(v for v in range(0x80000000, 0x80001000, 4)
                  if not naive_find(d.payload, records, struct.pack("<I", v), 4))
    assert find_pointers_to(d, absent) == []
    cell = records[1].start_addr + 0x40
    _plant(payload, records, cell, struct.pack("<I", cell))  # fixed point
    assert cell in [h.vaom for h in find_pointers_to(_dump(payload, records), cell)]


def test_unicode_string_buffer_is_found():
    payload, records = random_dump(5)
    buf = records[3].start_addr + 0x800
    header = records[0].start_addr + 0x120
    _plant(payload, records, buf, "\\Driver\\Beep".encode("utf-16-le"))
    _plant(payload, records, header, struct.pack("<HHI", 24, 26, buf))
    hits = find_pointers_to(_dump(payload, records), buf)
    assert [h.vaom for h in hits] == [header + 4]


def test_punicode_alias_gives_two_hits():
    payload, records = random_dump(6)
    buf = records[2].start_addr + 0x300
    header = records[1].start_addr + 0x80
    holders = [records[0].start_addr + 0x24, records[3].start_addr + 0x1024]
    _plant(payload, records, buf, "\\REGISTRY".encode("utf-16-le"))
    _plant(payload, records, header, struct.pack("<HHI", 18, 20, buf))
    for h in holders:
        _plant(payload, records, h, struct.pack("<I", header))
    d = _dump(payload, records)
    assert [h.vaom for h in find_punicode_refs(d, buf)] == sorted(holders)
    assert find_punicode_refs(d, buf + 0x100) == []


def test_hardware_database_chain(world):
    img, m, d = world
    hits = find_punicode_refs(d, m.hwdb_string_va)
    # every driver object shares one HardwareDatabase header, at +0x24
    assert {h.vaom for h in hits} == {drv.va + 0x24 for drv in m.drivers}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), needle=st.binary(min_size=1, max_size=3), stride=st.sampled_from([1, 4]),
       chunk=st.integers(1, 5000), workers=st.sampled_from([1, 3]))
def test_chunked_parallel_scan_equals_naive(seed, needle, stride, chunk, workers):
    payload, records = random_dump(seed, spans=(1, 2, 1))
    d = _dump(payload, records)
    hits = find_pattern(d, Pattern.raw(needle, stride), workers=workers, chunk_windows=chunk)
    assert [(h.vaom, h.oduf) for h in hits] == naive_find(d.payload, records, needle, stride)
    assert all(d.vaom_to_oduf(h.vaom) == h.oduf for h in hits)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), keep=st.lists(st.booleans(), min_size=4, max_size=4))
def test_subrange_scan_is_a_subset(seed, keep):
    payload, records = random_dump(seed)
    needle = b"\x00"
    full = find_pattern(_dump(payload, records), Pattern.raw(needle))
    chosen = [r for r, k in zip(records, keep) if k]
    sub_payload, sub_records, off = b"", [], 0
    for r in chosen:
        sub_payload += bytes(payload[r.dump_offset:r.dump_offset + r.span])
        sub_records.append(TranslationRecord(r.start_addr, r.finish_addr, off))
        off += r.span
    sub = find_pattern(_dump(sub_payload, sub_records), Pattern.raw(needle))
    inside = [h.vaom for h in full if any(r.start_addr <= h.vaom <= r.finish_addr for r in chosen)]
    assert [h.vaom for h in sub] == inside


def test_plan_chunks_respects_records():
    payload, records = random_dump(7, spans=(1, 2))
    chunks = plan_chunks(_dump(payload, records), 0x100, 4, chunk_windows=100)
    for c in chunks:
        rec = next(r for r in records if r.dump_offset <= c.base < r.dump_offset + r.span)
        assert (c.base - rec.dump_offset) % 4 == 0
        assert c.base + (c.count - 1) * 4 + 0x100 <= rec.dump_offset + rec.span


def test_pattern_validation():
    with pytest.raises(ValueError):
        Pattern.raw(b"ab", 3).validate()
    with pytest.raises(ValueError):
        Pattern.raw(b"").validate()
    assert Pattern.pointer(0x80001234).payload == b"\x34\x12\x00\x80"
