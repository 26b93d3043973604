import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import BASE, Scratch
from oracles import naive_scores
from ramsleuth import rpi
from ramsleuth.dumpstore import LoadedDump, TranslationRecord
from ramsleuth.errors import EmptyKnownSet, EmptyList, FormatError
from ramsleuth.rpi import (RpiMatch, RpiProfile, UnicodeStringHeader as US, center_of_mass, check_function_prologue,
                           chk_unicode_string, chk_unicode_string2, derive_thresholds, max_same_major_functions,
                           rank_by_center, rpi_scan, score_deep, score_global)
from ramsleuth.synth import Corruption, SynthSpec, build_image, enumerate_reported_drivers

DRV = BASE + 0x1000
HANDLER = BASE + 0x4100


def plant_driver(s, va=DRV, *, name="evil.sys", code=BASE + 0x4000, size=0x3000, majors=None):
    """A driver object satisfying every row of both tables."""
    obj = bytearray(0xA8)
    struct.pack_into("<HH", obj, 0, 4, 0xA8)
    struct.pack_into("<II", obj, 0x0C, code, size)
    struct.pack_into("<I", obj, 0x18, BASE + 0x5000)
    buf = va + 0x2000
    raw = name.encode("utf-16-le")
    s.put(buf, raw + b"\0\0")
    struct.pack_into("<HHI", obj, 0x1C, len(raw), len(raw) + 2, buf)
    s.ustring(BASE + 0x200, BASE + 0x300, "\\REGISTRY\\MACHINE\\HARDWARE")
    struct.pack_into("<I", obj, 0x24, BASE + 0x200)
    s.put(code, b"\x55\x8b\xec\x83\xec\x08")
    if majors is None:
        # MF0 is its own slot so that rows stay independent under ablation
        majors = [code + 0x1F0] + [HANDLER] * 20 + [code + 0x200 + 0x10 * k for k in range(7)]
    struct.pack_into("<28I", obj, 0x38, *majors)
    s.put(va, bytes(obj))
    return va


def profile(min_major=20, gs=0, gsd=0):
    return RpiProfile().with_thresholds(min_major, gs, gsd)


@pytest.fixture
def drv():
    s = Scratch()
    plant_driver(s)
    return s


# -- name header checks --------------------------------------------------------

def test_chk_unicode_string(scratch):
    d = scratch.dump()
    assert not chk_unicode_string(d, US(0, 0, 0))
    scratch.ustring(BASE + 0x10, BASE + 0x100, "\\Driver\\Beep")
    d = scratch.dump()
    assert chk_unicode_string(d, US(24, 26, BASE + 0x100))
    assert not chk_unicode_string(d, US(24, 22, BASE + 0x100))  # max < len
    assert not chk_unicode_string(d, US(23, 26, BASE + 0x100))  # odd
    assert not chk_unicode_string(d, US(24, 26, 0x1000))        # unmapped buffer
    scratch.put(BASE + 0x104, b"\x07\x00")                       # control character
    assert not chk_unicode_string(scratch.dump(), US(24, 26, BASE + 0x100))


def test_printable_allowlist():
    ok = np.array([0x20, 0x7E, 0xA0, 0x24F, 0x3A9, 0x416], dtype=np.uint16)
    assert rpi.is_printable(ok)
    for bad in (0x1F, 0x7F, 0x9F, 0x250, 0x500, 0xFFFF):
        assert not rpi.is_printable(np.array([bad], dtype=np.uint16))


def test_chk_unicode_string2(scratch):
    d = scratch.dump()
    assert chk_unicode_string2(d, US(0, 0, 0)) == 8
    scratch.ustring(BASE + 0x10, BASE + 0x100, "evil.sys")
    d = scratch.dump()
    assert chk_unicode_string2(d, US(0x10, 0x12, BASE + 0x100)) == 12
    # max < len: that row and the validity row drop, the rest are evaluated on their own
    rows = rpi.name_rows(d, US(0x10, 0x0E, BASE + 0x100))
    assert rows == {"max_length_covers": 0, "short": 4, "valid": 0, "sys_suffix": 2, "wcslen_fits": 2}
    # case-insensitive suffix
    scratch.ustring(BASE + 0x10, BASE + 0x100, "EVIL.SYS")
    assert chk_unicode_string2(scratch.dump(), US(0x10, 0x12, BASE + 0x100)) == 12


def test_strict_sys_check_is_the_literal_form(scratch):
    scratch.ustring(BASE + 0x10, BASE + 0x100, "evil.sys")
    d = scratch.dump()
    us = US(0x10, 0x12, BASE + 0x100)
    lenient = rpi.name_rows(d, us)["sys_suffix"]
    strict = rpi.name_rows(d, us, strict_sys=True)["sys_suffix"]
    assert (lenient, strict) == (2, 2)  # the literal comparison is truthy whenever the head differs
    scratch.ustring(BASE + 0x10, BASE + 0x100, ".sys")
    assert rpi.name_rows(scratch.dump(), US(8, 8, BASE + 0x100), strict_sys=True)["sys_suffix"] == 0


# -- function prologue ---------------------------------------------------------

@pytest.mark.parametrize("at, pattern, expected", [
    (0, b"\x55\x8b\xec", True),
    (0x0F, b"\x8b\xff", True),
    (0x0F, b"\x55\x89\xe5", True),   # may run past the 16-byte search span
    (0x10, b"\x53\x56", False),
    (0x05, b"\x56\x57", True),
])
def test_prologue(scratch, at, pattern, expected):
    scratch.put(BASE + 0x4000 + at, pattern)
    assert check_function_prologue(scratch.dump(), BASE + 0x4000) is expected


def test_prologue_on_zeros_and_unmapped(scratch):
    d = scratch.dump()
    assert not check_function_prologue(d, BASE + 0x4000)
    assert not check_function_prologue(d, BASE + 0xFFF0)  # runs off the record
    assert not check_function_prologue(d, 0)


# -- MajorFunction -------------------------------------------------------------

@pytest.mark.parametrize("majors, expected", [
    ([HANDLER] * 28, 28),
    ([HANDLER + 2 * k for k in range(28)], 1),
    ([HANDLER] * 20 + [HANDLER + 0x10 * k for k in range(1, 9)], 20),
    ([0] * 28, 0),
])
def test_max_same(scratch, majors, expected):
    scratch.put(DRV + 0x38, struct.pack("<28I", *majors))
    assert max_same_major_functions(scratch.dump(), DRV) == expected
    assert max_same_major_functions(scratch.dump(), 0x1000) == 0


# -- global and deep scores ----------------------------------------------------

def test_global_score_examples(drv, scratch):
    assert score_global(drv.dump(), DRV, profile()) == 14
    drv.u16(DRV + 2, 0)
    assert score_global(drv.dump(), DRV, profile()) == 10
    assert score_global(scratch.dump(), DRV, profile()) == 0


def test_deep_score_examples(drv, scratch):
    assert score_deep(drv.dump(), DRV, profile()) == 34
    drv.u32(DRV + 0x0C, BASE + 0x4002)
    drv.put(BASE + 0x4002, b"\x55\x8b\xec")
    assert score_deep(drv.dump(), DRV, profile()) == 32
    assert score_deep(scratch.dump(), DRV, profile()) == 8


ABLATIONS = {
    # row: (byte offset, replacement, global delta, deep delta)
    "type": (0x00, b"\x05\x00", 2, 2),
    "size": (0x02, b"\x00\x00", 4, 2),
    "driver_size_aligned": (0x10, struct.pack("<I", 0x3004), 0, 2),
    "driver_extension_kernel": (0x18, struct.pack("<I", 0x5000), 0, 2),
    "hardware_database": (0x24, struct.pack("<I", 0x10), 2, 2),
    "major_function_kernel": (0x38, struct.pack("<I", 0x12345), 2, 2),
}


@pytest.mark.parametrize("row", list(ABLATIONS))
def test_one_row_changes_score_by_its_weight(drv, row):
    off, data, dg, dd = ABLATIONS[row]
    before = (score_global(drv.dump(), DRV, profile()), score_deep(drv.dump(), DRV, profile()))
    drv.put(DRV + off, data)
    after = (score_global(drv.dump(), DRV, profile()), score_deep(drv.dump(), DRV, profile()))
    assert (before[0] - after[0], before[1] - after[1]) == (dg, dd)


def test_min_major_row(drv):
    assert score_global(drv.dump(), DRV, profile(min_major=21)) == 12
    assert score_deep(drv.dump(), DRV, profile(min_major=21)) == 32


@settings(max_examples=60, deadline=None)
@given(st.binary(min_size=0xA8, max_size=0xA8), st.integers(0, 28))
def test_scores_bounded_and_match_oracle(window, min_major):
    s = Scratch()
    plant_driver(s, BASE + 0x8000)  # gives random pointers something to land on
    s.put(DRV, window)
    d = s.dump()
    p = profile(min_major)
    g, deep = score_global(d, DRV, p), score_deep(d, DRV, p)
    assert 0 <= g <= 14 and 0 <= deep <= 34
    ref = naive_scores(_PageView(s), DRV, min_major)
    assert (g, deep) == ref


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 0xA7), st.integers(0, 255)), max_size=6), st.integers(15, 25))
def test_mutated_driver_matches_oracle(edits, min_major):
    s = Scratch()
    plant_driver(s)
    for off, value in edits:
        s.put(DRV + off, bytes([value]))
    p = profile(min_major)
    d = s.dump()
    assert (score_global(d, DRV, p), score_deep(d, DRV, p)) == naive_scores(_PageView(s), DRV, min_major)


class _PageView:
    """Oracle reader over a Scratch buffer."""

    def __init__(self, s):
        self.s = s

    def read(self, va, n):
        off = va - self.s.base
        if off < 0 or off + n > len(self.s.buf):
            return None
        return bytes(self.s.buf[off:off + n])

    def readable_prefix(self, va, n):
        off = va - self.s.base
        if off < 0 or off >= len(self.s.buf):
            return b""
        return bytes(self.s.buf[off:off + n])


# -- thresholds ----------------------------------------------------------------

def test_derive_thresholds_single_driver(drv):
    assert derive_thresholds(drv.dump(), [DRV]) == (20, 14, 34)


def test_derive_thresholds_takes_minima():
    s = Scratch(size=0x20000)
    vas = [BASE + 0x1000, BASE + 0x8000, BASE + 0xC000]
    for va, same in zip(vas, (28, 25, 27)):
        majors = [HANDLER] * same + [HANDLER + 0x10 * k for k in range(1, 29 - same)]
        plant_driver(s, va, majors=majors)
    s.u16(vas[1] + 2, 0)                    # 14 -> 10
    s.u32(vas[2] + 0x38, 0x1234)            # 14 -> 12
    mm, gs, gsd = derive_thresholds(s.dump(), vas)
    assert mm == 25
    assert [score_global(s.dump(), va, profile(mm)) for va in vas] == [14, 10, 12]
    assert gs == 10
    with pytest.raises(EmptyKnownSet):
        derive_thresholds(s.dump(), [])


def test_profile_json_roundtrip(tmp_path):
    p = profile(20, 10, 28)
    p.save(tmp_path / "rpi.json")
    assert RpiProfile.load(tmp_path / "rpi.json") == p
    (tmp_path / "bad.json").write_text('{"weights_global": {"type": 2}}')
    with pytest.raises(FormatError):
        RpiProfile.load(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        RpiProfile(global_scope=15)


# -- scanning ------------------------------------------------------------------

@pytest.fixture(scope="module")
def corrupted_world():
    # driver 0 is listed or hidden depending on the draw; its Size is wiped either way
    img, m = build_image(SynthSpec(seed=12, corruption=[Corruption("driver", 0, 2, 0)]))
    return img, m, LoadedDump.from_image(img, m.paging_root, m.mode)


def test_scan_finds_every_planted_driver(corrupted_world):
    img, m, d = corrupted_world
    known = enumerate_reported_drivers(d, m.driver_directory)
    p = RpiProfile().with_thresholds(*derive_thresholds(d, known))
    found = rpi_scan(d, p)
    assert [x.vaom for x in found] == sorted(x.va for x in m.drivers)
    corrupted = next(x for x in found if x.vaom == m.drivers[0].va)
    assert corrupted.accepted_via in ("global", "deep")
    for x in found:
        assert (x.accepted_via == "global") == (x.score_global >= p.global_scope)
        if x.accepted_via == "deep":
            assert x.score_deep >= p.global_scope_deep


def test_listed_drivers_always_accepted(world):
    img, m, d = world
    known = enumerate_reported_drivers(d, m.driver_directory)
    found = {x.vaom for x in rpi_scan(d, RpiProfile().with_thresholds(*derive_thresholds(d, known)))}
    assert set(known) <= found


def test_random_memory_gives_no_matches():
    payload = np.random.default_rng(99).bytes(16 << 20)
    d = LoadedDump(payload, (TranslationRecord(0x80000000, 0x80000000 + len(payload) - 1, 0),))
    assert rpi_scan(d, profile(20, 10, 28), workers=2) == []


def test_scan_requires_thresholds(world):
    with pytest.raises(ValueError):
        rpi_scan(world[2], RpiProfile())


def test_unlinking_does_not_change_scores():
    a_img, a = build_image(SynthSpec(seed=41, n_hidden_drivers=0))
    b_img, b = build_image(SynthSpec(seed=41, n_hidden_drivers=2))
    da = LoadedDump.from_image(a_img, a.paging_root, a.mode)
    db = LoadedDump.from_image(b_img, b.paging_root, b.mode)
    p = profile(15)
    for va in b.hidden_drivers():
        assert score_global(da, va, p) == score_global(db, va, p)
        assert score_deep(da, va, p) == score_deep(db, va, p)


# -- center of mass ------------------------------------------------------------

def test_center_of_mass():
    assert center_of_mass([0x1000]) == 0x1000
    assert center_of_mass([0x1000, 0x3000]) == 0x2000
    with pytest.raises(EmptyList):
        center_of_mass([])


def test_far_outlier_ranks_last():
    cluster = [0x81200000 + 0x300 * k for k in range(6)]
    outlier = 0x9F000000
    matches = [RpiMatch(va, 14, None, "global") for va in [outlier] + cluster]
    ranked = rank_by_center(matches, center_of_mass(cluster))
    assert ranked[-1].vaom == outlier
    com = center_of_mass(cluster)
    assert [m.vaom for m in ranked] == sorted((m.vaom for m in matches), key=lambda v: (abs(v - com), v))
