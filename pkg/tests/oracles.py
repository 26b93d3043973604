"""Reference implementations used as test oracles.

Each one is written from the format or scoring rules directly, shares no code
with the package, and favours obviousness over speed.
"""

from __future__ import annotations

import struct
from collections import Counter

import numpy as np

FRAME = 0x1000


# -- paging -------------------------------------------------------------------

def _overlaps_any(start, length, ranges):
    return any(start < hi and lo < start + length for lo, hi in ranges)


def _entry(mem, addr, width):
    return int.from_bytes(bytes(mem[addr:addr + width]), "little")


def decode_pages(mem, root, mode, prohibited=()):
    """Every present leaf as (va, size, phys), by decoding each table entry.

    Tables in prohibited frames are not read; leaves that are out of the image
    or touch a prohibited range are dropped.  Sorted by va descending.
    """
    mem = np.asarray(mem, dtype=np.uint8)
    size = len(mem)
    out = []

    def usable_table(addr):
        return addr + FRAME <= size and not _overlaps_any(addr, FRAME, prohibited)

    def keep(va, length, phys):
        if phys + length <= size and not _overlaps_any(phys, length, prohibited):
            out.append((va, length, phys))

    if mode == "legacy32":
        for i in range(1024):
            pde = _entry(mem, root + 4 * i, 4)
            if not pde & 1:
                continue
            if pde & 0x80:
                keep(i << 22, 0x400000, pde & 0xFFC00000)
                continue
            pt = pde & 0xFFFFF000
            if not usable_table(pt):
                continue
            for j in range(1024):
                pte = _entry(mem, pt + 4 * j, 4)
                if pte & 1:
                    keep((i << 22) | (j << 12), FRAME, pte & 0xFFFFF000)
    else:
        addr_mask = (1 << 52) - 1
        for a in range(4):
            pdpte = _entry(mem, root + 8 * a, 8)
            if not pdpte & 1:
                continue
            pd = pdpte & addr_mask & ~0xFFF
            if not usable_table(pd):
                continue
            for i in range(512):
                pde = _entry(mem, pd + 8 * i, 8)
                if not pde & 1:
                    continue
                va_dir = (a << 30) | (i << 21)
                if pde & 0x80:
                    keep(va_dir, 0x200000, pde & addr_mask & ~0x1FFFFF)
                    continue
                pt = pde & addr_mask & ~0xFFF
                if not usable_table(pt):
                    continue
                for j in range(512):
                    pte = _entry(mem, pt + 8 * j, 8)
                    if pte & 1:
                        keep(va_dir | (j << 12), FRAME, pte & addr_mask & ~0xFFF)
    return sorted(out, reverse=True)


# -- dump payload ---------------------------------------------------------------

def reference_payload(mem, pages):
    """Two passes: group pages into virtually contiguous runs, then copy runs.

    Returns (payload, [(start, finish, offset)]) with runs in descending
    address order and bytes ascending inside each run.
    """
    mem = np.asarray(mem, dtype=np.uint8)
    runs = []
    for va, length, phys in sorted(pages, reverse=True):
        if runs and runs[-1][0][0] == va + length:
            runs[-1].insert(0, (va, length, phys))
        else:
            runs.append([(va, length, phys)])
    payload = bytearray()
    records = []
    for run in runs:
        records.append((run[0][0], run[-1][0] + run[-1][1] - 1, len(payload)))
        for va, length, phys in run:
            payload += bytes(mem[phys:phys + length])
    return bytes(payload), records


class PageReader:
    """Virtual reads straight from the image through a page list."""

    def __init__(self, mem, pages):
        self.mem = np.asarray(mem, dtype=np.uint8)
        self.frames = {}
        for va, length, phys in pages:
            for k in range(0, length, FRAME):
                self.frames[va + k] = phys + k

    def read(self, va, length):
        out = bytearray()
        while length > 0:
            phys = self.frames.get(va & ~0xFFF)
            if phys is None:
                return None
            n = min(length, FRAME - (va & 0xFFF))
            off = phys + (va & 0xFFF)
            out += bytes(self.mem[off:off + n])
            va += n
            length -= n
        return bytes(out)

    def readable_prefix(self, va, length):
        out = b""
        while length > 0:
            n = min(length, FRAME - (va & 0xFFF))
            part = self.read(va, n)
            if part is None:
                break
            out += part
            va += n
            length -= n
        return out


# -- scanning -------------------------------------------------------------------

def naive_find(payload, records, needle, stride):
    """(vaom, oduf) of every stride-aligned occurrence, never across records."""
    hits = []
    for start, finish, offset in records:
        span = finish - start + 1
        for rel in range(0, span - len(needle) + 1, stride):
            if payload[offset + rel:offset + rel + len(needle)] == needle:
                hits.append((start + rel, offset + rel))
    return sorted(hits)


def naive_bit_matches(window, positions, values):
    n = 0
    for p, v in zip(positions, values):
        n += ((window[p // 8] >> (p % 8)) & 1) == v
    return n


# -- driver-object scoring ------------------------------------------------------

def _printable(unit):
    return (0x20 <= unit <= 0x7E or 0xA0 <= unit <= 0x24F
            or 0x370 <= unit <= 0x3FF or 0x400 <= unit <= 0x4FF)


def _ustr(raw, off):
    return struct.unpack_from("<HHI", raw, off)


def _string_ok(reader, length, maxlen, buf):
    if maxlen < length or buf == 0 or length % 2:
        return False
    if length == 0:
        return True
    raw = reader.read(buf, length)
    if raw is None:
        return False
    return all(_printable(u) for (u,) in struct.iter_unpack("<H", raw))


def _name_points(reader, length, maxlen, buf):
    pts = 0
    if maxlen >= length:
        pts += 2
    if maxlen <= 0x50 and length <= 0x50:
        pts += 4
    if _string_ok(reader, length, maxlen, buf):
        pts += 2
    if buf and length >= 8:
        raw = reader.read(buf, length & ~1)
        if raw is not None and ".sys" in raw.decode("utf-16-le", errors="replace").lower():
            pts += 2
    count = 0
    if buf:
        raw = reader.readable_prefix(buf, 0x200)
        for k in range(0, len(raw) - 1, 2):
            if raw[k] == 0 and raw[k + 1] == 0:
                break
            count += 1
    if count <= length:
        pts += 2
    return pts


def _hwdb_ok(reader, ptr):
    if ptr == 0:
        return False
    raw = reader.read(ptr, 8)
    return raw is not None and _string_ok(reader, *_ustr(raw, 0))


def _prologue(reader, va):
    raw = reader.read(va, 0x12)
    if raw is None:
        return False
    pats = (b"\x55\x89\xe5", b"\x55\x8b\xec", b"\x53\x56", b"\x56\x57", b"\x8b\xff")
    return any(raw[i:i + len(p)] == p for i in range(0x10) for p in pats)


def _same_handlers(raw):
    slots = [v for v in struct.unpack_from("<28I", raw, 0x38) if v != 0]
    return max(Counter(slots).values()) if slots else 0


def naive_scores(reader, va, min_major):
    """(global, deep) for the candidate at ``va``, or None if unreadable."""
    raw = reader.read(va, 0xA8)
    if raw is None:
        return None
    typ, size = struct.unpack_from("<HH", raw, 0)
    start, dsize = struct.unpack_from("<II", raw, 0x0C)
    ext = struct.unpack_from("<I", raw, 0x18)[0]
    hwdb = struct.unpack_from("<I", raw, 0x24)[0]
    mf0 = struct.unpack_from("<I", raw, 0x38)[0]
    name = _ustr(raw, 0x1C)
    same = _same_handlers(raw) >= min_major
    hw = _hwdb_ok(reader, hwdb)
    kern = bool(mf0 >> 31)

    g = (2 * (typ == 4) + 4 * (size == 0xA8) + 2 * _string_ok(reader, *name)
         + 2 * hw + 2 * kern + 2 * same)
    d = (2 * (typ == 4) + 2 * (size == 0xA8) + 2 * bool(start >> 31)
         + 2 * (start != 0 and start % 0x1000 == 0) + 2 * (dsize != 0 and dsize % 0x1000 == 0)
         + 4 * _prologue(reader, start) + 2 * bool(ext >> 31) + _name_points(reader, *name)
         + 2 * hw + 2 * kern + 2 * same)
    return g, d


def naive_score_all(reader, candidate_vas, min_major):
    """(va, global, deep) for every readable candidate, each scored in full."""
    out = []
    for va in candidate_vas:
        s = naive_scores(reader, va, min_major)
        if s is not None:
            out.append((va, *s))
    return out


def naive_accept(scored, gs, gsd):
    """Accepted (va, route) pairs ascending by address."""
    out = []
    for va, g, d in sorted(scored):
        if g >= gs:
            out.append((va, "global"))
        elif d >= gsd:
            out.append((va, "deep"))
    return out


def naive_rpi_scan(reader, candidate_vas, thresholds):
    min_major, gs, gsd = thresholds
    return naive_accept(naive_score_all(reader, candidate_vas, min_major), gs, gsd)
