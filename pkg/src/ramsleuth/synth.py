"""Synthetic physical-memory images with page tables, planted kernel-like
objects and a ground-truth manifest.

Layouts are synthetic on purpose.  Process windows (0x2C0 bytes) share a
per-image template except for a fixed set of varying fields; they are chained
through a LIST_ENTRY at +0x88 into a circular doubly linked list hanging off a
list head.  Driver objects use the 32-bit DRIVER_OBJECT field offsets and are
reachable through a singly linked directory of
``{ChainLink, Object, HashValue}`` entries.

Hiding a process rewrites only its neighbours' links; hiding a driver removes
its directory entry.  The hidden object's own bytes are untouched either way.
Filler memory is seeded random bytes.
"""

from __future__ import annotations

import json
import string
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CorruptList, SpecTooLarge
from .image import PAGE_SIZE, PhysicalImage, normalize_ranges
from .paging import PagingMode, VirtualPage
from .rpi import DriverObjectLayout, PROLOGUES

KERNEL_BASE = 0x80000000
PROCESS_WINDOW = 0x2C0
PROCESS_LINK_OFFSET = 0x88
PROCESS_NAME_OFFSET = 0x174
# (offset, length) of per-process fields; everything else comes from the template
PROCESS_VARYING = (
    (0x018, 4), (0x070, 8), (0x084, 4), (0x088, 8), (0x0A0, 4), (0x0B8, 4), (0x0F0, 4),
    (0x12C, 4), (0x160, 4), (0x174, 16), (0x1A0, 8), (0x200, 4), (0x248, 8),
)
_KPTR_FIELDS = (0x0A0, 0x0B8, 0x0F0, 0x12C, 0x160)
DIR_ENTRY_SIZE = 12
HWDB_TEXT = "\\REGISTRY\\MACHINE\\HARDWARE\\DESCRIPTION\\SYSTEM"
_NAME_CHARS = string.ascii_letters + string.digits
_LIST_LIMIT = 1 << 16


@dataclass
class Corruption:
    kind: str  # "process" or "driver"
    index: int
    offset: int
    value: int


@dataclass
class SynthSpec:
    mode: PagingMode = PagingMode.LEGACY32
    image_size: int = 16 * 1024 * 1024
    n_processes: int = 12
    n_hidden_processes: int = 2
    n_drivers: int = 8
    n_hidden_drivers: int = 2
    corruption: list[Corruption] = field(default_factory=list)
    seed: int = 0
    prohibited: list[tuple[int, int]] = field(default_factory=list)
    n_large_pages: int = 0
    n_small_pages: int | None = None  # None maps every spare frame
    n_prohibited_maps: int = 0
    max_run_pages: int = 64
    max_gap_pages: int = 16
    driver_quirks: bool = True

    def __post_init__(self):
        self.mode = PagingMode(self.mode)
        self.corruption = [c if isinstance(c, Corruption) else Corruption(**c) for c in self.corruption]
        self.prohibited = [tuple(r) for r in self.prohibited]
        if not 0 <= self.n_hidden_processes <= self.n_processes:
            raise ValueError("n_hidden_processes must be within [0, n_processes]")
        if not 0 <= self.n_hidden_drivers <= self.n_drivers:
            raise ValueError("n_hidden_drivers must be within [0, n_drivers]")
        if self.image_size % PAGE_SIZE:
            raise ValueError("image_size must be a multiple of 0x1000")
        for c in self.corruption:
            total, width = ((self.n_processes, PROCESS_WINDOW) if c.kind == "process"
                            else (self.n_drivers, DriverObjectLayout().total_size))
            if c.kind not in ("process", "driver") or not 0 <= c.index < total:
                raise ValueError(f"corruption target {c.kind}[{c.index}] does not exist")
            if not 0 <= c.offset < width or not 0 <= c.value <= 0xFF:
                raise ValueError(f"corruption {c} falls outside the structure window")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


@dataclass
class ProcessEntry:
    va: int
    hidden: bool
    window_bytes: int
    name: str
    pid: int


@dataclass
class DriverEntry:
    va: int
    hidden: bool
    name: str
    name_va: int
    driver_start: int
    driver_size: int
    major_distinct: int
    fields: dict = field(default_factory=dict)


@dataclass
class GroundTruthManifest:
    mode: str
    image_size: int
    seed: int
    paging_root: int
    prohibited: list[tuple[int, int]]
    process_list_head: int
    driver_directory: int
    process_window: int
    process_link_offset: int
    hwdb_header_va: int
    hwdb_string_va: int
    processes: list[ProcessEntry] = field(default_factory=list)
    drivers: list[DriverEntry] = field(default_factory=list)
    corruptions: list[dict] = field(default_factory=list)
    pages: list[tuple[int, int, int]] = field(default_factory=list)
    excluded_pages: list[tuple[int, int, int]] = field(default_factory=list)
    process_varying: list[tuple[int, int]] = field(default_factory=lambda: [list(v) for v in PROCESS_VARYING])

    def hidden_processes(self) -> set[int]:
        return {p.va for p in self.processes if p.hidden}

    def hidden_drivers(self) -> set[int]:
        return {d.va for d in self.drivers if d.hidden}

    def dumped_pages(self) -> set[VirtualPage]:
        return {VirtualPage(*p) for p in self.pages}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthManifest":
        data = dict(data)
        data["processes"] = [ProcessEntry(**p) for p in data.get("processes", [])]
        data["drivers"] = [DriverEntry(**d) for d in data.get("drivers", [])]
        data["pages"] = [tuple(p) for p in data.get("pages", [])]
        data["excluded_pages"] = [tuple(p) for p in data.get("excluded_pages", [])]
        data["prohibited"] = [tuple(p) for p in data.get("prohibited", [])]
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruthManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Frames:
    """Physical frame bookkeeping for the builder."""

    def __init__(self, n_frames: int, prohibited, rng: np.random.Generator):
        self.used = np.zeros(n_frames, dtype=bool)
        self.prohibited = np.zeros(n_frames, dtype=bool)
        for r in prohibited:
            self.prohibited[r.start // PAGE_SIZE:r.end // PAGE_SIZE] = True
        self.rng = rng
        self._pool: list[int] | None = None

    def take_block(self, n: int) -> int:
        """First free, clean, ``n``-aligned run of ``n`` frames."""
        bad = self.used | self.prohibited
        for start in range(0, len(bad) - n + 1, n):
            if not bad[start:start + n].any():
                self.used[start:start + n] = True
                return start
        raise SpecTooLarge(f"no free aligned block of {n} frames")

    def seal_pool(self) -> None:
        free = np.flatnonzero(~(self.used | self.prohibited))
        self._pool = self.rng.permutation(free).tolist()

    def spare(self) -> int:
        return len(self._pool)

    def take(self) -> int:
        if not self._pool:
            raise SpecTooLarge("out of physical frames")
        f = self._pool.pop()
        self.used[f] = True
        return f

    def take_prohibited(self) -> int:
        cands = np.flatnonzero(self.prohibited & ~self.used)
        if cands.size == 0:
            raise SpecTooLarge("no prohibited frames left to map")
        f = int(self.rng.choice(cands))
        self.used[f] = True
        return f


def _layout_runs(rng: np.random.Generator, n_pages: int, va0: int, max_run: int, max_gap: int) -> list[tuple[int, int]]:
    """(va_start, n_pages) runs separated by unmapped gaps."""
    runs = []
    va = va0
    left = n_pages
    while left > 0:
        n = min(int(rng.integers(1, max_run + 1)), left)
        if va + n * PAGE_SIZE > 0x1_0000_0000:
            raise SpecTooLarge("mapping does not fit in the 32-bit address space")
        runs.append((va, n))
        left -= n
        va += (n + int(rng.integers(1, max_gap + 1))) * PAGE_SIZE
    return runs


def _tables_needed(mode: PagingMode, vas: Iterable[int], large_vas: Iterable[int]) -> int:
    vas, large_vas = list(vas), list(large_vas)
    if mode is PagingMode.LEGACY32:
        return 1 + len({va >> 22 for va in vas})
    return 1 + len({va >> 30 for va in vas + large_vas}) + len({va >> 21 for va in vas})


class _TableWriter:
    """Encodes mappings into page tables inside the image array."""

    def __init__(self, mem: np.ndarray, mode: PagingMode, frames: _Frames, rng: np.random.Generator):
        self.mem, self.mode, self.frames, self.rng = mem, mode, frames, rng
        self.tables: dict[tuple, int] = {}
        root_frame = self._new_table()
        if mode is PagingMode.LEGACY32:
            self.root = root_frame
        else:
            self.root = root_frame + int(rng.integers(0, PAGE_SIZE // 0x20)) * 0x20
            self.mem[self.root:self.root + 32] = 0

    def _new_table(self) -> int:
        addr = self.frames.take() * PAGE_SIZE
        width = 4 if self.mode is PagingMode.LEGACY32 else 8
        n = PAGE_SIZE // width
        garbage = self.rng.integers(0, 1 << (8 * width - 1), size=n, dtype=np.uint64) & ~np.uint64(1)
        garbage[self.rng.random(n) >= 0.1] = 0
        entries = garbage.astype("<u4" if width == 4 else "<u8")
        self.mem[addr:addr + PAGE_SIZE] = np.frombuffer(entries.tobytes(), dtype=np.uint8)
        return addr

    def _put(self, addr: int, value: int) -> None:
        width = 4 if self.mode is PagingMode.LEGACY32 else 8
        self.mem[addr:addr + width] = np.frombuffer(value.to_bytes(width, "little"), dtype=np.uint8)

    def _soft_bits(self) -> int:
        # accessed/dirty/user/software-available bits; never P or PS
        return int(self.rng.integers(0, 1 << 12)) & 0xE7E | 0x3

    def _dir(self, va: int) -> int:
        """Physical address of the page directory covering ``va``."""
        if self.mode is PagingMode.LEGACY32:
            return self.root
        i = va >> 30
        key = ("pd", i)
        if key not in self.tables:
            self.tables[key] = self._new_table()
            self._put(self.root + i * 8, self.tables[key] | 0x1)
        return self.tables[key]

    def map_small(self, va: int, phys: int) -> None:
        pd = self._dir(va)
        if self.mode is PagingMode.LEGACY32:
            key, pde_addr, pte_addr = ("pt", va >> 22), pd + (va >> 22) * 4, (va >> 12) & 0x3FF
            width = 4
        else:
            key, pde_addr, pte_addr = ("pt", va >> 21), pd + ((va >> 21) & 0x1FF) * 8, (va >> 12) & 0x1FF
            width = 8
        if key not in self.tables:
            self.tables[key] = self._new_table()
            self._put(pde_addr, self.tables[key] | (self._soft_bits() & ~0x80))
        nx = (1 << 63) if width == 8 and self.rng.random() < 0.5 else 0
        self._put(self.tables[key] + pte_addr * width, phys | self._soft_bits() | nx)

    def map_large(self, va: int, phys: int) -> None:
        pd = self._dir(va)
        if self.mode is PagingMode.LEGACY32:
            self._put(pd + (va >> 22) * 4, phys | self._soft_bits() | 0x80)
        else:
            self._put(pd + ((va >> 21) & 0x1FF) * 8, phys | self._soft_bits() | 0x80)


def encode_mappings(mem: np.ndarray, mode: PagingMode | str, mappings: Iterable[tuple[int, int]],
                    table_frames: Iterable[int], seed: int = 0) -> int:
    """Write page tables for explicit 4-KiB ``(va, phys)`` mappings; returns the root.

    Table frames are drawn from ``table_frames`` in order.  Used to express one
    mapping in both paging modes.
    """
    rng = np.random.default_rng(seed)
    frames = _Frames(len(mem) // PAGE_SIZE, (), rng)
    frames._pool = list(reversed(list(table_frames)))
    writer = _TableWriter(mem, PagingMode(mode), frames, rng)
    for va, phys in mappings:
        writer.map_small(va, phys)
    return writer.root


class _Arena:
    """Bump allocator over virtually contiguous 4-KiB runs."""

    def __init__(self, runs: list[tuple[int, int]], rng: np.random.Generator):
        self.runs = runs
        self.rng = rng
        self.i = int(rng.integers(0, len(runs))) if runs else 0
        self.cursor = runs[self.i][0] if runs else 0
        self.tried = 0

    def alloc(self, size: int, align: int = 8, pad: int = 0x40) -> int:
        while self.tried < len(self.runs):
            start, n = self.runs[self.i]
            end = start + n * PAGE_SIZE
            va = self.cursor + int(self.rng.integers(0, pad // align + 1)) * align
            va = -(-va // align) * align
            if va + size <= end:
                self.cursor = va + size
                return va
            self.i = (self.i + 1) % len(self.runs)
            self.cursor = self.runs[self.i][0]
            self.tried += 1
        raise SpecTooLarge("planted objects do not fit in the mapped memory")


class _Builder:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.mem = np.frombuffer(self.rng.bytes(spec.image_size), dtype=np.uint8).copy()
        self.prohibited = normalize_ranges(spec.prohibited, spec.image_size)
        self.frames = _Frames(spec.image_size // PAGE_SIZE, self.prohibited, self.rng)
        self.va_to_phys: dict[int, int] = {}

    # -- memory helpers -------------------------------------------------
    def write(self, va: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            page = (va + pos) & ~0xFFF
            off = (va + pos) & 0xFFF
            n = min(len(data) - pos, PAGE_SIZE - off)
            phys = self.va_to_phys[page] + off
            self.mem[phys:phys + n] = np.frombuffer(data[pos:pos + n], dtype=np.uint8)
            pos += n

    def read(self, va: int, length: int) -> bytes:
        out = bytearray()
        while length:
            off = va & 0xFFF
            n = min(length, PAGE_SIZE - off)
            phys = self.va_to_phys[va & ~0xFFF] + off
            out += self.mem[phys:phys + n].tobytes()
            va += n
            length -= n
        return bytes(out)

    def kptr(self, align: int = 8) -> int:
        return KERNEL_BASE | (int(self.rng.integers(0, 0x80000000)) // align * align)

    def name(self, lo: int, hi: int) -> str:
        n = int(self.rng.integers(lo, hi + 1))
        return "".join(_NAME_CHARS[int(i)] for i in self.rng.integers(0, len(_NAME_CHARS), size=n))

    # -- paging ---------------------------------------------------------
    def build_paging(self):
        spec, mode = self.spec, self.spec.mode
        large = mode.large_page_size
        large_frames = large // PAGE_SIZE
        large_maps = []
        for k in range(spec.n_large_pages):
            phys = self.frames.take_block(large_frames) * PAGE_SIZE
            large_maps.append((KERNEL_BASE + k * large, phys))
        self.frames.seal_pool()

        va0 = KERNEL_BASE + spec.n_large_pages * large + PAGE_SIZE * int(self.rng.integers(1, 17))
        state = self.rng.bit_generator.state
        spare = self.frames.spare()
        want = spare if spec.n_small_pages is None else spec.n_small_pages
        runs = _layout_runs(self.rng, want, va0, spec.max_run_pages, spec.max_gap_pages)
        gap_vas = self._gap_pages(runs, spec.n_prohibited_maps)
        small_vas = [va + k * PAGE_SIZE for va, n in runs for k in range(n)]
        need = _tables_needed(mode, small_vas + gap_vas, [v for v, _ in large_maps])
        if spec.n_small_pages is None:
            # shrink the mapping so that page tables fit, reusing the same layout
            self.rng.bit_generator.state = state
            runs = _layout_runs(self.rng, max(spare - need, 0), va0, spec.max_run_pages, spec.max_gap_pages)
            gap_vas = self._gap_pages(runs, spec.n_prohibited_maps)
            small_vas = [va + k * PAGE_SIZE for va, n in runs for k in range(n)]
        elif need + want > spare:
            raise SpecTooLarge(f"{want} pages plus {need} tables exceed {spare} spare frames")

        writer = _TableWriter(self.mem, mode, self.frames, self.rng)
        pages, excluded = [], []
        for va, phys in large_maps:
            writer.map_large(va, phys)
            pages.append((va, large, phys))
        for va in small_vas:
            phys = self.frames.take() * PAGE_SIZE
            writer.map_small(va, phys)
            self.va_to_phys[va] = phys
            pages.append((va, PAGE_SIZE, phys))
        for va in gap_vas:
            phys = self.frames.take_prohibited() * PAGE_SIZE
            writer.map_small(va, phys)
            excluded.append((va, PAGE_SIZE, phys))
        pages.sort(reverse=True)
        return writer.root, runs, pages, excluded

    def _gap_pages(self, runs, n: int) -> list[int]:
        if n == 0:
            return []
        gaps = [va + cnt * PAGE_SIZE for va, cnt in runs[:-1]]
        if len(gaps) < n:
            raise SpecTooLarge("not enough unmapped gaps for prohibited mappings")
        return sorted(int(v) for v in self.rng.choice(gaps, size=n, replace=False))

    # -- objects --------------------------------------------------------
    def process_template(self) -> bytes:
        tmpl = bytearray(self.rng.bytes(PROCESS_WINDOW))
        for off in range(0, PROCESS_WINDOW, 4):
            if self.rng.random() < 0.2:
                tmpl[off:off + 4] = bytes(4)
        tmpl[0:4] = bytes((0x03, 0x00, 0x1B, 0x00))
        return bytes(tmpl)

    def plant_processes(self, arena: _Arena) -> tuple[int, list[ProcessEntry]]:
        spec = self.spec
        head = arena.alloc(8)
        template = self.process_template()
        procs = []
        for _ in range(spec.n_processes):
            va = arena.alloc(PROCESS_WINDOW, align=8, pad=0x200)
            w = bytearray(template)
            pid = int(self.rng.integers(1, 0x4000)) * 4
            name = self.name(3, 12)
            struct.pack_into("<I", w, 0x018, int(self.rng.integers(0, spec.image_size // PAGE_SIZE)) * PAGE_SIZE)
            w[0x070:0x078] = self.rng.bytes(8)
            struct.pack_into("<I", w, 0x084, pid)
            for off in _KPTR_FIELDS:
                struct.pack_into("<I", w, off, self.kptr())
            w[PROCESS_NAME_OFFSET:PROCESS_NAME_OFFSET + 16] = name.encode().ljust(16, b"\0")[:16]
            w[0x1A0:0x1A8] = self.rng.bytes(8)
            w[0x200:0x204] = self.rng.bytes(4)
            w[0x248:0x250] = self.rng.bytes(8)
            self.write(va, bytes(w))
            procs.append(ProcessEntry(va, False, PROCESS_WINDOW, name, pid))

        hidden = set(self.rng.choice(len(procs), size=spec.n_hidden_processes, replace=False).tolist())
        links = [head] + [p.va + PROCESS_LINK_OFFSET for p in procs]
        self._link(links)  # full chain first: hidden entries keep these
        visible = [head] + [p.va + PROCESS_LINK_OFFSET for i, p in enumerate(procs) if i not in hidden]
        self._link(visible)
        for i in hidden:
            procs[i].hidden = True
        return head, procs

    def _link(self, nodes: list[int]) -> None:
        n = len(nodes)
        for k, node in enumerate(nodes):
            self.write(node, struct.pack("<II", nodes[(k + 1) % n], nodes[(k - 1) % n]))

    def _ustring(self, arena: _Arena, text: str) -> tuple[int, int, int]:
        """Allocate a NUL-terminated UTF-16 buffer; returns (length, max_length, va)."""
        raw = text.encode("utf-16-le")
        va = arena.alloc(len(raw) + 2, align=2)
        self.write(va, raw + b"\0\0")
        return len(raw), len(raw) + 2, va

    def plant_drivers(self, arena: _Arena) -> tuple[int, int, int, list[DriverEntry]]:
        spec, lay = self.spec, DriverObjectLayout()
        hw_len, hw_max, hwdb_str = self._ustring(arena, HWDB_TEXT)
        hwdb_hdr = arena.alloc(8)
        self.write(hwdb_hdr, struct.pack("<HHI", hw_len, hw_max, hwdb_str))
        default_handler = self.kptr(align=2)
        directory = arena.alloc(4)
        drivers = []
        for _ in range(spec.n_drivers):
            quirky = spec.driver_quirks
            base = self.name(3, 10)
            sys_suffix = bool(self.rng.random() < 0.5) if quirky else True
            text = "\\Driver\\" + base + (".sys" if sys_suffix else "")
            n_len, n_max, name_va = self._ustring(arena, text)

            code = arena.alloc(0x40, align=PAGE_SIZE, pad=0)
            prologue = PROLOGUES[int(self.rng.integers(0, len(PROLOGUES)))]
            at = int(self.rng.integers(0, 0x10))
            self.write(code + at, prologue)
            pages = int(self.rng.integers(2, 64))
            size = pages * PAGE_SIZE
            if quirky and self.rng.random() < 0.3:
                size += int(self.rng.integers(1, PAGE_SIZE)) & ~1
            distinct = int(self.rng.integers(2, 9))
            majors = [default_handler] * lay.major_count
            for slot in self.rng.choice(lay.major_count - 1, size=distinct, replace=False).tolist():
                majors[slot + 1] = code + int(self.rng.integers(0x10, 0x1000)) // 2 * 2
            majors[0] = code + 0x40 if self.rng.random() < 0.5 else majors[0]

            obj = bytearray(self.rng.bytes(lay.total_size))
            struct.pack_into("<HH", obj, 0, lay.expected_type, lay.expected_size)
            struct.pack_into("<II", obj, 0x04, self.kptr(), 0x12)
            struct.pack_into("<II", obj, lay.driver_start, code, size)
            struct.pack_into("<I", obj, 0x14, self.kptr())
            struct.pack_into("<I", obj, lay.driver_extension, self.kptr())
            struct.pack_into("<HHI", obj, lay.driver_name, n_len, n_max, name_va)
            struct.pack_into("<I", obj, lay.hardware_database, hwdb_hdr)
            struct.pack_into("<IIII", obj, 0x28, 0, code + 0x80, 0, code + 0xC0)
            struct.pack_into(f"<{lay.major_count}I", obj, lay.major_function, *majors)
            va = arena.alloc(lay.total_size, align=8, pad=0x100)
            self.write(va, bytes(obj))
            drivers.append(DriverEntry(va, False, text, name_va, code, size, len(set(majors)),
                                       {"sys_suffix": sys_suffix, "prologue_at": at}))

        hidden = set(self.rng.choice(len(drivers), size=spec.n_hidden_drivers, replace=False).tolist())
        entries = [arena.alloc(DIR_ENTRY_SIZE, align=4) for _ in drivers]
        for i, (e, d) in enumerate(zip(entries, drivers)):
            self.write(e, struct.pack("<III", 0, d.va, int(self.rng.integers(0, 37))))
        listed = [e for i, e in enumerate(entries) if i not in hidden]
        # full chain first so hidden entries still point forward, then splice them out
        self._chain(directory, entries)
        self._chain(directory, listed)
        for i in hidden:
            drivers[i].hidden = True
        for d in drivers:
            d.major_distinct = len(set(struct.unpack_from(f"<{lay.major_count}I",
                                                          self.read(d.va + lay.major_function, 4 * lay.major_count))))
        return directory, hwdb_hdr, hwdb_str, drivers

    def _chain(self, head: int, entries: list[int]) -> None:
        self.write(head, struct.pack("<I", entries[0] if entries else 0))
        for e, nxt in zip(entries, entries[1:] + [0]):
            self.write(e, struct.pack("<I", nxt))

    def corrupt(self, procs: list[ProcessEntry], drivers: list[DriverEntry]) -> list[dict]:
        log = []
        for c in self.spec.corruption:
            va = (procs if c.kind == "process" else drivers)[c.index].va + c.offset
            old = self.read(va, 1)[0]
            self.write(va, bytes((c.value,)))
            log.append({"kind": c.kind, "index": c.index, "va": va, "offset": c.offset, "old": old, "new": c.value})
        return log

    def build(self) -> tuple[PhysicalImage, GroundTruthManifest]:
        root, runs, pages, excluded = self.build_paging()
        if (self.spec.n_processes or self.spec.n_drivers) and not runs:
            raise SpecTooLarge("no mapped memory left for planted objects")
        arena = _Arena(runs, self.rng)
        head, procs, directory, hwdb_hdr, hwdb_str, drivers = 0, [], 0, 0, 0, []
        if runs:
            head, procs = self.plant_processes(arena)
            directory, hwdb_hdr, hwdb_str, drivers = self.plant_drivers(arena)
        log = self.corrupt(procs, drivers)
        self.mem.flags.writeable = False
        manifest = GroundTruthManifest(
            mode=self.spec.mode.value, image_size=self.spec.image_size, seed=self.spec.seed,
            paging_root=root, prohibited=[tuple(r) for r in self.prohibited],
            process_list_head=head, driver_directory=directory,
            process_window=PROCESS_WINDOW, process_link_offset=PROCESS_LINK_OFFSET,
            hwdb_header_va=hwdb_hdr, hwdb_string_va=hwdb_str,
            processes=procs, drivers=drivers, corruptions=log, pages=pages, excluded_pages=excluded,
        )
        return PhysicalImage(self.mem, self.prohibited), manifest


def build_image(spec: SynthSpec) -> tuple[PhysicalImage, GroundTruthManifest]:
    return _Builder(spec).build()


def _read_u32(reader, va: int) -> int:
    raw = reader.read(va, 4)
    if raw is None:
        raise CorruptList(f"list link at {va:#x} is unmapped")
    return struct.unpack("<I", raw)[0]


def enumerate_reported_processes(reader, list_head: int, link_offset: int = PROCESS_LINK_OFFSET,
                                 backward: bool = False, limit: int = _LIST_LIMIT) -> list[int]:
    """Walk the process LIST_ENTRY chain from its head; returns window addresses."""
    step = 4 if backward else 0
    out = []
    node = _read_u32(reader, list_head + step)
    while node != list_head:
        if len(out) >= limit or node == 0:
            raise CorruptList("process list does not return to its head")
        out.append(node - link_offset)
        node = _read_u32(reader, node + step)
    return out[::-1] if backward else out


def enumerate_reported_drivers(reader, directory_head: int, limit: int = _LIST_LIMIT) -> list[int]:
    out = []
    entry = _read_u32(reader, directory_head)
    while entry:
        if len(out) >= limit:
            raise CorruptList("driver directory does not terminate")
        out.append(_read_u32(reader, entry + 4))
        entry = _read_u32(reader, entry)
    return out


def process_windows(reader, addresses: Iterable[int], window: int = PROCESS_WINDOW) -> list[bytes]:
    out = []
    for va in addresses:
        raw = reader.read(va, window)
        if raw is None:
            raise CorruptList(f"process window at {va:#x} is not readable")
        out.append(raw)
    return out
