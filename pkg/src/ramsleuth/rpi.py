"""Rating point inspection for DRIVER_OBJECT-like structures.

Each candidate window is scored by summing the points of independent
plausibility checks.  A window is accepted when its global score reaches
``global_scope``; failing that, when its deep score reaches
``global_scope_deep``.  Both thresholds, plus ``min_major_function``, are the
minima observed over drivers the OS still lists, so every listed driver is
accepted by construction.

Zero values are never plausible: a NULL DriverStart or a zero DriverSize does
not count as page aligned, and NULL MajorFunction slots are ignored when
counting shared handlers, so zero-filled memory scores nothing outside the
name-header rows.

All dereferences (name buffers, HardwareDatabase, code at DriverStart) go
through the dump and fail soft: an unreadable target scores 0 for its row.

Character printability is pinned to a fixed allowlist instead of a locale:
U+0020-U+007E, U+00A0-U+024F (Latin-1 and Latin Extended-A/B),
U+0370-U+03FF (Greek) and U+0400-U+04FF (Cyrillic).

Scanning computes the in-window rows for all candidates with numpy and only
evaluates dereferencing rows for windows whose best possible score can still
reach a threshold.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Protocol, Sequence

import numpy as np

from .dumpstore import LoadedDump
from .errors import EmptyKnownSet, EmptyList, FormatError
from .scan import Chunk, field_view, plan_chunks, run_chunks

PRINTABLE_RANGES = ((0x20, 0x7E), (0xA0, 0x24F), (0x370, 0x3FF), (0x400, 0x4FF))
PROLOGUES = (b"\x55\x89\xe5", b"\x55\x8b\xec", b"\x53\x56", b"\x56\x57", b"\x8b\xff")
PROLOGUE_SPAN = 0x10
WCSLEN_CAP = 0x100
SHORT_NAME_LIMIT = 0x50
KERNEL_BIT = 0x80000000

GLOBAL_WEIGHTS = {
    "type": 2,
    "size": 4,
    "driver_name": 2,
    "hardware_database": 2,
    "major_function_kernel": 2,
    "major_function_same": 2,
}
DEEP_WEIGHTS = {
    "type": 2,
    "size": 2,
    "driver_start_kernel": 2,
    "driver_start_aligned": 2,
    "driver_size_aligned": 2,
    "function_prologue": 4,
    "driver_extension_kernel": 2,
    "hardware_database": 2,
    "major_function_kernel": 2,
    "major_function_same": 2,
}
NAME_WEIGHTS = {
    "max_length_covers": 2,
    "short": 4,
    "valid": 2,
    "sys_suffix": 2,
    "wcslen_fits": 2,
}


class Reader(Protocol):
    def read(self, va: int, length: int) -> bytes | None: ...


class UnicodeStringHeader(NamedTuple):
    length: int
    maximum_length: int
    buffer: int

    @classmethod
    def parse(cls, raw: bytes) -> "UnicodeStringHeader":
        return cls(*struct.unpack_from("<HHI", raw))


@dataclass(frozen=True)
class DriverObjectLayout:
    type_offset: int = 0x00
    size_offset: int = 0x02
    driver_start: int = 0x0C
    driver_size: int = 0x10
    driver_extension: int = 0x18
    driver_name: int = 0x1C
    hardware_database: int = 0x24
    major_function: int = 0x38
    major_count: int = 28
    total_size: int = 0xA8
    expected_type: int = 0x04
    expected_size: int = 0xA8

    def __post_init__(self):
        if self.major_count < 1:
            raise ValueError("major_count must be at least 1")
        widths = {
            self.type_offset: 2, self.size_offset: 2, self.driver_start: 4, self.driver_size: 4,
            self.driver_extension: 4, self.driver_name: 8, self.hardware_database: 4,
            self.major_function: 4 * self.major_count,
        }
        for off, width in widths.items():
            if off < 0 or off + width > self.total_size:
                raise ValueError(f"field at {off:#x} (+{width}) exceeds the structure size {self.total_size:#x}")


@dataclass(frozen=True)
class RpiProfile:
    layout: DriverObjectLayout = field(default_factory=DriverObjectLayout)
    weights_global: dict = field(default_factory=lambda: dict(GLOBAL_WEIGHTS))
    weights_deep: dict = field(default_factory=lambda: dict(DEEP_WEIGHTS))
    weights_name: dict = field(default_factory=lambda: dict(NAME_WEIGHTS))
    min_major_function: int | None = None
    global_scope: int | None = None
    global_scope_deep: int | None = None
    strict_sys_check: bool = False

    def __post_init__(self):
        for table, names in ((self.weights_global, GLOBAL_WEIGHTS), (self.weights_deep, DEEP_WEIGHTS),
                             (self.weights_name, NAME_WEIGHTS)):
            if set(table) != set(names):
                raise ValueError(f"weight rows must be exactly {sorted(names)}")
            if any(w < 0 for w in table.values()):
                raise ValueError("weights must be nonnegative")
        for name in ("min_major_function", "global_scope", "global_scope_deep"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.global_scope is not None and self.global_scope > self.max_global:
            raise ValueError(f"global_scope {self.global_scope} exceeds the maximum {self.max_global}")
        if self.global_scope_deep is not None and self.global_scope_deep > self.max_deep:
            raise ValueError(f"global_scope_deep {self.global_scope_deep} exceeds the maximum {self.max_deep}")

    @property
    def max_global(self) -> int:
        return sum(self.weights_global.values())

    @property
    def max_deep(self) -> int:
        return sum(self.weights_deep.values()) + sum(self.weights_name.values())

    @property
    def ready(self) -> bool:
        return None not in (self.min_major_function, self.global_scope, self.global_scope_deep)

    def with_thresholds(self, min_major_function: int, global_scope: int, global_scope_deep: int) -> "RpiProfile":
        return replace(self, min_major_function=min_major_function, global_scope=global_scope,
                       global_scope_deep=global_scope_deep)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["thresholds"] = {k: out.pop(k) for k in ("min_major_function", "global_scope", "global_scope_deep")}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RpiProfile":
        data = dict(data)
        thresholds = data.pop("thresholds", None) or {}
        try:
            layout = DriverObjectLayout(**data.pop("layout", {}))
            return cls(layout=layout, **data, **thresholds)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad RPI profile: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RpiProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


class RpiMatch(NamedTuple):
    vaom: int
    score_global: int
    score_deep: int | None
    accepted_via: str  # "global", "deep" or "rejected"


def _u32(raw: bytes, off: int) -> int:
    return struct.unpack_from("<I", raw, off)[0]


def _u16(raw: bytes, off: int) -> int:
    return struct.unpack_from("<H", raw, off)[0]


def is_printable(units: np.ndarray) -> bool:
    ok = np.zeros(units.shape, dtype=bool)
    for lo, hi in PRINTABLE_RANGES:
        ok |= (units >= lo) & (units <= hi)
    return bool(ok.all())


def _read_prefix(reader: Reader, va: int, length: int) -> bytes:
    """Longest readable prefix of ``[va, va+length)``."""
    if va == 0:
        return b""
    whole = reader.read(va, length)
    if whole is not None:
        return whole
    out = b""
    while length > 0:
        n = min(length, 0x1000 - (va & 0xFFF))
        part = reader.read(va, n)
        if part is None:
            break
        out += part
        va += n
        length -= n
    return out


def chk_unicode_string(reader: Reader, us: UnicodeStringHeader) -> bool:
    if us.maximum_length < us.length or us.buffer == 0 or us.length % 2:
        return False
    if us.length == 0:
        return True
    raw = reader.read(us.buffer, us.length)
    if raw is None:
        return False
    return is_printable(np.frombuffer(raw, dtype="<u2"))


def _wcslen(reader: Reader, va: int) -> int:
    raw = _read_prefix(reader, va, WCSLEN_CAP * 2)
    units = np.frombuffer(raw[:len(raw) // 2 * 2], dtype="<u2")
    zeros = np.flatnonzero(units == 0)
    return int(zeros[0]) if zeros.size else int(units.size)


def _has_sys(reader: Reader, us: UnicodeStringHeader, strict: bool) -> bool:
    if strict:
        # _memicmp(Buffer, L".sys", MaximumLength) taken literally: truthy when the bytes differ
        n = us.maximum_length
        if n == 0:
            return False
        raw = reader.read(us.buffer, n) if us.buffer else None
        if raw is None:
            return False
        ref = ".sys".encode("utf-16-le").ljust(n, b"\0")[:n]
        return raw.lower() != ref
    if us.buffer == 0 or us.length < 8:
        return False
    raw = reader.read(us.buffer, us.length - us.length % 2)
    if raw is None:
        return False
    return ".sys" in raw.decode("utf-16-le", errors="replace").lower()


def name_rows(reader: Reader, us: UnicodeStringHeader, weights: dict = NAME_WEIGHTS,
              strict_sys: bool = False) -> dict[str, int]:
    return {
        "max_length_covers": weights["max_length_covers"] * (us.maximum_length >= us.length),
        "short": weights["short"] * (us.maximum_length <= SHORT_NAME_LIMIT and us.length <= SHORT_NAME_LIMIT),
        "valid": weights["valid"] * chk_unicode_string(reader, us),
        "sys_suffix": weights["sys_suffix"] * _has_sys(reader, us, strict_sys),
        "wcslen_fits": weights["wcslen_fits"] * (_wcslen(reader, us.buffer) <= us.length),
    }


def chk_unicode_string2(reader: Reader, us: UnicodeStringHeader, weights: dict = NAME_WEIGHTS,
                        strict_sys: bool = False) -> int:
    return sum(name_rows(reader, us, weights, strict_sys).values())


def check_function_prologue(reader: Reader, code_va: int) -> bool:
    raw = reader.read(code_va, PROLOGUE_SPAN + 2)
    if raw is None:
        return False
    return any(raw.startswith(p, i) for i in range(PROLOGUE_SPAN) for p in PROLOGUES)


def _max_same(raw: bytes, layout: DriverObjectLayout) -> int:
    # NULL slots are not handler addresses and never count
    entries = [e for e in struct.unpack_from(f"<{layout.major_count}I", raw, layout.major_function) if e]
    return Counter(entries).most_common(1)[0][1] if entries else 0


def max_same_major_functions(reader: Reader, candidate_va: int, layout: DriverObjectLayout | None = None) -> int:
    layout = layout or DriverObjectLayout()
    raw = reader.read(candidate_va, layout.total_size)
    return 0 if raw is None else _max_same(raw, layout)


def _hwdb_valid(reader: Reader, pointer: int) -> bool:
    raw = reader.read(pointer, 8) if pointer else None
    return raw is not None and chk_unicode_string(reader, UnicodeStringHeader.parse(raw))


def global_rows(reader: Reader, raw: bytes, profile: RpiProfile) -> dict[str, int]:
    """Row-by-row points for the global table; ``raw`` is the candidate window."""
    lay, w = profile.layout, profile.weights_global
    min_major = profile.min_major_function
    return {
        "type": w["type"] * (_u16(raw, lay.type_offset) == lay.expected_type),
        "size": w["size"] * (_u16(raw, lay.size_offset) == lay.expected_size),
        "driver_name": w["driver_name"] * chk_unicode_string(
            reader, UnicodeStringHeader.parse(raw[lay.driver_name:lay.driver_name + 8])),
        "hardware_database": w["hardware_database"] * _hwdb_valid(reader, _u32(raw, lay.hardware_database)),
        "major_function_kernel": w["major_function_kernel"] * bool(_u32(raw, lay.major_function) & KERNEL_BIT),
        "major_function_same": w["major_function_same"] * (
            min_major is not None and _max_same(raw, lay) >= min_major),
    }


def deep_rows(reader: Reader, raw: bytes, profile: RpiProfile) -> dict[str, int]:
    lay, w = profile.layout, profile.weights_deep
    start = _u32(raw, lay.driver_start)
    min_major = profile.min_major_function
    name = UnicodeStringHeader.parse(raw[lay.driver_name:lay.driver_name + 8])
    return {
        "type": w["type"] * (_u16(raw, lay.type_offset) == lay.expected_type),
        "size": w["size"] * (_u16(raw, lay.size_offset) == lay.expected_size),
        "driver_start_kernel": w["driver_start_kernel"] * bool(start & KERNEL_BIT),
        "driver_start_aligned": w["driver_start_aligned"] * (start != 0 and start % 0x1000 == 0),
        "driver_size_aligned": w["driver_size_aligned"] * (_page_multiple(_u32(raw, lay.driver_size))),
        "function_prologue": w["function_prologue"] * check_function_prologue(reader, start),
        "driver_extension_kernel": w["driver_extension_kernel"] * bool(_u32(raw, lay.driver_extension) & KERNEL_BIT),
        "driver_name": chk_unicode_string2(reader, name, profile.weights_name, profile.strict_sys_check),
        "hardware_database": w["hardware_database"] * _hwdb_valid(reader, _u32(raw, lay.hardware_database)),
        "major_function_kernel": w["major_function_kernel"] * bool(_u32(raw, lay.major_function) & KERNEL_BIT),
        "major_function_same": w["major_function_same"] * (
            min_major is not None and _max_same(raw, lay) >= min_major),
    }


def _page_multiple(value: int) -> bool:
    return value != 0 and value % 0x1000 == 0


def _window(reader: Reader, va: int, profile: RpiProfile) -> bytes | None:
    return reader.read(va, profile.layout.total_size)


def score_global(reader: Reader, candidate_va: int, profile: RpiProfile) -> int:
    raw = _window(reader, candidate_va, profile)
    return 0 if raw is None else sum(global_rows(reader, raw, profile).values())


def score_deep(reader: Reader, candidate_va: int, profile: RpiProfile) -> int:
    raw = _window(reader, candidate_va, profile)
    return 0 if raw is None else sum(deep_rows(reader, raw, profile).values())


def derive_thresholds(reader: Reader, known_drivers: Sequence[int],
                      profile: RpiProfile | None = None) -> tuple[int, int, int]:
    """(min_major_function, global_scope, global_scope_deep) over listed drivers.

    min_major_function is fixed first because both tables have a row that
    depends on it.
    """
    if not known_drivers:
        raise EmptyKnownSet("no listed drivers to learn thresholds from; supply them manually")
    profile = profile or RpiProfile()
    min_major = min(max_same_major_functions(reader, va, profile.layout) for va in known_drivers)
    fixed = replace(profile, min_major_function=min_major, global_scope=None, global_scope_deep=None)
    gs = min(score_global(reader, va, fixed) for va in known_drivers)
    gsd = min(score_deep(reader, va, fixed) for va in known_drivers)
    return min_major, gs, gsd


def evaluate(reader: Reader, candidate_va: int, profile: RpiProfile) -> RpiMatch:
    """Two-stage decision for a single candidate."""
    raw = _window(reader, candidate_va, profile)
    if raw is None:
        return RpiMatch(candidate_va, 0, None, "rejected")
    g = sum(global_rows(reader, raw, profile).values())
    if g >= profile.global_scope:
        return RpiMatch(candidate_va, g, None, "global")
    deep = sum(deep_rows(reader, raw, profile).values())
    return RpiMatch(candidate_va, g, deep, "deep" if deep >= profile.global_scope_deep else "rejected")


def _bounds(payload: bytes, chunk: Chunk, profile: RpiProfile) -> tuple[np.ndarray, np.ndarray]:
    """Upper bounds of both scores for every window in the chunk."""
    lay, wg, wd, wn = profile.layout, profile.weights_global, profile.weights_deep, profile.weights_name

    def col(off, dt):
        return field_view(payload, chunk, off, dt)

    is_type = col(lay.type_offset, "<u2") == lay.expected_type
    is_size = col(lay.size_offset, "<u2") == lay.expected_size
    mf_kernel = col(lay.major_function, "<u4") >= KERNEL_BIT
    start = col(lay.driver_start, "<u4")
    dsize = col(lay.driver_size, "<u4")
    name_len = col(lay.driver_name, "<u2")
    name_max = col(lay.driver_name + 2, "<u2")

    g = (wg["type"] * is_type + wg["size"] * is_size + wg["major_function_kernel"] * mf_kernel).astype(np.int32)
    g += wg["driver_name"] + wg["hardware_database"] + wg["major_function_same"]

    d = (wd["type"] * is_type + wd["size"] * is_size + wd["major_function_kernel"] * mf_kernel
         + wd["driver_start_kernel"] * (start >= KERNEL_BIT)
         + wd["driver_start_aligned"] * ((start != 0) & (start % 0x1000 == 0))
         + wd["driver_size_aligned"] * ((dsize != 0) & (dsize % 0x1000 == 0))
         + wd["driver_extension_kernel"] * (col(lay.driver_extension, "<u4") >= KERNEL_BIT)
         + wn["max_length_covers"] * (name_max >= name_len)
         + wn["short"] * ((name_max <= SHORT_NAME_LIMIT) & (name_len <= SHORT_NAME_LIMIT))).astype(np.int32)
    d += (wd["function_prologue"] + wd["hardware_database"] + wd["major_function_same"]
          + wn["valid"] + wn["sys_suffix"] + wn["wcslen_fits"])
    return g, d


def _scan_chunk(d: LoadedDump, chunk: Chunk, profile: RpiProfile) -> list[RpiMatch]:
    g_hi, d_hi = _bounds(d.payload, chunk, profile)
    maybe = np.flatnonzero((g_hi >= profile.global_scope) | (d_hi >= profile.global_scope_deep))
    out = []
    for i in maybe.tolist():
        m = evaluate(d, chunk.va_base + i * chunk.stride, profile)
        if m.accepted_via != "rejected":
            out.append(m)
    return out


def rpi_scan(d: LoadedDump, profile: RpiProfile, stride: int = 4, workers: int | None = None,
             chunk_windows: int = 1 << 20) -> list[RpiMatch]:
    """Accepted candidates ascending by virtual address."""
    if not profile.ready:
        raise ValueError("RPI thresholds are not set; derive them or load a profile that has them")
    if stride not in (1, 4):
        raise ValueError("stride must be 1 or 4")
    chunks = plan_chunks(d, profile.layout.total_size, stride, chunk_windows)
    return sorted(run_chunks(lambda c: _scan_chunk(d, c, profile), chunks, workers))


def center_of_mass(addresses: Iterable[int]) -> int:
    addrs = list(addresses)
    if not addrs:
        raise EmptyList("center of mass of an empty address list")
    return sum(addrs) // len(addrs)


def rank_by_center(matches: Sequence[RpiMatch], center: int) -> list[RpiMatch]:
    """Matches nearest the center first (ties broken by address)."""
    return sorted(matches, key=lambda m: (abs(m.vaom - center), m.vaom))
