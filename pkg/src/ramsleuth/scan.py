"""Pattern search over a loaded dump, plus the chunked worker engine shared by
the structure detectors.

Candidate positions never straddle a translation record: two records that are
adjacent in the payload are unrelated in virtual memory.  Alignment (stride)
is measured from the start of each record.
"""

from __future__ import annotations

import enum
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, NamedTuple, Sequence, TypeVar

import numpy as np

from .dumpstore import LoadedDump

T = TypeVar("T")

DEFAULT_CHUNK_WINDOWS = 1 << 20


class PatternKind(str, enum.Enum):
    BYTES = "bytes"
    NARROW = "narrow"
    WIDE = "wide"
    POINTER32 = "pointer32"
    PUNICODE = "punicode"


class Pattern(NamedTuple):
    kind: PatternKind
    payload: bytes
    stride: int = 1

    @classmethod
    def raw(cls, data: bytes, stride: int = 1) -> "Pattern":
        return cls(PatternKind.BYTES, bytes(data), stride)

    @classmethod
    def narrow(cls, text: str, stride: int = 1) -> "Pattern":
        return cls(PatternKind.NARROW, text.encode("latin-1"), stride)

    @classmethod
    def wide(cls, text: str, stride: int = 1) -> "Pattern":
        return cls(PatternKind.WIDE, text.encode("utf-16-le"), stride)

    @classmethod
    def pointer(cls, value: int) -> "Pattern":
        return cls(PatternKind.POINTER32, struct.pack("<I", value & 0xFFFFFFFF), 4)

    def validate(self) -> None:
        if self.stride not in (1, 4):
            raise ValueError("stride must be 1 or 4")
        if not self.payload:
            raise ValueError("empty pattern")
        if self.kind is PatternKind.POINTER32 and len(self.payload) != 4:
            raise ValueError("pointer patterns are 4 bytes")
        if self.kind is PatternKind.WIDE and len(self.payload) % 2:
            raise ValueError("wide patterns have even length")


class ScanHit(NamedTuple):
    vaom: int
    oduf: int
    kind: str


class Chunk(NamedTuple):
    """``count`` candidate windows starting at payload offset ``base``, ``stride`` apart."""

    base: int
    count: int
    stride: int
    window: int
    va_base: int

    @property
    def end(self) -> int:
        return self.base + (self.count - 1) * self.stride + self.window


def plan_chunks(d: LoadedDump, window: int, stride: int,
                chunk_windows: int = DEFAULT_CHUNK_WINDOWS) -> list[Chunk]:
    """Split every record into chunks of candidate windows that fit inside it."""
    chunks = []
    for off, length, va in d.segments():
        if length < window:
            continue
        total = (length - window) // stride + 1
        for first in range(0, total, chunk_windows):
            count = min(chunk_windows, total - first)
            chunks.append(Chunk(off + first * stride, count, stride, window, va + first * stride))
    return chunks


def resolve_workers(workers: int | None) -> int:
    return max(1, workers if workers else (os.cpu_count() or 1))


def run_chunks(fn: Callable[[Chunk], list[T]], chunks: Sequence[Chunk], workers: int | None = None) -> list[T]:
    """Apply ``fn`` to every chunk and concatenate in chunk order.

    Results are independent of the worker count: each chunk is pure and the
    merge order is fixed by the plan.
    """
    workers = resolve_workers(workers)
    if workers == 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    return [item for part in parts for item in part]


def field_view(payload: bytes, chunk: Chunk, offset: int, dtype: str, count: int | None = None) -> np.ndarray:
    """Field at ``offset`` of every window in ``chunk`` as a strided array (no copy)."""
    return np.ndarray(shape=(chunk.count if count is None else count,), dtype=dtype, buffer=payload,
                      offset=chunk.base + offset, strides=(chunk.stride,))


def _hits(d: LoadedDump, offsets: Iterable[int], kind: str) -> list[ScanHit]:
    # ascending by vaom, which differs from payload order across records
    return sorted(ScanHit(d.oduf_to_vaom(o), o, kind) for o in set(offsets))


def _find_in_chunk(payload: bytes, chunk: Chunk, needle: bytes) -> list[int]:
    data = payload[chunk.base:chunk.end]
    limit = chunk.count * chunk.stride
    found = []
    pos = data.find(needle)
    while 0 <= pos < limit:
        if pos % chunk.stride == 0:
            found.append(chunk.base + pos)
        pos = data.find(needle, pos + 1)
    return found


def find_pattern(d: LoadedDump, p: Pattern, workers: int | None = None,
                 chunk_windows: int = DEFAULT_CHUNK_WINDOWS) -> list[ScanHit]:
    p.validate()
    chunks = plan_chunks(d, len(p.payload), p.stride, chunk_windows)
    if p.stride == 4 and len(p.payload) == 4:
        value = struct.unpack("<I", p.payload)[0]
        offsets = run_chunks(lambda c: _match_u32(d.payload, c, np.array([value], dtype=np.uint32)),
                             chunks, workers)
    else:
        offsets = run_chunks(lambda c: _find_in_chunk(d.payload, c, p.payload), chunks, workers)
    return _hits(d, offsets, p.kind.value)


def _match_u32(payload: bytes, chunk: Chunk, values: np.ndarray) -> list[int]:
    col = field_view(payload, chunk, 0, "<u4")
    mask = col == values[0] if len(values) == 1 else np.isin(col, values)
    idx = np.flatnonzero(mask)
    return (chunk.base + idx * chunk.stride).tolist()


def find_pointers_to_any(d: LoadedDump, targets: Iterable[int], workers: int | None = None,
                         kind: str = PatternKind.POINTER32.value,
                         chunk_windows: int = DEFAULT_CHUNK_WINDOWS) -> list[ScanHit]:
    """4-aligned cells holding any of ``targets`` as a little-endian u32."""
    values = np.unique(np.array([t & 0xFFFFFFFF for t in targets], dtype=np.uint32))
    if values.size == 0:
        return []
    chunks = plan_chunks(d, 4, 4, chunk_windows)
    return _hits(d, run_chunks(lambda c: _match_u32(d.payload, c, values), chunks, workers), kind)


def find_pointers_to(d: LoadedDump, target: int, workers: int | None = None) -> list[ScanHit]:
    return find_pointers_to_any(d, [target], workers)


def find_punicode_refs(d: LoadedDump, string_va: int, workers: int | None = None) -> list[ScanHit]:
    """Cells pointing at a UNICODE_STRING header whose Buffer is ``string_va``.

    Buffer sits 4 bytes into the header, so every cell holding ``string_va``
    nominates a header at ``cell - 4``; we then look for pointers to those.
    """
    buffers = find_pointers_to(d, string_va, workers)
    headers = {h.vaom - 4 for h in buffers}
    return find_pointers_to_any(d, headers, workers, kind=PatternKind.PUNICODE.value)
