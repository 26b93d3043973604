"""Flat physical address space with frame-granular access and a prohibited-range list."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import InvalidRange, OutOfBounds, Prohibited

PAGE_SIZE = 0x1000


class PhysRange(NamedTuple):
    start: int
    end: int  # exclusive

    def overlaps(self, start: int, end: int) -> bool:
        return self.start < end and start < self.end


def pfn_to_phys(pfn: int) -> int:
    return pfn * PAGE_SIZE


def normalize_ranges(ranges: Iterable[tuple[int, int]], size_bytes: int) -> tuple[PhysRange, ...]:
    """Validate prohibited ranges and return them sorted.

    Unaligned, empty, out-of-image or overlapping ranges are rejected rather than
    rounded.
    """
    out = sorted(PhysRange(int(s), int(e)) for s, e in ranges)
    prev_end = 0
    for r in out:
        if r.start >= r.end:
            raise InvalidRange(f"empty or inverted range {r.start:#x}-{r.end:#x}")
        if r.start % PAGE_SIZE or r.end % PAGE_SIZE:
            raise InvalidRange(f"range {r.start:#x}-{r.end:#x} is not frame aligned")
        if r.end > size_bytes:
            raise InvalidRange(f"range {r.start:#x}-{r.end:#x} exceeds image size {size_bytes:#x}")
        if r.start < prev_end:
            raise InvalidRange(f"range {r.start:#x}-{r.end:#x} overlaps its predecessor")
        prev_end = r.end
    return tuple(out)


@dataclass(frozen=True)
class PhysicalImage:
    """Immutable view of physical memory starting at address 0.

    ``data`` is any buffer (bytes, mmap, read-only numpy array).
    """

    data: bytes | np.ndarray
    prohibited: tuple[PhysRange, ...] = ()
    _starts: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        size = len(self.data)
        if size % PAGE_SIZE:
            raise InvalidRange(f"image size {size:#x} is not a multiple of {PAGE_SIZE:#x}")
        rngs = normalize_ranges(self.prohibited, size)
        object.__setattr__(self, "prohibited", rngs)
        object.__setattr__(self, "_starts", tuple(r.start for r in rngs))

    @classmethod
    def from_file(cls, path: str | Path, prohibited: Iterable[tuple[int, int]] = (), mmap: bool = True):
        if mmap:
            data = np.memmap(path, dtype=np.uint8, mode="r")
        else:
            data = Path(path).read_bytes()
        return cls(data, tuple(prohibited))

    @property
    def size_bytes(self) -> int:
        return len(self.data)

    def is_prohibited(self, addr: int) -> bool:
        i = bisect.bisect_right(self._starts, addr) - 1
        return i >= 0 and addr < self.prohibited[i].end

    def prohibited_overlaps(self, addr: int, length: int) -> list[PhysRange]:
        """Prohibited ranges intersecting ``[addr, addr+length)``."""
        if length <= 0:
            return []
        end = addr + length
        i = max(bisect.bisect_right(self._starts, addr) - 1, 0)
        hits = []
        for r in self.prohibited[i:]:
            if r.start >= end:
                break
            if r.overlaps(addr, end):
                hits.append(r)
        return hits

    def read_phys(self, addr: int, length: int) -> bytes:
        if addr < 0 or length < 0 or addr + length > self.size_bytes:
            raise OutOfBounds(f"read {addr:#x}+{length:#x} exceeds image size {self.size_bytes:#x}")
        if self.prohibited_overlaps(addr, length):
            raise Prohibited(f"read {addr:#x}+{length:#x} touches a prohibited range")
        return bytes(self.data[addr:addr + length])

    def probe_phys(self, addr: int, length: int) -> tuple[bytes, list[PhysRange]]:
        """Non-erroring read: returns the bytes plus any prohibited overlaps."""
        if addr < 0 or length < 0 or addr + length > self.size_bytes:
            raise OutOfBounds(f"read {addr:#x}+{length:#x} exceeds image size {self.size_bytes:#x}")
        return bytes(self.data[addr:addr + length]), self.prohibited_overlaps(addr, length)

    def table(self, addr: int, dtype: str) -> np.ndarray:
        """One 4-KiB frame reinterpreted as an entry array (no prohibited check)."""
        if addr < 0 or addr + PAGE_SIZE > self.size_bytes:
            raise OutOfBounds(f"frame {addr:#x} outside image")
        return np.frombuffer(self.data, dtype=dtype, count=PAGE_SIZE // np.dtype(dtype).itemsize, offset=addr)


def read_phys(img: PhysicalImage, addr: int, length: int) -> bytes:
    return img.read_phys(addr, length)


def is_prohibited(img: PhysicalImage, addr: int) -> bool:
    return img.is_prohibited(addr)
