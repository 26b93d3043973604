"""32-bit x86 page-table decoding (legacy 2-level and PAE 3-level).

Walks run from the highest table index down to the lowest, so the page list
comes out in descending virtual-address order.  Entries whose backing frames
are prohibited or lie outside the image are skipped, as are page tables that
live in prohibited frames.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .errors import InvalidRoot, MalformedTable, NotPresent, OutOfBounds, Prohibited, RamSleuthError
from .image import PAGE_SIZE, PhysicalImage

P_FLAG = 0x1
PS_FLAG = 0x80

LEGACY_TABLE_MASK = 0xFFFFF000
LEGACY_LARGE_MASK = 0xFFC00000
PAE_TABLE_MASK = 0x000FFFFFFFFFF000
PAE_LARGE_MASK = 0x000FFFFFFFE00000


class PagingMode(str, enum.Enum):
    LEGACY32 = "legacy32"
    PAE32 = "pae32"

    @property
    def large_page_size(self) -> int:
        return 0x400000 if self is PagingMode.LEGACY32 else 0x200000

    @property
    def entry_dtype(self) -> str:
        return "<u4" if self is PagingMode.LEGACY32 else "<u8"


class VirtualPage(NamedTuple):
    va_start: int
    size: int
    phys_start: int

    @property
    def va_end(self) -> int:
        return self.va_start + self.size


class PageDirectoryEntry(NamedTuple):
    raw: int
    mode: PagingMode

    @property
    def present(self) -> bool:
        return bool(self.raw & P_FLAG)

    @property
    def large(self) -> bool:
        return bool(self.raw & PS_FLAG)

    @property
    def pfn(self) -> int:
        if self.mode is PagingMode.LEGACY32:
            mask = LEGACY_LARGE_MASK if self.large else LEGACY_TABLE_MASK
        else:
            mask = PAE_LARGE_MASK if self.large else PAE_TABLE_MASK
        return (self.raw & mask) >> 12


class PageTableEntry(NamedTuple):
    raw: int
    mode: PagingMode

    @property
    def present(self) -> bool:
        return bool(self.raw & P_FLAG)

    @property
    def pfn(self) -> int:
        mask = LEGACY_TABLE_MASK if self.mode is PagingMode.LEGACY32 else PAE_TABLE_MASK
        return (self.raw & mask) >> 12


def _leaf_ok(img: PhysicalImage, phys: int, size: int) -> bool:
    return phys + size <= img.size_bytes and not img.prohibited_overlaps(phys, size)


def _table(img: PhysicalImage, addr: int, dtype: str) -> np.ndarray | None:
    """Next-level table, or None when it sits in a prohibited frame."""
    if addr + PAGE_SIZE > img.size_bytes:
        raise MalformedTable(f"table frame {addr:#x} lies outside the image")
    if img.is_prohibited(addr):
        return None
    return img.table(addr, dtype)


def _present_desc(entries: np.ndarray) -> np.ndarray:
    return np.flatnonzero(entries & P_FLAG)[::-1]


def _walk_pt(img: PhysicalImage, pt: np.ndarray, va_base: int, mask: int) -> Iterator[VirtualPage]:
    for j in _present_desc(pt):
        phys = int(pt[j]) & mask
        if _leaf_ok(img, phys, PAGE_SIZE):
            yield VirtualPage(va_base | (int(j) << 12), PAGE_SIZE, phys)


def _walk_legacy(img: PhysicalImage, root: int) -> Iterator[VirtualPage]:
    if root % PAGE_SIZE or root < 0 or root + PAGE_SIZE > img.size_bytes:
        raise InvalidRoot(f"page directory root {root:#x} is unaligned or outside the image")
    pd = img.table(root, "<u4")
    for i in _present_desc(pd):
        pde = int(pd[i])
        va = int(i) << 22
        if pde & PS_FLAG:
            phys = pde & LEGACY_LARGE_MASK
            if _leaf_ok(img, phys, 0x400000):
                yield VirtualPage(va, 0x400000, phys)
            continue
        pt = _table(img, pde & LEGACY_TABLE_MASK, "<u4")
        if pt is not None:
            yield from _walk_pt(img, pt, va, LEGACY_TABLE_MASK)


def _walk_pae(img: PhysicalImage, root: int) -> Iterator[VirtualPage]:
    if root % 0x20 or root < 0 or root + 0x20 > img.size_bytes:
        raise InvalidRoot(f"PDPT root {root:#x} is unaligned or outside the image")
    pdpt = np.frombuffer(img.data, dtype="<u8", count=4, offset=root)
    for i in _present_desc(pdpt):
        pd = _table(img, int(pdpt[i]) & PAE_TABLE_MASK, "<u8")
        if pd is None:
            continue
        for j in _present_desc(pd):
            pde = int(pd[j])
            va = (int(i) << 30) | (int(j) << 21)
            if pde & PS_FLAG:
                phys = pde & PAE_LARGE_MASK
                if _leaf_ok(img, phys, 0x200000):
                    yield VirtualPage(va, 0x200000, phys)
                continue
            pt = _table(img, pde & PAE_TABLE_MASK, "<u8")
            if pt is not None:
                yield from _walk_pt(img, pt, va, PAE_TABLE_MASK)


# A 4-level decoder registers here once 64-bit images are supported.
WALKERS: dict[PagingMode, Callable[[PhysicalImage, int], Iterator[VirtualPage]]] = {
    PagingMode.LEGACY32: _walk_legacy,
    PagingMode.PAE32: _walk_pae,
}


def enumerate_pages(img: PhysicalImage, root: int, mode: PagingMode | str) -> list[VirtualPage]:
    """Every present, dumpable page in descending virtual-address order."""
    return list(WALKERS[PagingMode(mode)](img, root))


def _entry(img: PhysicalImage, addr: int, dtype: str) -> int:
    width = np.dtype(dtype).itemsize
    if addr + width > img.size_bytes:
        raise MalformedTable(f"table entry {addr:#x} lies outside the image")
    if img.is_prohibited(addr):
        raise Prohibited(f"table at {addr:#x} is in a prohibited range")
    return int(np.frombuffer(img.data, dtype=dtype, count=1, offset=addr)[0])


def _resolve(img: PhysicalImage, phys: int, size: int, va: int) -> int:
    if phys + size > img.size_bytes:
        raise OutOfBounds(f"va {va:#x} maps outside the image ({phys:#x})")
    if img.prohibited_overlaps(phys, size):
        raise Prohibited(f"va {va:#x} maps into a prohibited range")
    return phys + (va & (size - 1))


def translate(img: PhysicalImage, root: int, mode: PagingMode | str, va: int) -> int:
    mode = PagingMode(mode)
    if not 0 <= va <= 0xFFFFFFFF:
        raise NotPresent(f"va {va:#x} is outside the 32-bit address space")
    if mode is PagingMode.LEGACY32:
        if root % PAGE_SIZE or root + PAGE_SIZE > img.size_bytes:
            raise InvalidRoot(f"page directory root {root:#x} is unaligned or outside the image")
        pde = _entry(img, root + (va >> 22) * 4, "<u4")
        if not pde & P_FLAG:
            raise NotPresent(f"PDE for {va:#x} not present")
        if pde & PS_FLAG:
            return _resolve(img, pde & LEGACY_LARGE_MASK, 0x400000, va)
        pte = _entry(img, (pde & LEGACY_TABLE_MASK) + ((va >> 12) & 0x3FF) * 4, "<u4")
        if not pte & P_FLAG:
            raise NotPresent(f"PTE for {va:#x} not present")
        return _resolve(img, pte & LEGACY_TABLE_MASK, PAGE_SIZE, va)

    if root % 0x20 or root + 0x20 > img.size_bytes:
        raise InvalidRoot(f"PDPT root {root:#x} is unaligned or outside the image")
    pdpte = _entry(img, root + (va >> 30) * 8, "<u8")
    if not pdpte & P_FLAG:
        raise NotPresent(f"PDPTE for {va:#x} not present")
    pde = _entry(img, (pdpte & PAE_TABLE_MASK) + ((va >> 21) & 0x1FF) * 8, "<u8")
    if not pde & P_FLAG:
        raise NotPresent(f"PDE for {va:#x} not present")
    if pde & PS_FLAG:
        return _resolve(img, pde & PAE_LARGE_MASK, 0x200000, va)
    pte = _entry(img, (pde & PAE_TABLE_MASK) + ((va >> 12) & 0x1FF) * 8, "<u8")
    if not pte & P_FLAG:
        raise NotPresent(f"PTE for {va:#x} not present")
    return _resolve(img, pte & PAE_TABLE_MASK, PAGE_SIZE, va)


class VirtualView:
    """Virtual-address reader over a raw image, resolving through page tables."""

    def __init__(self, img: PhysicalImage, root: int, mode: PagingMode | str):
        self.img = img
        self.root = root
        self.mode = PagingMode(mode)

    def read(self, va: int, length: int) -> bytes | None:
        """Bytes at ``va`` or None if any part is unmapped or unreadable."""
        out = bytearray()
        while length > 0:
            try:
                phys = translate(self.img, self.root, self.mode, va)
            except RamSleuthError:
                return None
            n = min(length, PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            out += bytes(self.img.data[phys:phys + n])
            va += n
            length -= n
        return bytes(out)
