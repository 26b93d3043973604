"""Two-file dump format (``dump.log`` payload, ``struct.log`` map) and address algebra.

The payload is the concatenation of every dumped virtual page.  Pages are
walked from high to low addresses and virtually contiguous pages are merged
into one translation record; inside a record the bytes are stored in
ascending address order, so offsets grow with addresses::

    oduf = record.dump_offset + (vaom - record.start_addr)
    valf = oduf + load_addr

``dump.log`` layout (little-endian)::

    magic "MASHKDMP" | version u16 | compression u8 | cipher u8 | block_size u32
    | payload_total u64 | block_count u32
    | block_count x (stored_len u32, stored_offset u64, tag 16 bytes)
    | block stream

Each block holds up to ``block_size`` payload bytes, compressed and then sealed
with AES-256-GCM-SIV.  The fixed header fields plus the block index are bound
in as associated data, so any modified bit fails authentication.
"""

from __future__ import annotations

import bisect
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from .errors import AuthFailure, FormatError, IoFailure, Underflow, Unmapped
from .image import PhysicalImage
from .paging import PagingMode, VirtualPage, enumerate_pages

DUMP_MAGIC = b"MASHKDMP"
STRUCT_MAGIC = b"MASHKSTR"
FORMAT_VERSION = 1
DEFAULT_BLOCK_SIZE = 4 * 1024 * 1024
DEFAULT_LOAD_ADDR = 0x10000000

COMPRESS_NONE = 0
COMPRESS_ZLIB = 1
CIPHER_AES256_GCM_SIV = 1

_FIXED = struct.Struct("<8sHBBIQI")
_BLOCK = struct.Struct("<IQ16s")
_STRUCT_HDR = struct.Struct("<8sHQ")
_RECORD = struct.Struct("<QQQ")
_TAG_LEN = 16


class TranslationRecord(NamedTuple):
    start_addr: int
    finish_addr: int  # inclusive
    dump_offset: int

    @property
    def span(self) -> int:
        return self.finish_addr - self.start_addr + 1


class BlockEntry(NamedTuple):
    stored_len: int
    stored_offset: int
    tag: bytes


@dataclass
class DumpHeader:
    version: int
    compression_codec: int
    cipher_codec: int
    block_size: int
    payload_total: int
    block_table: list[BlockEntry] = field(default_factory=list)

    def fixed_bytes(self) -> bytes:
        return _FIXED.pack(DUMP_MAGIC, self.version, self.compression_codec, self.cipher_codec,
                           self.block_size, self.payload_total, len(self.block_table))

    def pack(self) -> bytes:
        return self.fixed_bytes() + b"".join(_BLOCK.pack(*b) for b in self.block_table)

    @property
    def size(self) -> int:
        return _FIXED.size + _BLOCK.size * len(self.block_table)


@dataclass(frozen=True)
class DumpStats:
    pages: int
    records: int
    payload_bytes: int
    blocks: int
    stored_bytes: int


def plan_records(pages: Iterable[VirtualPage]) -> list[tuple[TranslationRecord, list[VirtualPage]]]:
    """Group descending pages into contiguous runs and assign payload offsets.

    Returns (record, pages-in-ascending-order) pairs in payload order.
    """
    runs: list[list[VirtualPage]] = []
    for page in pages:
        if runs and page.va_end == runs[-1][-1].va_start:
            runs[-1].append(page)
        else:
            runs.append([page])
    planned = []
    offset = 0
    for run in runs:
        run.reverse()
        start = run[0].va_start
        finish = run[-1].va_end - 1
        planned.append((TranslationRecord(start, finish, offset), run))
        offset += finish - start + 1
    return planned


def _cipher(key: bytes) -> AESGCMSIV:
    return AESGCMSIV(hashlib.sha256(key).digest())


def _nonce(index: int) -> bytes:
    return struct.pack("<Q", index) + b"\0\0\0\0"


def _aad(fixed: bytes, index: int) -> bytes:
    return fixed + struct.pack("<I", index)


def _compress(codec: int, data: bytes) -> bytes:
    if codec == COMPRESS_ZLIB:
        return zlib.compress(data, 1)
    if codec == COMPRESS_NONE:
        return data
    raise FormatError(f"unknown compression codec {codec}")


def _decompress(codec: int, data: bytes) -> bytes:
    if codec == COMPRESS_ZLIB:
        try:
            return zlib.decompress(data)
        except zlib.error as exc:
            raise FormatError(f"corrupt compressed block: {exc}") from exc
    if codec == COMPRESS_NONE:
        return data
    raise FormatError(f"unknown compression codec {codec}")


def _iter_payload(img: PhysicalImage, planned) -> Iterator[bytes]:
    for _, run in planned:
        for page in run:
            yield bytes(img.data[page.phys_start:page.phys_start + page.size])


def write_struct_log(path: str | Path, records: Iterable[TranslationRecord]) -> None:
    records = list(records)
    body = b"".join(_RECORD.pack(*r) for r in records)
    Path(path).write_bytes(_STRUCT_HDR.pack(STRUCT_MAGIC, FORMAT_VERSION, len(records)) + body)


def read_struct_log(path: str | Path) -> list[TranslationRecord]:
    raw = Path(path).read_bytes()
    if len(raw) < _STRUCT_HDR.size:
        raise FormatError("struct.log truncated")
    magic, version, count = _STRUCT_HDR.unpack_from(raw)
    if magic != STRUCT_MAGIC:
        raise FormatError("struct.log has a bad magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported struct.log version {version}")
    if len(raw) != _STRUCT_HDR.size + count * _RECORD.size:
        raise FormatError("struct.log length does not match its record count")
    return [TranslationRecord(*r) for r in _RECORD.iter_unpack(raw[_STRUCT_HDR.size:])]


def write_dump(img: PhysicalImage, root: int, mode: PagingMode | str, key: bytes,
               dump_path: str | Path, struct_path: str | Path, *,
               block_size: int = DEFAULT_BLOCK_SIZE, compression: int = COMPRESS_ZLIB) -> DumpStats:
    """Walk the page tables of ``img`` and write ``dump.log`` + ``struct.log``."""
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    pages = enumerate_pages(img, root, mode)
    planned = plan_records(pages)
    total = sum(rec.span for rec, _ in planned)
    n_blocks = -(-total // block_size)
    header = DumpHeader(FORMAT_VERSION, compression, CIPHER_AES256_GCM_SIV, block_size, total,
                        [BlockEntry(0, 0, bytes(_TAG_LEN))] * n_blocks)
    fixed = header.fixed_bytes()
    aead = _cipher(key)
    table: list[BlockEntry] = []
    try:
        with open(dump_path, "wb") as fh:
            fh.write(header.pack())
            pos = header.size
            buf = bytearray()

            def flush(chunk: bytes) -> None:
                nonlocal pos
                index = len(table)
                sealed = aead.encrypt(_nonce(index), _compress(compression, chunk), _aad(fixed, index))
                body, tag = sealed[:-_TAG_LEN], sealed[-_TAG_LEN:]
                fh.write(body)
                table.append(BlockEntry(len(body), pos, tag))
                pos += len(body)

            for data in _iter_payload(img, planned):
                buf += data
                while len(buf) >= block_size:
                    flush(bytes(buf[:block_size]))
                    del buf[:block_size]
            if buf:
                flush(bytes(buf))
            header.block_table = table
            fh.seek(0)
            fh.write(header.pack())
        write_struct_log(struct_path, (rec for rec, _ in planned))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DumpStats(len(pages), len(planned), total, len(table), pos - header.size)


def read_header(raw: bytes) -> DumpHeader:
    if len(raw) < _FIXED.size:
        raise FormatError("dump.log truncated")
    magic, version, comp, ciph, block_size, total, count = _FIXED.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise FormatError("dump.log has a bad magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dump.log version {version}")
    if ciph != CIPHER_AES256_GCM_SIV:
        raise FormatError(f"unknown cipher codec {ciph}")
    if comp not in (COMPRESS_NONE, COMPRESS_ZLIB):
        raise FormatError(f"unknown compression codec {comp}")
    if block_size == 0 or count != -(-total // block_size):
        raise FormatError("block count does not partition the payload")
    end = _FIXED.size + count * _BLOCK.size
    if len(raw) < end:
        raise FormatError("dump.log block table truncated")
    table = [BlockEntry(*b) for b in _BLOCK.iter_unpack(raw[_FIXED.size:end])]
    return DumpHeader(version, comp, ciph, block_size, total, table)


def load_dump(dump_path: str | Path, struct_path: str | Path, key: bytes,
              load_addr: int = DEFAULT_LOAD_ADDR) -> "LoadedDump":
    try:
        raw = Path(dump_path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    header = read_header(raw)
    fixed = header.fixed_bytes()
    aead = _cipher(key)
    parts = []
    pos = header.size
    for index, entry in enumerate(header.block_table):
        if entry.stored_offset != pos or pos + entry.stored_len > len(raw):
            raise AuthFailure(f"block {index} is displaced or truncated")
        body = raw[pos:pos + entry.stored_len]
        try:
            plain = aead.decrypt(_nonce(index), body + entry.tag, _aad(fixed, index))
        except InvalidTag as exc:
            raise AuthFailure(f"block {index} failed authentication") from exc
        chunk = _decompress(header.compression_codec, plain)
        last = index == len(header.block_table) - 1
        expect = header.payload_total - index * header.block_size if last else header.block_size
        if len(chunk) != expect:
            raise FormatError(f"block {index} decompressed to {len(chunk)} bytes, expected {expect}")
        parts.append(chunk)
        pos += entry.stored_len
    if pos != len(raw):
        raise AuthFailure("trailing bytes after the last block")
    return LoadedDump(b"".join(parts), tuple(read_struct_log(struct_path)), load_addr)


@dataclass(frozen=True)
class LoadedDump:
    """Decompressed payload plus its translation records; immutable."""

    payload: bytes
    records: tuple[TranslationRecord, ...]
    load_addr: int = DEFAULT_LOAD_ADDR
    _offsets: list[int] = field(init=False, repr=False, compare=False)
    _starts: list[int] = field(init=False, repr=False, compare=False)
    _by_start: list[TranslationRecord] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.dump_offset))
        expected = 0
        for r in recs:
            if r.finish_addr < r.start_addr or r.span % 0x1000:
                raise FormatError(f"malformed record {r}")
            if r.dump_offset != expected:
                raise FormatError(f"record {r} does not tile the payload")
            expected += r.span
        if expected != len(self.payload):
            raise FormatError(f"records cover {expected:#x} bytes, payload holds {len(self.payload):#x}")
        by_start = sorted(recs, key=lambda r: r.start_addr)
        for a, b in zip(by_start, by_start[1:]):
            if b.start_addr <= a.finish_addr:
                raise FormatError(f"records {a} and {b} overlap")
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "_offsets", [r.dump_offset for r in recs])
        object.__setattr__(self, "_by_start", by_start)
        object.__setattr__(self, "_starts", [r.start_addr for r in by_start])

    @classmethod
    def from_image(cls, img: PhysicalImage, root: int, mode: PagingMode | str,
                   load_addr: int = DEFAULT_LOAD_ADDR) -> "LoadedDump":
        """Build the dump in memory, skipping the file round trip."""
        planned = plan_records(enumerate_pages(img, root, mode))
        return cls(b"".join(_iter_payload(img, planned)), tuple(r for r, _ in planned), load_addr)

    def record_for_vaom(self, vaom: int) -> TranslationRecord:
        i = bisect.bisect_right(self._starts, vaom) - 1
        if i < 0 or vaom > self._by_start[i].finish_addr:
            raise Unmapped(f"vaom {vaom:#x} is not covered by any record")
        return self._by_start[i]

    def record_for_oduf(self, oduf: int) -> TranslationRecord:
        if not 0 <= oduf < len(self.payload):
            raise Unmapped(f"oduf {oduf:#x} is outside the payload")
        return self.records[bisect.bisect_right(self._offsets, oduf) - 1]

    def vaom_to_oduf(self, vaom: int) -> int:
        rec = self.record_for_vaom(vaom)
        return rec.dump_offset + (vaom - rec.start_addr)

    def oduf_to_vaom(self, oduf: int) -> int:
        rec = self.record_for_oduf(oduf)
        return rec.start_addr + (oduf - rec.dump_offset)

    def oduf_to_valf(self, oduf: int) -> int:
        return oduf + self.load_addr

    def valf_to_oduf(self, valf: int) -> int:
        if valf < self.load_addr:
            raise Underflow(f"valf {valf:#x} is below the load address {self.load_addr:#x}")
        return valf - self.load_addr

    def read(self, vaom: int, length: int) -> bytes | None:
        """Bytes at ``vaom`` if the whole range lies in one record, else None."""
        try:
            rec = self.record_for_vaom(vaom)
        except Unmapped:
            return None
        if vaom + length - 1 > rec.finish_addr:
            return None
        off = rec.dump_offset + (vaom - rec.start_addr)
        return self.payload[off:off + length]

    def segments(self) -> list[tuple[int, int, int]]:
        """(dump_offset, length, start_addr) per record in payload order."""
        return [(r.dump_offset, r.span, r.start_addr) for r in self.records]
