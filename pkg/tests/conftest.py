import sys
import struct
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ramsleuth.dumpstore import LoadedDump, TranslationRecord  # noqa: E402
from ramsleuth.synth import SynthSpec, build_image  # noqa: E402

KEY = bytes(range(32))
BASE = 0x80000000

# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class Scratch:
    """A single-record dump whose bytes tests write by hand."""

    def __init__(self, size=0x10000, base=BASE, fill=0):
        self.base = base
        self.buf = bytearray([fill]) * size

    def put(self, va, data):
        off = va - self.base
        self.buf[off:off + len(data)] = data
        return va

    def u16(self, va, v):
        return self.put(va, struct.pack("<H", v))

    def u32(self, va, v):
        return self.put(va, struct.pack("<I", v))

    def ustring(self, header_va, buf_va, text, length=None, maxlen=None):
        raw = text.encode("utf-16-le")
        self.put(buf_va, raw + b"\0\0")
        length = len(raw) if length is None else length
        maxlen = len(raw) + 2 if maxlen is None else maxlen
        self.put(header_va, struct.pack("<HHI", length, maxlen, buf_va))

    def dump(self):
        return LoadedDump(bytes(self.buf), (TranslationRecord(self.base, self.base + len(self.buf) - 1, 0),))


@pytest.fixture
def scratch():
    return Scratch()


@pytest.fixture(scope="session")
def world():
    """A 16 MiB legacy image with the default plants: 12 processes, 8 drivers, 2+2 hidden."""
    img, manifest = build_image(SynthSpec(seed=11))
    return img, manifest, LoadedDump.from_image(img, manifest.paging_root, manifest.mode)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
