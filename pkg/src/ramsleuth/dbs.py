"""Dynamic bit signatures for large, layout-unknown kernel structures.

A signature is the set of bits that agree across every known instance of a
structure.  A candidate window matches when at most ``delta`` of those bits
disagree, i.e. ``sigma - delta <= matches <= sigma``.

Bit positions count from the window start, least significant bit first:
position ``p`` is bit ``p % 8`` of byte ``p // 8``.

Scanning prunes a window as soon as its mismatch count exceeds ``delta``;
mismatches only grow, so pruning never changes the accepted set.  On random
memory each signature bit mismatches with probability 1/2, so after about
``2 * delta`` bits nearly every window has been discarded.
"""

from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .crossview import CrossViewReport, cross_view  # noqa: F401  re-exported
from .dumpstore import LoadedDump
from .errors import FormatError, TooFewInstances, UnequalWindows
from .scan import Chunk, field_view, plan_chunks, run_chunks

SIG_MAGIC = b"MASHKSIG"
SIG_VERSION = 1
DEFAULT_DELTA_RATIO = 0.2
COMPACT_WINDOW = 0x100
_PRUNE_EVERY = 2


class SignatureMode(str, enum.Enum):
    BIT = "bit"
    BYTE = "byte"


class DbsMatch(NamedTuple):
    vaom: int
    matches: int
    accepted: bool


def default_delta(sigma: int, ratio: float = DEFAULT_DELTA_RATIO) -> int:
    return int(math.floor(ratio * sigma + 0.5))


@dataclass(frozen=True)
class BitSignature:
    window_bytes: int
    positions: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # uint8, 0 or 1
    delta: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.uint32)
        val = np.asarray(self.values, dtype=np.uint8)
        if pos.shape != val.shape:
            raise ValueError("positions and values differ in length")
        if pos.size and (np.any(np.diff(pos.astype(np.int64)) <= 0) or int(pos[-1]) >= self.window_bytes * 8):
            raise ValueError("bit positions must be strictly increasing and inside the window")
        if np.any(val > 1):
            raise ValueError("bit values must be 0 or 1")
        if not 0 <= self.delta <= pos.size:
            raise ValueError(f"delta {self.delta} outside [0, {pos.size}]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", val)

    @property
    def sigma(self) -> int:
        return int(self.positions.size)

    @property
    def bits(self) -> list[tuple[int, int]]:
        return list(zip(self.positions.tolist(), self.values.tolist()))

    def with_delta(self, delta: int) -> "BitSignature":
        return BitSignature(self.window_bytes, self.positions, self.values, delta)

    def accepts(self, matches: int) -> bool:
        # the upper bound is always true; kept to mirror the acceptance interval
        return self.sigma - self.delta <= matches <= self.sigma

    def byte_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-byte (mask, expected) arrays over the window."""
        mask = np.zeros(self.window_bytes * 8, dtype=np.uint8)
        exp = np.zeros(self.window_bytes * 8, dtype=np.uint8)
        mask[self.positions] = 1
        exp[self.positions] = self.values
        return (np.packbits(mask, bitorder="little"), np.packbits(exp, bitorder="little"))

    def count_matches(self, window: bytes) -> int:
        bits = np.unpackbits(np.frombuffer(window[:self.window_bytes], dtype=np.uint8), bitorder="little")
        return int(np.count_nonzero(bits[self.positions] == self.values))

    def save(self, path: str | Path) -> None:
        head = SIG_MAGIC + struct.pack("<HIII", SIG_VERSION, self.window_bytes, self.sigma, self.delta)
        pairs = np.zeros(self.sigma, dtype=[("pos", "<u4"), ("val", "u1")])
        pairs["pos"], pairs["val"] = self.positions, self.values
        Path(path).write_bytes(head + pairs.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "BitSignature":
        raw = Path(path).read_bytes()
        if raw[:8] != SIG_MAGIC or len(raw) < 22:
            raise FormatError("not a signature file")
        version, window, sigma, delta = struct.unpack_from("<HIII", raw, 8)
        if version != SIG_VERSION:
            raise FormatError(f"unsupported signature version {version}")
        if len(raw) != 22 + sigma * 5:
            raise FormatError("signature length does not match sigma")
        pairs = np.frombuffer(raw, dtype=[("pos", "<u4"), ("val", "u1")], count=sigma, offset=22)
        try:
            return cls(window, pairs["pos"].copy(), pairs["val"].copy(), delta)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc


def train_signature(instances: Sequence[bytes], mode: SignatureMode | str = SignatureMode.BIT,
                    delta_ratio: float = DEFAULT_DELTA_RATIO) -> BitSignature:
    """Learn the bits common to every instance window."""
    if len(instances) < 2:
        raise TooFewInstances(f"need at least 2 instances, got {len(instances)}")
    width = len(instances[0])
    if any(len(x) != width for x in instances):
        raise UnequalWindows("training windows differ in length")
    if len(instances) < 4:
        warnings.warn(f"only {len(instances)} training instances; the signature may overfit", stacklevel=2)
    if width < COMPACT_WINDOW:
        warnings.warn(f"window of {width:#x} bytes is compact; expect false positives", stacklevel=2)

    arr = np.stack([np.frombuffer(bytes(x), dtype=np.uint8) for x in instances])
    bits = np.unpackbits(arr, axis=1, bitorder="little")
    if SignatureMode(mode) is SignatureMode.BIT:
        same = np.all(bits == bits[0], axis=0)
    else:
        same = np.repeat(np.all(arr == arr[0], axis=0), 8)
    positions = np.flatnonzero(same).astype(np.uint32)
    values = bits[0][positions]
    return BitSignature(width, positions, values, default_delta(positions.size, delta_ratio))


def _word_plan(sig: BitSignature) -> list[tuple[int, str, int, int, int]]:
    """(offset, dtype, mask, expected, weight) groups, heaviest first."""
    mask, exp = sig.byte_masks()
    plan = []
    full = sig.window_bytes // 8 * 8
    for off in range(0, full, 8):
        m = int.from_bytes(mask[off:off + 8].tobytes(), "little")
        if m:
            e = int.from_bytes(exp[off:off + 8].tobytes(), "little")
            plan.append((off, "<u8", m, e, bin(m).count("1")))
    for off in range(full, sig.window_bytes):
        if mask[off]:
            plan.append((off, "u1", int(mask[off]), int(exp[off]), bin(int(mask[off])).count("1")))
    plan.sort(key=lambda w: (-w[4], w[0]))
    return plan


def _scan_chunk(payload: bytes, chunk: Chunk, plan, sigma: int, delta: int) -> list[DbsMatch]:
    mism = np.zeros(chunk.count, dtype=np.int32)
    idx: np.ndarray | None = None
    for k, (off, dt, m, e, _) in enumerate(plan):
        col = field_view(payload, chunk, off, dt)
        if idx is not None:
            col = col[idx]
        kind = np.uint64 if dt == "<u8" else np.uint8
        mism += np.bitwise_count((col ^ kind(e)) & kind(m))
        if k % _PRUNE_EVERY == _PRUNE_EVERY - 1:
            alive = mism <= delta
            if idx is None:
                if np.count_nonzero(alive) * 2 < chunk.count:
                    idx = np.flatnonzero(alive)
                    mism = mism[idx]
            else:
                idx, mism = idx[alive], mism[alive]
            if idx is not None and idx.size == 0:
                return []
    if idx is None:
        idx = np.arange(chunk.count)
    alive = mism <= delta
    idx, mism = idx[alive], mism[alive]
    return [DbsMatch(chunk.va_base + int(i) * chunk.stride, sigma - int(x), True)
            for i, x in zip(idx.tolist(), mism.tolist())]


def scan_signature(d: LoadedDump, sig: BitSignature, stride: int = 4, workers: int | None = None,
                   delta: int | None = None, chunk_windows: int = 1 << 18) -> list[DbsMatch]:
    """Every accepted window, ascending by virtual address, with exact match counts."""
    if stride not in (1, 4):
        raise ValueError("stride must be 1 or 4")
    delta = sig.delta if delta is None else delta
    plan = _word_plan(sig)
    chunks = plan_chunks(d, sig.window_bytes, stride, chunk_windows)
    found = run_chunks(lambda c: _scan_chunk(d.payload, c, plan, sig.sigma, delta), chunks, workers)
    return sorted(found)
