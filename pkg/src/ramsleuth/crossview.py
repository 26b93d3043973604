from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class CrossViewReport:
    scanned: frozenset[int]
    reported: frozenset[int]
    hidden: tuple[int, ...]  # found in memory, missing from the OS list
    ghosts: tuple[int, ...]  # listed by the OS, not found in memory

    @property
    def clean(self) -> bool:
        return not self.hidden and not self.ghosts


def cross_view(scanned: Iterable[int], reported: Iterable[int]) -> CrossViewReport:
    s, r = frozenset(scanned), frozenset(reported)
    return CrossViewReport(s, r, tuple(sorted(s - r)), tuple(sorted(r - s)))
