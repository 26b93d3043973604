"""Analysis profile and the end-to-end detection passes used by the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import dbs, rpi
from .crossview import CrossViewReport, cross_view
from .dumpstore import LoadedDump
from .errors import FormatError
from .synth import PROCESS_LINK_OFFSET, PROCESS_WINDOW, enumerate_reported_drivers, \
    enumerate_reported_processes, process_windows


@dataclass
class AnalysisProfile:
    """Everything the analyst can tune, loadable from one JSON file.

    ``prohibited`` lists [start, end) physical ranges excluded from dumping.
    """

    prohibited: list[tuple[int, int]] = field(default_factory=list)
    process_window: int = PROCESS_WINDOW
    process_link_offset: int = PROCESS_LINK_OFFSET
    dbs_mode: str = dbs.SignatureMode.BIT.value
    dbs_delta_ratio: float = dbs.DEFAULT_DELTA_RATIO
    dbs_stride: int = 4
    rpi_stride: int = 4
    rpi: rpi.RpiProfile = field(default_factory=rpi.RpiProfile)

    @classmethod
    def load(cls, path: str | Path) -> "AnalysisProfile":
        data = json.loads(Path(path).read_text())
        try:
            rp = rpi.RpiProfile.from_dict(data.pop("rpi", {}))
            data["prohibited"] = [tuple(r) for r in data.get("prohibited", [])]
            return cls(rpi=rp, **data)
        except TypeError as exc:
            raise FormatError(f"bad profile: {exc}") from exc

    def save(self, path: str | Path) -> None:
        data = {k: v for k, v in self.__dict__.items() if k != "rpi"}
        data["rpi"] = self.rpi.to_dict()
        Path(path).write_text(json.dumps(data, indent=2))


@dataclass
class ProcessFindings:
    signature: dbs.BitSignature
    reported: list[int]
    matches: list[dbs.DbsMatch]
    report: CrossViewReport


@dataclass
class DriverFindings:
    profile: rpi.RpiProfile
    reported: list[int]
    matches: list[rpi.RpiMatch]
    report: CrossViewReport


def detect_processes(d: LoadedDump, list_head: int, profile: AnalysisProfile,
                     workers: int | None = None) -> ProcessFindings:
    """Train on the listed processes, scan for all of them, diff the two views."""
    reported = enumerate_reported_processes(d, list_head, profile.process_link_offset)
    windows = process_windows(d, reported, profile.process_window)
    sig = dbs.train_signature(windows, profile.dbs_mode, profile.dbs_delta_ratio)
    matches = dbs.scan_signature(d, sig, profile.dbs_stride, workers)
    return ProcessFindings(sig, reported, matches, cross_view((m.vaom for m in matches), reported))


def detect_drivers(d: LoadedDump, directory: int, profile: AnalysisProfile,
                   workers: int | None = None) -> DriverFindings:
    reported = enumerate_reported_drivers(d, directory)
    rp = profile.rpi
    if not rp.ready:
        rp = rp.with_thresholds(*rpi.derive_thresholds(d, reported, rp))
    matches = rpi.rpi_scan(d, rp, profile.rpi_stride, workers)
    return DriverFindings(rp, reported, matches, cross_view((m.vaom for m in matches), reported))
