"""Command-line front end.

Exit codes: 0 success, 1 operational error, 2 usage error, 3 hidden objects
found (``crossview`` and ``report``).

Key material is read from ``--key-file`` or the ``RAMSLEUTH_KEY`` environment
variable, never from the command line.

``--format jsonl`` prints one JSON object per line with hex-free integer
fields; ``--format table`` is for people.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from . import dbs, rpi
from .crossview import CrossViewReport, cross_view
from .dumpstore import DEFAULT_BLOCK_SIZE, DEFAULT_LOAD_ADDR, LoadedDump, load_dump, write_dump
from .errors import RamSleuthError
from .image import PhysicalImage
from .paging import PagingMode
from .pipeline import AnalysisProfile, detect_drivers, detect_processes
from .scan import Pattern, find_pattern, find_pointers_to, find_punicode_refs
from .synth import GroundTruthManifest, SynthSpec, build_image, enumerate_reported_drivers, \
    enumerate_reported_processes, process_windows

KEY_ENV = "RAMSLEUTH_KEY"
EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_HIDDEN = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def _read_key(args) -> bytes:
    if getattr(args, "key_file", None):
        return Path(args.key_file).read_bytes()
    env = os.environ.get(KEY_ENV)
    if env:
        return env.encode()
    raise UsageError(f"a key is required: pass --key-file or set {KEY_ENV}")


def _read_addresses(path: str) -> list[int]:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [v if isinstance(v, int) else int(v, 0) for v in json.loads(text)]
    return [int(tok, 0) for tok in text.split()]


def _profile(args) -> AnalysisProfile:
    return AnalysisProfile.load(args.profile) if getattr(args, "profile", None) else AnalysisProfile()


def _truth(args) -> GroundTruthManifest | None:
    return GroundTruthManifest.load(args.truth) if getattr(args, "truth", None) else None


class Output:
    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def rows(self, records: Iterable[dict], columns: Sequence[str], hex_cols: Sequence[str] = ()) -> None:
        records = list(records)
        if self.fmt == "jsonl":
            for r in records:
                print(json.dumps({c: r.get(c) for c in columns}), file=self.stream)
            return
        cells = [[(f"{r[c]:#x}" if c in hex_cols and isinstance(r.get(c), int) else str(r.get(c, "")))
                  for c in columns] for r in records]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
        print("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip(), file=self.stream)
        for row in cells:
            print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip(), file=self.stream)

    def line(self, text: str, **record) -> None:
        if self.fmt == "jsonl":
            print(json.dumps(record), file=self.stream)
        else:
            print(text, file=self.stream)


def _load(args) -> LoadedDump:
    return load_dump(args.dump, args.struct, _read_key(args), args.load_addr)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args, out: Output) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    for name in ("seed", "image_size", "mode"):
        if getattr(args, name) is not None:
            setattr(spec, name, getattr(args, name))
    spec.__post_init__()
    img, manifest = build_image(spec)
    Path(args.image).write_bytes(bytes(img.data))
    manifest.save(args.truth)
    out.line(f"image {args.image}: {img.size_bytes:#x} bytes, root {manifest.paging_root:#x}, "
             f"{len(manifest.processes)} processes, {len(manifest.drivers)} drivers",
             image=str(args.image), size=img.size_bytes, root=manifest.paging_root,
             processes=len(manifest.processes), drivers=len(manifest.drivers))
    return EXIT_OK


def _image_inputs(args):
    truth = _truth(args)
    profile = _profile(args)
    root = args.root if args.root is not None else (truth.paging_root if truth else None)
    mode = args.mode or (truth.mode if truth else None)
    if root is None or mode is None:
        raise UsageError("--root and --mode are required unless --truth supplies them")
    prohibited = profile.prohibited or (truth.prohibited if truth else [])
    return PhysicalImage.from_file(args.image, prohibited), root, PagingMode(mode)


def cmd_dump(args, out: Output) -> int:
    key = _read_key(args)
    img, root, mode = _image_inputs(args)
    stats = write_dump(img, root, mode, key, args.dump, args.struct, block_size=args.block_size)
    out.line(f"{stats.pages} pages in {stats.records} records, {stats.payload_bytes:#x} payload bytes "
             f"in {stats.blocks} blocks ({stats.stored_bytes:#x} stored)", **stats.__dict__)
    return EXIT_OK


def cmd_translate(args, out: Output) -> int:
    d = _load(args)
    if args.vaom is not None:
        oduf = d.vaom_to_oduf(args.vaom)
    elif args.oduf is not None:
        oduf = args.oduf
    else:
        oduf = d.valf_to_oduf(args.valf)
    vaom = d.oduf_to_vaom(oduf)
    valf = d.oduf_to_valf(oduf)
    out.rows([{"vaom": vaom, "oduf": oduf, "valf": valf}], ["vaom", "oduf", "valf"], ["vaom", "oduf", "valf"])
    return EXIT_OK


def cmd_scan(args, out: Output) -> int:
    d = _load(args)
    if args.punicode is not None:
        hits = find_punicode_refs(d, args.punicode, args.workers)
    elif args.pointer is not None:
        hits = find_pointers_to(d, args.pointer, args.workers)
    else:
        if args.string is not None:
            pat = Pattern.narrow(args.string, args.stride)
        elif args.wstring is not None:
            pat = Pattern.wide(args.wstring, args.stride)
        else:
            pat = Pattern.raw(bytes.fromhex(args.hex), args.stride)
        hits = find_pattern(d, pat, args.workers)
    out.rows(({"vaom": h.vaom, "oduf": h.oduf, "valf": d.oduf_to_valf(h.oduf), "kind": h.kind} for h in hits),
             ["vaom", "oduf", "valf", "kind"], ["vaom", "oduf", "valf"])
    return EXIT_OK


def cmd_dbs_train(args, out: Output) -> int:
    d = _load(args)
    profile = _profile(args)
    truth = _truth(args)
    if args.addresses:
        addrs = _read_addresses(args.addresses)
    elif truth:
        addrs = enumerate_reported_processes(d, truth.process_list_head, profile.process_link_offset)
    else:
        raise UsageError("dbs train needs --addresses or --truth")
    window = args.window or profile.process_window
    sig = dbs.train_signature(process_windows(d, addrs, window), args.sig_mode or profile.dbs_mode,
                              profile.dbs_delta_ratio)
    if args.delta is not None:
        sig = sig.with_delta(args.delta)
    sig.save(args.signature)
    out.line(f"signature {args.signature}: window {sig.window_bytes:#x}, sigma {sig.sigma}, delta {sig.delta}, "
             f"{len(addrs)} instances", window_bytes=sig.window_bytes, sigma=sig.sigma, delta=sig.delta,
             instances=len(addrs))
    return EXIT_OK


def cmd_dbs_scan(args, out: Output) -> int:
    d = _load(args)
    sig = dbs.BitSignature.load(args.signature)
    matches = dbs.scan_signature(d, sig, args.stride, args.workers, args.delta)
    out.rows(({"vaom": m.vaom, "matches": m.matches, "sigma": sig.sigma} for m in matches),
             ["vaom", "matches", "sigma"], ["vaom"])
    return EXIT_OK


def _rpi_profile(args, d: LoadedDump) -> rpi.RpiProfile:
    profile = _profile(args).rpi
    if profile.ready:
        return profile
    truth = _truth(args)
    if args.known:
        known = _read_addresses(args.known)
    elif truth:
        known = enumerate_reported_drivers(d, truth.driver_directory)
    else:
        raise UsageError("rpi scan needs thresholds in --profile, or --known / --truth to derive them")
    return profile.with_thresholds(*rpi.derive_thresholds(d, known, profile))


def _rpi_rows(d: LoadedDump, matches, profile: rpi.RpiProfile, explain: bool) -> list[dict]:
    rows = []
    for m in matches:
        row = {"vaom": m.vaom, "global": m.score_global, "deep": m.score_deep, "via": m.accepted_via}
        if explain:
            raw = d.read(m.vaom, profile.layout.total_size)
            row["global_rows"] = rpi.global_rows(d, raw, profile)
            row["deep_rows"] = rpi.deep_rows(d, raw, profile)
        rows.append(row)
    return rows


def _print_breakdown(out: Output, rows: list[dict]) -> None:
    if out.fmt != "table":
        return
    for row in rows:
        if "global_rows" not in row:
            continue
        print(f"\n{row['vaom']:#x}", file=out.stream)
        for table in ("global_rows", "deep_rows"):
            for name, pts in row[table].items():
                print(f"  {table[:-5]:6s} {name:24s} {pts}", file=out.stream)


def cmd_rpi_scan(args, out: Output) -> int:
    d = _load(args)
    profile = _rpi_profile(args, d)
    matches = rpi.rpi_scan(d, profile, args.stride, args.workers)
    if args.rank_center:
        truth = _truth(args)
        known = enumerate_reported_drivers(d, truth.driver_directory) if truth else [m.vaom for m in matches]
        if known:
            matches = rpi.rank_by_center(matches, rpi.center_of_mass(known))
    rows = _rpi_rows(d, matches, profile, args.explain)
    cols = ["vaom", "global", "deep", "via"] + (["global_rows", "deep_rows"] if args.explain and out.fmt == "jsonl" else [])
    out.rows(rows, cols, ["vaom"])
    _print_breakdown(out, rows)
    out.line(f"thresholds: min_major_function {profile.min_major_function}, global_scope "
             f"{profile.global_scope}, global_scope_deep {profile.global_scope_deep}",
             min_major_function=profile.min_major_function, global_scope=profile.global_scope,
             global_scope_deep=profile.global_scope_deep)
    return EXIT_OK


def _print_crossview(out: Output, label: str, rep: CrossViewReport) -> None:
    out.rows(([{"kind": label, "status": "hidden", "vaom": a} for a in rep.hidden]
              + [{"kind": label, "status": "ghost", "vaom": a} for a in rep.ghosts]),
             ["kind", "status", "vaom"], ["vaom"])


def cmd_crossview(args, out: Output) -> int:
    rep = cross_view(_read_addresses(args.scanned), _read_addresses(args.reported))
    _print_crossview(out, args.label, rep)
    return EXIT_HIDDEN if rep.hidden else EXIT_OK


def cmd_report(args, out: Output) -> int:
    truth = _truth(args)
    if truth is None:
        raise UsageError("report needs --truth for the list heads")
    key = _read_key(args)
    profile = _profile(args)
    with tempfile.TemporaryDirectory() as tmp:
        dump_path = args.dump or os.path.join(args.out_dir or tmp, "dump.log")
        struct_path = args.struct or os.path.join(args.out_dir or tmp, "struct.log")
        if args.image:
            img, root, mode = _image_inputs(args)
            write_dump(img, root, mode, key, dump_path, struct_path)
        elif not (args.dump and args.struct):
            raise UsageError("report needs --image, or --dump and --struct")
        d = load_dump(dump_path, struct_path, key, args.load_addr)

    procs = detect_processes(d, truth.process_list_head, profile, args.workers)
    drivers = detect_drivers(d, truth.driver_directory, profile, args.workers)
    hidden_drivers = [m for m in drivers.matches if m.vaom in set(drivers.report.hidden)]
    rows = [{"kind": "process", "vaom": m.vaom, "score": f"{m.matches}/{procs.signature.sigma}", "via": "dbs"}
            for m in procs.matches if m.vaom in set(procs.report.hidden)]
    rows += [{"kind": "driver", "vaom": m.vaom, "score": f"{m.score_global}/{m.score_deep}", "via": m.accepted_via}
             for m in hidden_drivers]
    out.rows(rows, ["kind", "vaom", "score", "via"], ["vaom"])
    _print_breakdown(out, _rpi_rows(d, hidden_drivers, drivers.profile, True))
    out.line(f"processes: {len(procs.reported)} listed, {len(procs.matches)} found, {len(procs.report.hidden)} hidden; "
             f"drivers: {len(drivers.reported)} listed, {len(drivers.matches)} found, "
             f"{len(drivers.report.hidden)} hidden",
             processes_listed=len(procs.reported), processes_found=len(procs.matches),
             processes_hidden=list(procs.report.hidden), drivers_listed=len(drivers.reported),
             drivers_found=len(drivers.matches), drivers_hidden=list(drivers.report.hidden))
    return EXIT_HIDDEN if procs.report.hidden or drivers.report.hidden else EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=None, help="scan threads (default: CPU count)")
    common.add_argument("--format", choices=("table", "jsonl"), default="table")

    dump_in = argparse.ArgumentParser(add_help=False)
    dump_in.add_argument("--dump", required=True)
    dump_in.add_argument("--struct", required=True)
    dump_in.add_argument("--key-file")
    dump_in.add_argument("--load-addr", type=_int, default=DEFAULT_LOAD_ADDR)

    image_in = argparse.ArgumentParser(add_help=False)
    image_in.add_argument("--root", type=_int)
    image_in.add_argument("--mode", choices=[m.value for m in PagingMode])
    image_in.add_argument("--profile")
    image_in.add_argument("--truth")

    p = argparse.ArgumentParser(prog="ramsleuth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="build a synthetic image and ground-truth manifest")
    s.add_argument("--spec")
    s.add_argument("--image", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--image-size", type=_int)
    s.add_argument("--mode", choices=[m.value for m in PagingMode])
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dump", parents=[common, image_in], help="walk page tables and write dump.log/struct.log")
    s.add_argument("--image", required=True)
    s.add_argument("--dump", required=True)
    s.add_argument("--struct", required=True)
    s.add_argument("--key-file")
    s.add_argument("--block-size", type=_int, default=DEFAULT_BLOCK_SIZE)
    s.set_defaults(func=cmd_dump)

    s = sub.add_parser("translate", parents=[common, dump_in], help="convert between vaom, oduf and valf")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--vaom", type=_int)
    g.add_argument("--oduf", type=_int)
    g.add_argument("--valf", type=_int)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("scan", parents=[common, dump_in], help="search for strings, bytes or pointers")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--string")
    g.add_argument("--wstring")
    g.add_argument("--hex")
    g.add_argument("--pointer", type=_int)
    g.add_argument("--punicode", type=_int, help="string VA; finds pointers to UNICODE_STRINGs using it")
    s.add_argument("--stride", type=int, choices=(1, 4), default=1)
    s.set_defaults(func=cmd_scan)

    dbs_p = sub.add_parser("dbs", help="dynamic bit signatures")
    dbs_sub = dbs_p.add_subparsers(dest="dbs_command", required=True)
    s = dbs_sub.add_parser("train", parents=[common, dump_in])
    s.add_argument("--signature", required=True, help="output signature file")
    s.add_argument("--truth")
    s.add_argument("--addresses")
    s.add_argument("--profile")
    s.add_argument("--window", type=_int)
    s.add_argument("--sig-mode", choices=[m.value for m in dbs.SignatureMode])
    s.add_argument("--delta", type=int)
    s.set_defaults(func=cmd_dbs_train)
    s = dbs_sub.add_parser("scan", parents=[common, dump_in])
    s.add_argument("--signature", required=True)
    s.add_argument("--stride", type=int, choices=(1, 4), default=4)
    s.add_argument("--delta", type=int)
    s.set_defaults(func=cmd_dbs_scan)

    rpi_p = sub.add_parser("rpi", help="rating point inspection")
    rpi_sub = rpi_p.add_subparsers(dest="rpi_command", required=True)
    s = rpi_sub.add_parser("scan", parents=[common, dump_in])
    s.add_argument("--profile")
    s.add_argument("--truth")
    s.add_argument("--known", help="file of listed driver addresses for threshold derivation")
    s.add_argument("--stride", type=int, choices=(1, 4), default=4)
    s.add_argument("--rank-center", action="store_true", help="order matches by distance to the center of mass")
    s.add_argument("--explain", action="store_true", help="print the row-by-row score breakdown")
    s.set_defaults(func=cmd_rpi_scan)

    s = sub.add_parser("crossview", parents=[common], help="diff scanned and reported address lists")
    s.add_argument("--scanned", required=True)
    s.add_argument("--reported", required=True)
    s.add_argument("--label", default="object")
    s.set_defaults(func=cmd_crossview)

    s = sub.add_parser("report", parents=[common, image_in], help="dump, detect with both engines, report hidden objects")
    s.add_argument("--image")
    s.add_argument("--dump")
    s.add_argument("--struct")
    s.add_argument("--out-dir")
    s.add_argument("--key-file")
    s.add_argument("--load-addr", type=_int, default=DEFAULT_LOAD_ADDR)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    out = Output(args.format)
    try:
        return args.func(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ramsleuth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RamSleuthError, OSError, ValueError) as exc:
        print(f"ramsleuth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
