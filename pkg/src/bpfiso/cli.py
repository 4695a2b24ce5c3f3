"""Command-line front end.

    bpfiso verify PROG.bpf [--bug or32|memnull|mapmischeck]...
    bpfiso run PROG.bpf [--input packets.hex] [toggles]
    bpfiso scenario NAME | --all
    bpfiso export NAME [--input]

Exit codes: 0 completed/accepted, 1 verifier reject, 2 usage or parse
error, 3 dpa violation, 4 pks violation, 5 page fault, 6 cop violation,
7 kernel tampered. ``scenario`` exits 1 when any row misses its
expectation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .isa import AsmError, MapKind, assemble
from .runtime import SENTINEL, Machine, ProtectionConfig, Verdict, VerifierRejected
from .scenarios import (
    SCENARIOS, UnknownScenario, load_program, program_source, run_scenario, stack_write_packet,
)
from .verifier import BugFlags, verify

EXIT_USAGE = 2
BUG_CHOICES = ("or32", "memnull", "mapmischeck")


def parse_packets(text: str) -> list[bytes]:
    """One packet per line as hex bytes; spaces and ``#`` comments allowed."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].replace(" ", "").replace("\t", "")
        if not line:
            continue
        try:
            out.append(bytes.fromhex(line))
        except ValueError:
            raise ValueError(f"line {lineno}: not hex bytes") from None
    return out


def verdict_json(name: str, cfg: ProtectionConfig, verdict: Verdict, counters: dict) -> dict:
    return {"scenario": name, "protections": cfg.protections(),
            "outcome": verdict.outcome.value, "detail": verdict.detail, "counters": counters}


def _config(args: argparse.Namespace) -> ProtectionConfig:
    return ProtectionConfig(
        pks_enabled=not args.no_pks, dpa_enabled=not args.no_dpa, cop_enabled=not args.no_cop,
        addr_space_enabled=not args.no_addr_space, pcid_bits=args.pcid_bits,
        interrupt_at=args.irq_at)


def _read_program(path: str):
    return assemble(Path(path).read_text(), name=Path(path).stem)


def cmd_verify(args: argparse.Namespace) -> int:
    prog = _read_program(args.file)
    out = verify(prog, BugFlags.parse(args.bug))
    print(out.to_json(indent=args.indent))
    return 0 if out.accepted else 1


def _dump_maps(machine: Machine, image) -> dict:
    dump = {}
    for fd, m in enumerate(image.maps):
        if m.kind is not MapKind.ARRAY:
            continue
        raw = machine.map_bytes(image, fd)
        vs = m.decl.value_size
        vals = {i: int.from_bytes(raw[i * vs:(i + 1) * vs], "little")
                for i in range(m.decl.n_entries)}
        dump[m.decl.name] = {str(i): v for i, v in vals.items() if v}
    return dump


def cmd_run(args: argparse.Namespace) -> int:
    prog = _read_program(args.file)
    cfg = _config(args)
    events = parse_packets(Path(args.input).read_text()) if args.input else [b""]
    machine = Machine(cfg, defective_helpers={"ringbuf_reserve"} if args.defect else set())
    try:
        image = machine.load(prog, BugFlags.parse(args.bug))
    except VerifierRejected as rej:
        print(json.dumps(verdict_json(prog.name, cfg, rej.verdict, machine.counters())))
        return 1
    code = 0
    for event in events:
        v = machine.run(image, event)
        if args.trace:
            for line in v.trace:
                print(line, file=sys.stderr)
        print(json.dumps(verdict_json(prog.name, cfg, v, machine.counters())))
        if code == 0:
            code = v.outcome.exit_code
    if args.dump_maps:
        print(json.dumps({"maps": _dump_maps(machine, image)}))
    return code


def cmd_scenario(args: argparse.Namespace) -> int:
    names = list(SCENARIOS) if args.all else [args.name]
    if not names or names == [None]:
        print("scenario: give a NAME or --all", file=sys.stderr)
        return EXIT_USAGE
    ok = True
    for name in names:
        try:
            report = run_scenario(name)
        except UnknownScenario:
            print(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}",
                  file=sys.stderr)
            return EXIT_USAGE
        print(json.dumps(report.to_dict(), indent=args.indent))
        ok = ok and report.passed
    return 0 if ok else 1


def cmd_export(args: argparse.Namespace) -> int:
    """Print a bundled program, or with --input the exploit packet for it
    as laid out for the first program loaded into a fresh machine."""
    try:
        src = program_source(args.name)
    except FileNotFoundError:
        print(f"no bundled program {args.name!r}", file=sys.stderr)
        return EXIT_USAGE
    if not args.input:
        sys.stdout.write(src)
        return 0
    machine = Machine(ProtectionConfig.all_off())
    image = machine.load(load_program(args.name), BugFlags(True, True, True))
    print(stack_write_packet(image, SENTINEL).hex())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpfiso", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def bug_flag(sp):
        sp.add_argument("--bug", action="append", default=[], choices=BUG_CHOICES,
                        help="inject a verifier defect (repeatable)")

    v = sub.add_parser("verify", help="verify a program and print the result as JSON")
    v.add_argument("file")
    bug_flag(v)
    v.add_argument("--indent", type=int, default=None)
    v.set_defaults(fn=cmd_verify)

    r = sub.add_parser("run", help="load and run a program over input events")
    r.add_argument("file")
    r.add_argument("--input", help="hex file, one packet (or tracepoint record) per line")
    bug_flag(r)
    for name in ("pks", "dpa", "cop", "addr-space"):
        r.add_argument(f"--no-{name}", action="store_true", help=f"disable {name} protection")
    r.add_argument("--pcid-bits", type=int, default=12)
    r.add_argument("--irq-at", type=int, default=None,
                   help="fire an interrupt after this many instructions")
    r.add_argument("--defect", action="store_true",
                   help="use the defective ringbuf_reserve helper")
    r.add_argument("--trace", action="store_true", help="print the event trace to stderr")
    r.add_argument("--dump-maps", action="store_true", help="print array map contents at the end")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("scenario", help="run a built-in scenario and check its expectations")
    s.add_argument("name", nargs="?")
    s.add_argument("--all", action="store_true")
    s.add_argument("--indent", type=int, default=None)
    s.set_defaults(fn=cmd_scenario)

    e = sub.add_parser("export", help="print a bundled program or its exploit input")
    e.add_argument("name")
    e.add_argument("--input", action="store_true")
    e.set_defaults(fn=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AsmError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
