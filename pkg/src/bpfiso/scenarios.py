"""Built-in attack and stress scenarios with their expectation matrices.

Every scenario is a list of rows. A row fixes the protections, the
verifier bug flags and the expected outcome, runs on a fresh
:class:`Machine`, and records whether what happened matches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

from .helpers import default_registry
from .isa import Program, assemble
from .ranges import ValueRange
from .runtime import (
    SENTINEL, Machine, Outcome, ProgramImage, ProtectionConfig, Verdict, VerifierRejected,
)
from .verifier import BugFlags


class UnknownScenario(KeyError):
    pass


def program_source(name: str) -> str:
    return resources.files("bpfiso.programs").joinpath(f"{name}.bpf").read_text()


def load_program(name: str) -> Program:
    return assemble(program_source(name), name=name)


def u64(value: int) -> bytes:
    return (value % (1 << 64)).to_bytes(8, "little")


def stack_write_packet(image: ProgramImage, target: int) -> bytes:
    """Packet whose first 8 data bytes steer ``[r10 + v - 16]`` to ``target``."""
    return u64(target - image.stack_top + 16)


def ipv4_packet(proto: int, payload_len: int = 0) -> bytes:
    """Bare 20-byte IPv4 header (no options) followed by zero payload."""
    total = 20 + payload_len
    hdr = bytes([0x45, 0, total >> 8, total & 0xFF, 0, 0, 0, 0, 64, proto, 0, 0,
                 10, 0, 0, 1, 10, 0, 0, 2])
    return hdr + bytes(payload_len)


@dataclass
class RowResult:
    label: str
    config: ProtectionConfig
    bugs: list[str]
    expected: str
    outcome: str
    passed: bool
    detail: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    verdicts: list[Verdict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"label": self.label, "protections": self.config.protections(),
                "bugs": self.bugs, "expected": self.expected, "outcome": self.outcome,
                "pass": self.passed, "detail": self.detail, "counters": self.counters}


@dataclass
class Report:
    scenario: str
    rows: list[RowResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "pass": self.passed,
                "rows": [r.to_dict() for r in self.rows]}


def _run_one(machine: Machine, prog: Program, flags: BugFlags, event: Callable | bytes = b""):
    """Load and run once; the event may depend on the loaded image."""
    try:
        image = machine.load(prog, flags)
    except VerifierRejected as rej:
        return None, rej.verdict
    ev = event(image) if callable(event) else event
    return image, machine.run(image, ev)


def _row(label: str, cfg: ProtectionConfig, flags: BugFlags, expected: Outcome,
         machine: Machine, verdict: Verdict, extra_ok: bool = True, **detail) -> RowResult:
    return RowResult(label, cfg, flags.names(), expected.value, verdict.outcome.value,
                     verdict.outcome is expected and extra_ok,
                     {**verdict.detail, **detail}, machine.counters(), [verdict])


# -- cve-2020-27194 ------------------------------------------------------------


def cve_2020_27194() -> list[RowResult]:
    prog = load_program("cve-2020-27194")
    bug = BugFlags(or32_truncation=True)
    rows = []
    for label, cfg, flags, want in [
        ("bug off, defaults", ProtectionConfig(), BugFlags(), Outcome.VERIFIER_REJECT),
        ("bug on, defaults", ProtectionConfig(), bug, Outcome.PKS_VIOLATION),
        ("bug on, pks off", ProtectionConfig(pks_enabled=False), bug, Outcome.KERNEL_TAMPERED),
        ("bug on, all off", ProtectionConfig.all_off(), bug, Outcome.KERNEL_TAMPERED),
    ]:
        m = Machine(cfg)
        _, v = _run_one(m, prog, flags, lambda im: stack_write_packet(im, SENTINEL))
        # the violation must be the store, nothing earlier
        at_store = v.outcome is not Outcome.PKS_VIOLATION or v.detail.get("insn") == 6
        rows.append(_row(label, cfg, flags, want, m, v, at_store))
    return rows


# -- cve-2022-23222 ------------------------------------------------------------


def cve_2022_23222() -> list[RowResult]:
    prog = load_program("cve-2022-23222")
    bug = BugFlags(mem_or_null_untracked=True)
    rows = []
    for label, cfg, flags, want in [
        ("bug off, defaults", ProtectionConfig(), BugFlags(), Outcome.VERIFIER_REJECT),
        ("bug on, defaults", ProtectionConfig(), bug, Outcome.PKS_VIOLATION),
        ("bug on, all off", ProtectionConfig.all_off(), bug, Outcome.KERNEL_TAMPERED),
    ]:
        m = Machine(cfg)
        _, v = _run_one(m, prog, flags, lambda im: stack_write_packet(im, SENTINEL))
        at_store = v.outcome is not Outcome.PKS_VIOLATION or v.detail.get("insn") == 12
        rows.append(_row(label, cfg, flags, want, m, v, at_store))
    return rows


# -- cve-2021-34866 ------------------------------------------------------------


def cve_2021_34866() -> list[RowResult]:
    prog = load_program("cve-2021-34866")
    bug = BugFlags(helper_map_mischeck=True)
    off = dict(pks_enabled=False, dpa_enabled=False, cop_enabled=False)
    rows = []
    for label, cfg, flags, want in [
        ("bug off, defaults", ProtectionConfig(), BugFlags(), Outcome.VERIFIER_REJECT),
        ("dpa on", ProtectionConfig(), bug, Outcome.DPA_VIOLATION),
        ("dpa off, cop on", ProtectionConfig(dpa_enabled=False), bug, Outcome.COP_VIOLATION),
        ("dpa off, cop off, pks on",
         ProtectionConfig(dpa_enabled=False, cop_enabled=False), bug, Outcome.PKS_VIOLATION),
        ("all off", ProtectionConfig(**off, addr_space_enabled=False), bug,
         Outcome.KERNEL_TAMPERED),
    ]:
        m = Machine(cfg, defective_helpers={"ringbuf_reserve"})
        _, v = _run_one(m, prog, flags)
        rows.append(_row(label, cfg, flags, want, m, v))
    return rows


# -- dpa four cases ------------------------------------------------------------

# Ground truth T of the scratch index: the buffer is 0x21 bytes long.
SCRATCH_TRUTH = ValueRange.of(0, 0x20)


def _scratch_const(index: int) -> Program:
    return assemble(f"mov r1, {index:#x}\nmov r2, 0x41\ncall scratch_write\nmov r0, 0\nexit",
                    name=f"scratch-{index:#x}")


@dataclass
class FourCase:
    row: int
    label: str
    runtime: int  # R
    deduced: ValueRange | None  # D, None when the verifier never gets that far
    expected: ValueRange  # E
    truth: ValueRange  # T
    outcome: Outcome


def four_cases() -> list[tuple[FourCase, Program, BugFlags, object]]:
    reg = default_registry()
    loose = reg.with_override("scratch_write", 0, ValueRange.of(0, 0xBA))
    e = ValueRange.of(0, 0x20)
    return [
        (FourCase(1, "safe", 0x10, ValueRange.const(0x10), e, SCRATCH_TRUTH, Outcome.COMPLETED),
         _scratch_const(0x10), BugFlags(), reg),
        (FourCase(2, "verifier-mitigated", 0xBA, ValueRange.const(0xBA), e, SCRATCH_TRUTH,
                  Outcome.VERIFIER_REJECT),
         _scratch_const(0xBA), BugFlags(), reg),
        (FourCase(3, "isolation-mitigated", 0xBA, ValueRange.const(0x10), e, SCRATCH_TRUTH,
                  Outcome.DPA_VIOLATION),
         load_program("dpa-probe"), BugFlags(or32_truncation=True), reg),
        (FourCase(4, "unsafe", 0xBA, ValueRange.const(0xBA), ValueRange.of(0, 0xBA),
                  SCRATCH_TRUTH, Outcome.KERNEL_TAMPERED),
         _scratch_const(0xBA), BugFlags(), loose),
    ]


def dpa_four_cases() -> list[RowResult]:
    rows = []
    cfg = ProtectionConfig()
    for case, prog, flags, registry in four_cases():
        m = Machine(cfg, helpers=registry)
        image, v = _run_one(m, prog, flags, u64(case.runtime))
        d = None
        if image is not None:
            (call_pc,) = image.callsite_ranges
            d = image.callsite_ranges[call_pc][1]
        ok = d is None or d == case.deduced
        rows.append(_row(f"row {case.row}: {case.label}", cfg, flags, case.outcome, m, v, ok,
                         R=case.runtime, D=None if d is None else [d.umin, d.umax],
                         E=[case.expected.umin, case.expected.umax],
                         T=[case.truth.umin, case.truth.umax]))
    # row 3 again without DPA shows what the guard was holding back
    case, prog, flags, registry = four_cases()[2]
    cfg_off = ProtectionConfig(dpa_enabled=False)
    m = Machine(cfg_off, helpers=registry)
    _, v = _run_one(m, prog, flags, u64(case.runtime))
    rows.append(_row("row 3 without dpa", cfg_off, flags, Outcome.KERNEL_TAMPERED, m, v))
    return rows


# -- intra-bpf tamper ----------------------------------------------------------

VICTIM_CONFIG = 0x1122_3344_5566_7788


def intra_bpf_tamper() -> list[RowResult]:
    attacker_prog = load_program("intra-attacker")
    victim_prog = load_program("intra-victim")
    bug = BugFlags(or32_truncation=True)
    rows = []
    for label, cfg, want, intact in [
        ("defaults", ProtectionConfig(), Outcome.PAGE_FAULT, True),
        ("addr_space off", ProtectionConfig(addr_space_enabled=False), Outcome.COMPLETED, False),
        ("all off", ProtectionConfig.all_off(), Outcome.COMPLETED, False),
    ]:
        m = Machine(cfg)
        attacker = m.load(attacker_prog, bug)
        victim = m.load(victim_prog)
        m.kwrite(victim.maps[0].data, u64(VICTIM_CONFIG), victim.space)
        before = m.map_bytes(victim, 0)
        v = m.run(attacker, stack_write_packet(attacker, victim.maps[0].data))
        after = m.map_bytes(victim, 0)
        victim_v = m.run(victim)
        is_intact = before == after
        rows.append(_row(label, cfg, bug, want, m, v, is_intact == intact,
                         victim_intact=is_intact, victim_r0=victim_v.detail.get("r0")))
    return rows


# -- interrupts ----------------------------------------------------------------


def irq_payloads() -> list[tuple[str, Program, BugFlags, Callable, dict]]:
    """Programs for the interrupt sweep with the input each one runs on."""
    return [
        ("byte-counter", load_program("byte-counter"), BugFlags(),
         lambda im: ipv4_packet(6, 40), {}),
        ("cve-2020-27194", load_program("cve-2020-27194"), BugFlags(or32_truncation=True),
         lambda im: stack_write_packet(im, SENTINEL), {}),
        ("cve-2022-23222", load_program("cve-2022-23222"), BugFlags(mem_or_null_untracked=True),
         lambda im: stack_write_packet(im, SENTINEL), {}),
        ("cve-2021-34866", load_program("cve-2021-34866"), BugFlags(helper_map_mischeck=True),
         lambda im: b"", {"defective_helpers": {"ringbuf_reserve"}}),
    ]


def irq_sweep(name: str, prog: Program, flags: BugFlags, event: Callable, kw: dict,
              cfg: ProtectionConfig | None = None) -> tuple[Verdict, list[Verdict], int]:
    """Baseline verdict, then one verdict per interrupt point 1..len(prog)."""
    cfg = cfg or ProtectionConfig()
    base_m = Machine(cfg, **kw)
    _, base = _run_one(base_m, prog, flags, event)
    swept, fired = [], 0
    for k in range(1, len(prog) + 1):
        c = ProtectionConfig(**{**cfg.__dict__, "interrupt_at": k})
        m = Machine(c, **kw)
        _, v = _run_one(m, prog, flags, event)
        swept.append(v)
        fired += m.irq_fired
    return base, swept, fired


def irq_during_bpf() -> list[RowResult]:
    rows = []
    cfg = ProtectionConfig()
    for name, prog, flags, event, kw in irq_payloads():
        base, swept, fired = irq_sweep(name, prog, flags, event, kw, cfg)
        same = all(v.key() == base.key() for v in swept)
        m = Machine(cfg, **kw)
        row = _row(f"{name}, irq at 1..{len(prog)}", cfg, flags, base.outcome, m, base,
                   same and fired > 0, interrupts_fired=fired, identical=same)
        rows.append(row)
    return rows


# -- pcid conflict -------------------------------------------------------------


def pcid_conflict(n_images: int = 5, n_events: int = 20) -> list[RowResult]:
    prog = load_program("byte-counter")
    rows = []
    for bits, want_conflicts in ((2, True), (12, False)):
        cfg = ProtectionConfig(pcid_bits=bits)
        m = Machine(cfg)
        images = [m.load(prog) for _ in range(n_images)]
        events = [ipv4_packet(p % 3 + 6, 10) for p in range(n_events)]
        verdicts = m.attach_and_dispatch(images, events)
        flushes = m.mmu.conflict_flushes
        all_done = all(v.outcome is Outcome.COMPLETED for v in verdicts)
        ok = all_done and (flushes > 0) == want_conflicts and m.mmu.tlb.cross_pcid_hits == 0
        merged = Verdict(Outcome.COMPLETED if all_done else verdicts[0].outcome,
                         {"runs": len(verdicts), "pcids": [im.pcid for im in images]})
        rows.append(_row(f"pcid_bits={bits}, {n_images} images", cfg, BugFlags(),
                         Outcome.COMPLETED, m, merged, ok))
    return rows


SCENARIOS: dict[str, Callable[[], list[RowResult]]] = {
    "cve-2020-27194": cve_2020_27194,
    "cve-2022-23222": cve_2022_23222,
    "cve-2021-34866": cve_2021_34866,
    "dpa-four-cases": dpa_four_cases,
    "intra-bpf-tamper": intra_bpf_tamper,
    "irq-during-bpf": irq_during_bpf,
    "pcid-conflict": pcid_conflict,
}


def run_scenario(name: str) -> Report:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None
    return Report(name, fn())
