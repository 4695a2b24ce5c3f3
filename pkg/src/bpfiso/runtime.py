"""Loading and running verified programs inside their protection domains.

A :class:`Machine` is one simulated CPU with its memory. ``load`` verifies
a program and lays it out in its own virtual window (and, by default, its
own address space and PCID). ``run`` switches into the program's domain,
interprets it, and maps whatever stopped it to a :class:`Verdict`.

Protection keys used throughout:

    0  kernel data        AD while BPF code runs
    1  BPF memory         stack, maps, code, context alias
    2  shared descriptors WD while BPF code or helpers run
    3  critical objects   AD while BPF code runs; AD in helpers unless COP is off
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

from .alloc import FrameAllocator, ObjectPool, PagePool, VirtReservation, Window
from .helpers import (
    HelperEnv, HelperRegistry, KernelLayout, MapObject, SKB_MAX_DATA,
    bind_map, data_pages, default_registry, metadata_record,
)
from .isa import FRAME_REG, Instruction, Opcode, Program, ProgType, format_insn
from .mem import (
    KEY_BPF, KEY_CRITICAL, KEY_KERNEL, KEY_SHARED, PAGE_SIZE, AddressSpace, Fault,
    Mmu, Perm, Pkrs, page_of,
)
from .ranges import U32_MAX, U64_MAX
from .verifier import STACK_SIZE, TRACE_CTX_SIZE, BugFlags, VerifierOutput, verify

INSN_BYTES = 8

KERNEL_BASE = 0x4_0000_0000
KERNEL_DATA = KERNEL_BASE
SCRATCH = KERNEL_DATA
SCRATCH_LEN = 0x21
SENTINEL = KERNEL_DATA + 0xBA
SENTINEL_VALUE = 0x5A
SOCK = KERNEL_DATA + 0x400
SOCK_LEN = 16
TRACE_RECORD = KERNEL_DATA + 0xC00
IRQ_COUNTER = KERNEL_DATA + 0x800
SHARED_PAGE = KERNEL_BASE + 0x1000
CRITICAL_PAGE = KERNEL_BASE + 0x2000
SAVED_PKRS = CRITICAL_PAGE
SAVED_STACK = CRITICAL_PAGE + 8
SKB_FRAME = KERNEL_BASE + 0x3000
DESC_SIZE = 16


class MachineError(Exception):
    pass


class ReentrantEntry(MachineError):
    pass


class NotInBpf(MachineError):
    pass


class VerifierRejected(MachineError):
    def __init__(self, output: VerifierOutput, program: str):
        self.output = output
        self.verdict = Verdict(Outcome.VERIFIER_REJECT, {"reason": output.reject_reason}, program)
        super().__init__(output.reject_reason)


@dataclass
class ProtectionConfig:
    pks_enabled: bool = True
    dpa_enabled: bool = True
    cop_enabled: bool = True
    addr_space_enabled: bool = True
    pcid_bits: int = 12
    interrupt_at: int | None = None

    @classmethod
    def all_off(cls, **kw) -> ProtectionConfig:
        base = dict(pks_enabled=False, dpa_enabled=False, cop_enabled=False,
                    addr_space_enabled=False)
        base.update(kw)
        return cls(**base)

    @property
    def all_on(self) -> bool:
        return self.pks_enabled and self.dpa_enabled and self.cop_enabled and self.addr_space_enabled

    def protections(self) -> dict[str, bool]:
        return {"pks": self.pks_enabled, "dpa": self.dpa_enabled, "cop": self.cop_enabled,
                "addr_space": self.addr_space_enabled}


class Outcome(Enum):
    COMPLETED = "completed"
    VERIFIER_REJECT = "verifier_reject"
    DPA_VIOLATION = "dpa_violation"
    PKS_VIOLATION = "pks_violation"
    PAGE_FAULT = "page_fault"
    COP_VIOLATION = "cop_violation"
    KERNEL_TAMPERED = "kernel_tampered"

    @property
    def exit_code(self) -> int:
        return _EXIT_CODES[self]


_EXIT_CODES = {
    Outcome.COMPLETED: 0, Outcome.VERIFIER_REJECT: 1, Outcome.DPA_VIOLATION: 3,
    Outcome.PKS_VIOLATION: 4, Outcome.PAGE_FAULT: 5, Outcome.COP_VIOLATION: 6,
    Outcome.KERNEL_TAMPERED: 7,
}


@dataclass
class Verdict:
    outcome: Outcome
    detail: dict
    program: str = ""
    trace: list[str] = field(default_factory=list, compare=False)

    def key(self) -> tuple:
        """What must agree between two runs of the same program and input."""
        return self.outcome, json.dumps(self.detail, sort_keys=True)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "detail": self.detail}


@dataclass(frozen=True)
class Guard:
    """Runtime check that ``reg`` holds a value in [lo, hi] before a call.

    A guard with ``lo > hi`` never passes; it sits before calls the
    verifier considered unreachable.
    """

    reg: int
    lo: int
    hi: int

    def passes(self, value: int) -> bool:
        return self.lo <= value <= self.hi

    def __str__(self) -> str:
        if self.lo > self.hi:
            return "guard unreachable"
        return f"guard r{self.reg} in [{self.lo:#x}, {self.hi:#x}]"


@dataclass
class CpuState:
    in_bpf: bool = False
    saved_pkrs: Pkrs | None = None
    stack_cursor: int = 0xFFFF_8000_0000_0000  # kernel stack top, opaque
    saved_stack_cursor: int | None = None
    instruction_counter: int = 0
    pending_interrupt_at: int | None = None


@dataclass
class ProgramImage:
    program: Program
    index: int
    space: AddressSpace
    window: Window
    stack: int
    code: int
    maps: list[MapObject]
    ctx: VirtReservation | None
    ctx_addr: int
    verifier: VerifierOutput
    guards: dict[int, list[Guard]]
    entry_pkrs: Pkrs
    flags: BugFlags
    owner: str

    @property
    def name(self) -> str:
        return self.program.name

    @property
    def pcid(self) -> int:
        return self.space.pcid

    @property
    def stack_top(self) -> int:
        return self.stack + STACK_SIZE

    @property
    def callsite_ranges(self):
        return self.verifier.callsite_ranges

    def listing(self) -> str:
        """Disassembly with the injected guards shown before each call."""
        lines = []
        for pc, insn in enumerate(self.program.insns):
            for g in self.guards.get(pc, []):
                lines.append(f"      {g}")
            lines.append(f"{pc:4d}  {format_insn(insn)}")
        return "\n".join(lines)


class _Mediated:
    """The only view of memory a helper body receives."""

    __slots__ = ("read", "write")

    def __init__(self, mmu: Mmu):
        self.read = mmu.read
        self.write = mmu.write


class HelperFault(MachineError):
    """A fault raised while a helper body was running."""

    def __init__(self, helper: str, fault: Fault):
        self.helper = helper
        self.fault = fault
        super().__init__(f"{helper}: {fault}")


class _DpaStop(Exception):
    def __init__(self, pc: int, guard: Guard, value: int):
        self.pc, self.guard, self.value = pc, guard, value


def bpf_pkrs(pks: bool) -> Pkrs:
    return Pkrs.from_keys({KEY_KERNEL: Perm.AD if pks else Perm.AE, KEY_BPF: Perm.AE,
                           KEY_SHARED: Perm.WD, KEY_CRITICAL: Perm.AD})


def helper_pkrs(cop: bool) -> Pkrs:
    return Pkrs.from_keys({KEY_KERNEL: Perm.AE, KEY_BPF: Perm.AE, KEY_SHARED: Perm.WD,
                           KEY_CRITICAL: Perm.AD if cop else Perm.AE})


KERNEL_PKRS = Pkrs.all_enabled()


class Machine:
    def __init__(self, config: ProtectionConfig | None = None,
                 helpers: HelperRegistry | None = None,
                 defective_helpers: frozenset[str] | set[str] = frozenset(),
                 tlb_capacity: int = 256):
        self.config = config or ProtectionConfig()
        self.helpers = helpers or default_registry()
        self.defective_helpers = frozenset(defective_helpers)
        self.mmu = Mmu(self.config.pcid_bits, tlb_capacity)
        self.frames = FrameAllocator(self.mmu)
        self.cpu = CpuState(pending_interrupt_at=self.config.interrupt_at)
        self.images: list[ProgramImage] = []
        self.involution_failures = 0
        self.irq_fired = 0
        self.trace: list[str] = []
        self._shared_bpf_space: AddressSpace | None = None
        self.kernel_space = self.mmu.new_space(0, "kernel")
        self._kernel_pages = [
            (KERNEL_DATA, "kernel", KEY_KERNEL),
            (SHARED_PAGE, "shared", KEY_SHARED),
            (CRITICAL_PAGE, "critical", KEY_CRITICAL),
            (SKB_FRAME, "kernel", KEY_KERNEL),
        ]
        self._kernel_frames = {}
        for vaddr, owner, key in self._kernel_pages:
            (pfn,) = self.frames.alloc(1, owner)
            self._kernel_frames[vaddr] = pfn
            self.mmu.map_page(self.kernel_space, vaddr, pfn, writable=True, key=key)
        self.mmu.switch_to(self.kernel_space)
        self.mmu.set_pkrs(KERNEL_PKRS)
        self.kwrite(SENTINEL, bytes([SENTINEL_VALUE]))
        self.kernel_layout = KernelLayout(SCRATCH, SCRATCH_LEN, SENTINEL)

    # -- kernel-side memory helpers ---------------------------------------------

    def kread(self, vaddr: int, n: int, space: AddressSpace | None = None) -> bytes:
        return self.mmu.read_in(space or self.kernel_space, KERNEL_PKRS, vaddr, n)

    def kwrite(self, vaddr: int, data: bytes, space: AddressSpace | None = None) -> None:
        self.mmu.write_in(space or self.kernel_space, KERNEL_PKRS, vaddr, data)

    def sentinel(self) -> int:
        return self.kread(SENTINEL, 1)[0]

    def _space_for(self, index: int) -> AddressSpace:
        if not self.config.addr_space_enabled:
            if self._shared_bpf_space is None:
                self._shared_bpf_space = self._new_bpf_space(1 % (1 << self.config.pcid_bits), "bpf")
            return self._shared_bpf_space
        pcid = (index + 1) % (1 << self.config.pcid_bits)
        return self._new_bpf_space(pcid, f"bpf{index}")

    def _new_bpf_space(self, pcid: int, name: str) -> AddressSpace:
        space = self.mmu.new_space(pcid, name)
        for vaddr, _, key in self._kernel_pages:
            self.mmu.map_page(space, vaddr, self._kernel_frames[vaddr], writable=True, key=key)
        return space

    # -- loading ----------------------------------------------------------------

    def load(self, prog: Program, flags: BugFlags = BugFlags()) -> ProgramImage:
        out = verify(prog, flags, self.helpers)
        if not out.accepted:
            raise VerifierRejected(out, prog.name)
        index = len(self.images)
        window = Window(index)
        space = self._space_for(index)
        owner = f"bpf{index}"
        window.reserve(1)  # guard page below the stack
        pool = PagePool(self.mmu, space, window, self.frames, owner, KEY_BPF)
        objects = ObjectPool(pool, max_pages=1)
        stack = objects.alloc(STACK_SIZE)
        ctx, ctx_addr = None, 0
        if prog.prog_type is ProgType.TRACEPOINT:
            ctx_addr = objects.alloc(TRACE_CTX_SIZE)
        code = self._install_code(prog, space, window, owner)
        maps = [self._install_map(decl, space, window, owner) for decl in prog.maps]
        if prog.prog_type is ProgType.SOCKET_FILTER:
            ctx = VirtReservation.reserve(self.mmu, space, window, 2)
            (mirror,) = self.frames.alloc(1, owner)
            ctx.map(1, mirror, KEY_BPF, writable=True)
            ctx_addr = ctx.vaddr
        guards: dict[int, list[Guard]] = {}
        if self.config.dpa_enabled:
            for pc, args in out.callsite_ranges.items():
                if pc in out.dead_calls:
                    guards[pc] = [Guard(0, 1, 0)]
                else:
                    guards[pc] = [Guard(reg, vr.umin, vr.umax) for reg, vr in sorted(args.items())]
        image = ProgramImage(prog, index, space, window, stack, code, maps, ctx, ctx_addr, out,
                             guards, bpf_pkrs(self.config.pks_enabled), flags, owner)
        if index < PAGE_SIZE // DESC_SIZE:
            desc = (index.to_bytes(4, "little") + space.pcid.to_bytes(4, "little")
                    + window.base.to_bytes(8, "little"))
            self.kwrite(SHARED_PAGE + index * DESC_SIZE, desc)
        self.images.append(image)
        return image

    def _install_code(self, prog: Program, space: AddressSpace, window: Window, owner: str) -> int:
        blob = b"".join(i.encode() for i in prog.insns)
        n = -(-len(blob) // PAGE_SIZE)
        base = window.reserve(n)
        pfns = self.frames.alloc(n, owner)
        # write through a temporary data mapping, then flip to execute-only
        for i, pfn in enumerate(pfns):
            self.mmu.map_page(space, base + i * PAGE_SIZE, pfn, writable=True, key=KEY_BPF)
        self.kwrite(base, blob, space)
        for i, pfn in enumerate(pfns):
            self.mmu.unmap_page(space, base + i * PAGE_SIZE)
            self.mmu.map_page(space, base + i * PAGE_SIZE, pfn, executable=True, key=KEY_BPF)
        return base

    def _install_map(self, decl, space: AddressSpace, window: Window, owner: str) -> MapObject:
        n = data_pages(decl)
        # data pages and the metadata page are physically adjacent
        pfns = self.frames.alloc_run([owner] * n + ["critical"])
        base = window.reserve(n + 2)  # data, metadata, guard
        for i, pfn in enumerate(pfns[:n]):
            self.mmu.map_page(space, base + i * PAGE_SIZE, pfn, writable=True, key=KEY_BPF)
        meta = base + n * PAGE_SIZE
        self.mmu.map_page(space, meta, pfns[n], writable=True, key=KEY_CRITICAL)
        self.kwrite(meta, metadata_record(decl, SENTINEL), space)
        return bind_map(decl, base, meta)

    # -- domain switching -------------------------------------------------------

    def _snapshot(self) -> tuple:
        return (self.mmu.pkrs, self.mmu.active.root, self.cpu.stack_cursor, self.cpu.in_bpf)

    def enter_bpf(self, image: ProgramImage) -> None:
        if self.cpu.in_bpf:
            raise ReentrantEntry("already executing a BPF program")
        self._before = self._snapshot()
        self.cpu.in_bpf = True
        self.cpu.saved_pkrs = self.mmu.pkrs
        self.kwrite(SAVED_PKRS, self.mmu.pkrs.raw.to_bytes(8, "little"))
        self.kwrite(SAVED_STACK, self.cpu.stack_cursor.to_bytes(8, "little"))
        conflict = self.mmu.switch_to(image.space)
        if image.program.prog_type is ProgType.SOCKET_FILTER:
            image.ctx.map(0, self._kernel_frames[SKB_FRAME], KEY_BPF, writable=False)
            self.kwrite(image.ctx.page_addr(1), self.kread(SOCK, SOCK_LEN), image.space)
        else:
            self.kwrite(image.ctx_addr, self.kread(TRACE_RECORD, TRACE_CTX_SIZE), image.space)
        self.cpu.saved_stack_cursor = self.cpu.stack_cursor
        self.cpu.stack_cursor = image.stack_top
        self.mmu.set_pkrs(image.entry_pkrs)
        self.mmu.actor = "bpf"
        self._log(f"ENTER prog={image.name} pcid={image.pcid} conflict_flush={int(conflict)}")

    def exit_bpf(self, image: ProgramImage) -> None:
        if not self.cpu.in_bpf:
            raise NotInBpf("no BPF program is executing")
        self.mmu.actor = "kernel"
        self.mmu.set_pkrs(KERNEL_PKRS)
        saved = Pkrs(int.from_bytes(self.kread(SAVED_PKRS, 8), "little"))
        stack = int.from_bytes(self.kread(SAVED_STACK, 8), "little")
        if image.program.prog_type is ProgType.SOCKET_FILTER:
            self.kwrite(SOCK, self.kread(image.ctx.page_addr(1), SOCK_LEN, image.space))
            image.ctx.unmap(0)
        self.cpu.stack_cursor = stack
        self.mmu.switch_to(self.kernel_space)
        self.mmu.set_pkrs(saved)
        self.cpu.in_bpf = False
        if self._snapshot() != self._before or saved != self.cpu.saved_pkrs:
            self.involution_failures += 1
        self._log(f"EXIT prog={image.name}")

    # -- interrupts -------------------------------------------------------------

    def fire_interrupt(self, pc: int | None = None) -> None:
        self.irq_fired += 1
        self._log(f"IRQ insn={pc} in_bpf={int(self.cpu.in_bpf)}")
        actor = self.mmu.actor
        saved = self.mmu.set_pkrs(Pkrs.all_enabled()) if self.cpu.in_bpf else None
        self.mmu.actor = "irq"
        try:
            count = self.mmu.read_u64(IRQ_COUNTER)
            self.mmu.write_u64(IRQ_COUNTER, count + 1)
            self.mmu.read(SHARED_PAGE, 8)
        except Fault as f:
            raise AssertionError(f"interrupt handler faulted: {f}") from f
        finally:
            self.mmu.actor = actor
            if saved is not None:
                self.mmu.set_pkrs(saved)

    # -- helpers ----------------------------------------------------------------

    @contextmanager
    def _helper_mode(self, image: ProgramImage):
        env = HelperEnv(_Mediated(self.mmu), image.maps, self.kernel_layout,
                        self.defective_helpers)
        old = self.mmu.set_pkrs(helper_pkrs(self.config.cop_enabled))
        actor, self.mmu.actor = self.mmu.actor, "helper"
        try:
            yield env
        finally:
            self.mmu.actor = actor
            self.mmu.set_pkrs(old)

    @contextmanager
    def helper_context(self, image: ProgramImage):
        """Enter ``image``'s domain and yield the environment a helper body
        would get there."""
        self.enter_bpf(image)
        try:
            with self._helper_mode(image) as env:
                yield env
        finally:
            self.exit_bpf(image)

    def call_helper(self, image: ProgramImage, name: str, args: list[int]) -> int:
        spec = self.helpers.get(name)
        with self._helper_mode(image) as env:
            try:
                return spec.body(env, args[:len(spec.args)]) & U64_MAX
            except Fault as f:
                raise HelperFault(name, f) from f

    # -- execution --------------------------------------------------------------

    def stage_event(self, image: ProgramImage, event: bytes) -> None:
        if image.program.prog_type is ProgType.SOCKET_FILTER:
            if len(event) > SKB_MAX_DATA:
                raise ValueError(f"packet of {len(event)} bytes does not fit the skb frame")
            self.kwrite(SKB_FRAME, len(event).to_bytes(4, "little") + bytes(4) + event
                        + bytes(SKB_MAX_DATA - len(event)))
        else:
            if len(event) > TRACE_CTX_SIZE:
                raise ValueError("tracepoint records are at most 64 bytes")
            self.kwrite(TRACE_RECORD, event.ljust(TRACE_CTX_SIZE, b"\0"))

    def run(self, image: ProgramImage, event: bytes = b"") -> Verdict:
        self.stage_event(image, event)
        before = self.sentinel()
        mark = len(self.trace)
        self.enter_bpf(image)
        try:
            verdict = self._interpret(image)
        finally:
            self.exit_bpf(image)
        after = self.sentinel()
        if after != before:
            verdict = Verdict(Outcome.KERNEL_TAMPERED,
                              {"sentinel": SENTINEL, "before": before, "after": after})
            self.kwrite(SENTINEL, bytes([before]))
        verdict.program = image.name
        self._log(f"VERDICT prog={image.name} outcome={verdict.outcome.value}")
        verdict.trace = self.trace[mark:]
        return verdict

    def _interpret(self, image: ProgramImage) -> Verdict:
        regs = [0] * (FRAME_REG + 1)
        regs[1] = image.ctx_addr
        regs[FRAME_REG] = image.stack_top
        insns = image.program.insns
        fetched: set[int] = set()
        executed = 0
        irq_at = self.cpu.pending_interrupt_at
        pc = 0
        try:
            while True:
                page = page_of(image.code + pc * INSN_BYTES)
                if page not in fetched:
                    self.mmu.fetch(image.code + pc * INSN_BYTES)
                    fetched.add(page)
                insn = insns[pc]
                if insn.op is Opcode.EXIT:
                    return Verdict(Outcome.COMPLETED, {"r0": regs[0]})
                pc = self._step(image, pc, insn, regs)
                executed += 1
                self.cpu.instruction_counter += 1
                if irq_at is not None and executed == irq_at:
                    self.fire_interrupt(pc)
        except _DpaStop as stop:
            g = stop.guard
            self._log(f"GUARD insn={stop.pc} reg=r{g.reg} value={stop.value:#x} FAIL")
            return Verdict(Outcome.DPA_VIOLATION,
                           {"insn": stop.pc, "reg": g.reg, "value": stop.value,
                            "range": [g.lo, g.hi]})
        except (Fault, HelperFault) as e:
            in_helper = isinstance(e, HelperFault)
            f = e.fault if in_helper else e
            self._log(f"{f.trace_line()} insn={pc}")
            detail = {"insn": pc, **f.as_dict()}
            if in_helper:
                detail["helper"] = e.helper
            if f.kind.is_pk:
                cop = in_helper and f.key == KEY_CRITICAL
                return Verdict(Outcome.COP_VIOLATION if cop else Outcome.PKS_VIOLATION, detail)
            return Verdict(Outcome.PAGE_FAULT, detail)

    def _step(self, image: ProgramImage, pc: int, insn: Instruction, regs: list[int]) -> int:
        op = insn.op
        mmu = self.mmu
        if op.is_alu:
            b = regs[insn.src] if insn.src is not None else insn.imm & U64_MAX
            regs[insn.dst] = alu(op, regs[insn.dst], b)
            return pc + 1
        if op.is_load:
            addr = (regs[insn.src] + insn.off) & U64_MAX
            regs[insn.dst] = int.from_bytes(mmu.read(addr, op.size), "little")
            return pc + 1
        if op.is_store:
            addr = (regs[insn.dst] + insn.off) & U64_MAX
            val = regs[insn.src] if insn.src is not None else insn.imm & U64_MAX
            mmu.write(addr, (val & ((1 << 8 * op.size) - 1)).to_bytes(op.size, "little"))
            return pc + 1
        if op is Opcode.JA:
            return insn.jump_target(pc)
        if op.is_cond_jump:
            b = regs[insn.src] if insn.src is not None else insn.imm & U64_MAX
            return insn.jump_target(pc) if compare(op, regs[insn.dst], b) else pc + 1
        # CALL
        for g in image.guards.get(pc, []):
            if not g.passes(regs[g.reg]):
                raise _DpaStop(pc, g, regs[g.reg])
            self._log(f"GUARD insn={pc} reg=r{g.reg} value={regs[g.reg]:#x} ok")
        r0 = self.call_helper(image, insn.helper, regs[1:6])
        self._log(f"CALL insn={pc} helper={insn.helper} r0={r0:#x}")
        regs[0] = r0
        for r in range(1, 6):
            regs[r] = 0
        return pc + 1

    def _log(self, line: str) -> None:
        self.trace.append(line)

    # -- batches ----------------------------------------------------------------

    def attach_and_dispatch(self, images: list[ProgramImage], events: list[bytes],
                            round_robin: bool = False) -> list[Verdict]:
        out = []
        for i, event in enumerate(events):
            targets = [images[i % len(images)]] if round_robin else images
            for image in targets:
                out.append(self.run(image, event))
        return out

    def counters(self) -> dict:
        return {
            "pcid_conflict_flushes": self.mmu.conflict_flushes,
            "tlb_fills": self.mmu.tlb.fills,
            "faults": dict(sorted(self.mmu.fault_counts.items())),
        }

    def map_bytes(self, image: ProgramImage, fd: int) -> bytes:
        m = image.maps[fd]
        return self.kread(m.data, m.decl.byte_size, image.space)


def alu(op: Opcode, a: int, b: int) -> int:
    """Concrete semantics of the ALU opcodes on unsigned 64-bit values."""
    if op is Opcode.MOV:
        return b
    if op is Opcode.MOV32:
        return b & U32_MAX
    if op is Opcode.ADD:
        return (a + b) & U64_MAX
    if op is Opcode.SUB:
        return (a - b) & U64_MAX
    if op is Opcode.MUL:
        return (a * b) & U64_MAX
    if op is Opcode.AND:
        return a & b
    if op is Opcode.OR:
        return a | b
    if op is Opcode.OR32:
        return (a | b) & U32_MAX
    if op is Opcode.LSH:
        return (a << (b & 63)) & U64_MAX
    if op is Opcode.RSH:
        return a >> (b & 63)
    if op is Opcode.MOD32:
        a32, b32 = a & U32_MAX, b & U32_MAX
        return a32 % b32 if b32 else a32
    raise ValueError(f"{op} is not an ALU opcode")


def compare(op: Opcode, a: int, b: int) -> bool:
    if op is Opcode.JEQ:
        return a == b
    if op is Opcode.JNE:
        return a != b
    if op is Opcode.JGT:
        return a > b
    if op is Opcode.JGE:
        return a >= b
    if op is Opcode.JLT:
        return a < b
    if op is Opcode.JLE:
        return a <= b
    raise ValueError(f"{op} is not a conditional jump")
