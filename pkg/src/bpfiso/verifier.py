"""Static checker for BPF programs.

Two passes: a CFG check (size, jump targets, no back edges, everything
reachable), then an abstract interpretation that tracks what kind of
value every register holds and, for scalars, an unsigned range. Jumps only
go forward, so one sweep in instruction order visits each instruction
after all of its predecessors.

At each helper call the deduced ranges of the scalar argument registers
are recorded; the runtime turns them into guards.

Three :class:`BugFlags` swap in deliberately unsound rules, each modelled
on a real verifier defect.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from . import ranges as R
from .helpers import ArgKind, HelperRegistry, HelperSpec, RetKind, UnknownHelper, default_registry
from .isa import FRAME_REG, MAX_INSNS, N_REGS, Instruction, MapKind, Opcode, Program, ProgType
from .ranges import U64_MAX, ValueRange

STACK_SIZE = 512
SKB_CTX_SIZE = 4096 + 16
SKB_MIRROR = 4096  # ctx offsets from here on are the writable sock mirror
TRACE_CTX_SIZE = 64
SIGN_BIT = 1 << 63


@dataclass(frozen=True)
class BugFlags:
    or32_truncation: bool = False
    mem_or_null_untracked: bool = False
    helper_map_mischeck: bool = False

    @classmethod
    def parse(cls, names: list[str] | tuple[str, ...]) -> BugFlags:
        table = {"or32": "or32_truncation", "memnull": "mem_or_null_untracked",
                 "mapmischeck": "helper_map_mischeck"}
        unknown = [n for n in names if n not in table]
        if unknown:
            raise ValueError(f"unknown bug flag(s): {', '.join(unknown)}")
        return cls(**{table[n]: True for n in names})

    def names(self) -> list[str]:
        out = []
        if self.or32_truncation:
            out.append("or32")
        if self.mem_or_null_untracked:
            out.append("memnull")
        if self.helper_map_mischeck:
            out.append("mapmischeck")
        return out


class Kind(Enum):
    SCALAR = "scalar"
    STACK = "stack"
    MAP_VALUE = "map_value"
    CTX = "ctx"
    MEM_OR_NULL = "mem_or_null"
    MEM = "mem"  # non-null ringbuf reservation
    UNINIT = "uninit"


POINTERS = frozenset({Kind.STACK, Kind.MAP_VALUE, Kind.CTX, Kind.MEM_OR_NULL, Kind.MEM})


@dataclass(frozen=True)
class AbstractValue:
    kind: Kind
    vr: ValueRange | None = None  # scalars only
    off: tuple[int, int] = (0, 0)  # signed byte offset range, pointers only
    map_id: int | None = None
    mem_size: int = 0
    null_id: int | None = None
    nonnull: Kind | None = None  # what a MEM_OR_NULL becomes once tested

    @classmethod
    def scalar(cls, vr: ValueRange) -> AbstractValue:
        return cls(Kind.SCALAR, vr)

    @classmethod
    def const(cls, v: int) -> AbstractValue:
        return cls(Kind.SCALAR, ValueRange.const(v))

    @property
    def is_pointer(self) -> bool:
        return self.kind in POINTERS

    def join(self, other: AbstractValue) -> AbstractValue:
        if self == other:
            return self
        if Kind.UNINIT in (self.kind, other.kind):
            return UNINIT
        if self.kind is Kind.SCALAR and other.kind is Kind.SCALAR:
            return AbstractValue.scalar(self.vr.join(other.vr))
        same = (self.kind, self.map_id, self.mem_size, self.null_id, self.nonnull) == (
            other.kind, other.map_id, other.mem_size, other.null_id, other.nonnull)
        if same:
            off = (min(self.off[0], other.off[0]), max(self.off[1], other.off[1]))
            return replace(self, off=off)
        # mixing kinds leaves nothing usable
        return UNINIT

    def __str__(self) -> str:
        if self.kind is Kind.SCALAR:
            return f"scalar {self.vr}"
        if self.kind is Kind.UNINIT:
            return "uninit"
        lo, hi = self.off
        off = f"{lo:+d}" if lo == hi else f"[{lo:+d},{hi:+d}]"
        return f"{self.kind.value}{off}"


UNINIT = AbstractValue(Kind.UNINIT)
State = tuple[AbstractValue, ...]


class Rejection(Exception):
    def __init__(self, kind: str, at: int | None, msg: str = ""):
        self.kind = kind
        self.at = at
        self.msg = msg
        super().__init__(str(self))

    def __str__(self) -> str:
        where = f"(at={self.at})" if self.at is not None else ""
        return f"{self.kind}{where}: {self.msg}" if self.msg else f"{self.kind}{where}"


@dataclass
class VerifierOutput:
    accepted: bool
    reject_reason: str | None = None
    callsite_ranges: dict[int, dict[int, ValueRange]] = field(default_factory=dict)
    max_stack_depth: int = 0
    # CALLs on paths the analysis proved infeasible: nothing is known there
    dead_calls: frozenset[int] = frozenset()
    states: list[State | None] = field(default_factory=list, repr=False, compare=False)
    rejection: Rejection | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "reject_reason": self.reject_reason,
            "callsites": [
                {"insn_index": idx,
                 "args": [{"reg": reg, "umin": vr.umin, "umax": vr.umax}
                          for reg, vr in sorted(args.items())]}
                for idx, args in sorted(self.callsite_ranges.items())
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# -- CFG ----------------------------------------------------------------------


def successors(prog: Program, pc: int) -> list[int]:
    insn = prog.insns[pc]
    if insn.op is Opcode.EXIT:
        return []
    if insn.op is Opcode.JA:
        return [insn.jump_target(pc)]
    if insn.op.is_cond_jump:
        return [pc + 1, insn.jump_target(pc)]
    return [pc + 1]


def check_cfg(prog: Program) -> Rejection | None:
    n = len(prog)
    if n > MAX_INSNS:
        return Rejection("TooLarge", None, f"{n} instructions, limit {MAX_INSNS}")
    for pc, insn in enumerate(prog.insns):
        if insn.op.is_jump:
            t = insn.jump_target(pc)
            if not 0 <= t < n:
                return Rejection("BadJumpTarget", pc, f"target {t} outside [0, {n})")
            if t <= pc:
                return Rejection("BackEdge", pc, f"jump back to {t}")
        elif insn.op is not Opcode.EXIT and pc == n - 1:
            return Rejection("FallOffEnd", pc, "last instruction does not end the program")
    seen = [False] * n
    seen[0] = True
    todo = deque([0])
    while todo:
        pc = todo.popleft()
        for s in successors(prog, pc):
            if not seen[s]:
                seen[s] = True
                todo.append(s)
    for pc, ok in enumerate(seen):
        if not ok:
            return Rejection("Unreachable", pc, "no path reaches this instruction")
    return None


# -- abstract interpretation --------------------------------------------------


def _signed(v: int) -> int:
    return v - (1 << 64) if v & SIGN_BIT else v


def _ctx_bounds(prog: Program, write: bool) -> tuple[int, int]:
    if prog.prog_type is ProgType.TRACEPOINT:
        return (0, 0) if write else (0, TRACE_CTX_SIZE)
    return (SKB_MIRROR, SKB_CTX_SIZE) if write else (0, SKB_CTX_SIZE)


_SCALAR_OPS = {
    Opcode.ADD: R.add, Opcode.SUB: R.sub, Opcode.MUL: R.mul, Opcode.AND: R.and_,
    Opcode.OR: R.or_, Opcode.LSH: R.lsh, Opcode.RSH: R.rsh, Opcode.OR32: R.or32,
    Opcode.MOD32: R.mod32,
}


class _Tracker:
    def __init__(self, prog: Program, flags: BugFlags, helpers: HelperRegistry):
        self.prog = prog
        self.flags = flags
        self.helpers = helpers
        self.states: list[State | None] = [None] * len(prog)
        self.callsites: dict[int, dict[int, ValueRange]] = {}
        self.dead_calls: set[int] = set()
        self.max_depth = 0
        self.next_null_id = 1

    # state plumbing

    def _merge(self, pc: int, state: State) -> None:
        old = self.states[pc]
        self.states[pc] = state if old is None else tuple(a.join(b) for a, b in zip(old, state))

    def _reg(self, st: State, pc: int, r: int) -> AbstractValue:
        v = st[r]
        if v.kind is Kind.UNINIT:
            raise Rejection("UninitRead", pc, f"r{r} is not initialized")
        return v

    @staticmethod
    def _set(st: State, r: int, v: AbstractValue) -> State:
        return st[:r] + (v,) + st[r + 1:]

    # main loop

    def run(self) -> None:
        init = [UNINIT] * N_REGS
        init[1] = AbstractValue(Kind.CTX)
        init[FRAME_REG] = AbstractValue(Kind.STACK)
        self.states[0] = tuple(init)
        for pc, insn in enumerate(self.prog.insns):
            st = self.states[pc]
            if st is None:
                if insn.op is Opcode.CALL:
                    self.dead_calls.add(pc)
                continue
            for target, out in self.step(pc, insn, st):
                self._merge(target, out)

    def step(self, pc: int, insn: Instruction, st: State) -> list[tuple[int, State]]:
        op = insn.op
        if op.is_alu:
            return [(pc + 1, self._alu(pc, insn, st))]
        if op.is_load:
            base = self._reg(st, pc, insn.src)
            self._check_mem(pc, base, insn.off, op.size, write=False)
            return [(pc + 1, self._set(st, insn.dst, AbstractValue.scalar(ValueRange.of_width(op.size))))]
        if op.is_store:
            base = self._reg(st, pc, insn.dst)
            if insn.src is not None:
                val = self._reg(st, pc, insn.src)
                if val.is_pointer:
                    raise Rejection("PtrLeak", pc, f"r{insn.src} holds a pointer")
            self._check_mem(pc, base, insn.off, op.size, write=True)
            return [(pc + 1, st)]
        if op is Opcode.JA:
            return [(insn.jump_target(pc), st)]
        if op.is_cond_jump:
            return self._branch(pc, insn, st)
        if op is Opcode.CALL:
            return [(pc + 1, self._call(pc, insn, st))]
        r0 = self._reg(st, pc, 0)
        if r0.kind is not Kind.SCALAR:
            raise Rejection("BadReturn", pc, f"r0 is {r0}, expected a scalar")
        return []

    # ALU

    def _alu(self, pc: int, insn: Instruction, st: State) -> State:
        op = insn.op
        if insn.src is not None:
            src = self._reg(st, pc, insn.src)
        else:
            src = AbstractValue.const(insn.imm)
        if op is Opcode.MOV:
            return self._set(st, insn.dst, src)
        if op is Opcode.MOV32:
            if src.is_pointer:
                raise Rejection("BadPtrOp", pc, "32-bit move of a pointer")
            return self._set(st, insn.dst, AbstractValue.scalar(R.mov32(src.vr)))
        dst = self._reg(st, pc, insn.dst)
        if dst.is_pointer or src.is_pointer:
            return self._set(st, insn.dst, self._ptr_alu(pc, op, dst, src))
        a, b = dst.vr, src.vr
        if self.flags.or32_truncation and op is Opcode.OR:
            out = R.or_truncating(a, b)
        elif self.flags.or32_truncation and op is Opcode.OR32:
            out = R.or32_truncating(a, b)
        else:
            out = _SCALAR_OPS[op](a, b)
        return self._set(st, insn.dst, AbstractValue.scalar(out))

    def _ptr_alu(self, pc: int, op: Opcode, dst: AbstractValue, src: AbstractValue) -> AbstractValue:
        if op is Opcode.ADD and src.is_pointer and not dst.is_pointer:
            dst, src = src, dst
        if op not in (Opcode.ADD, Opcode.SUB) or src.is_pointer:
            raise Rejection("BadPtrOp", pc, f"{op.value} on {dst} and {src}")
        if dst.kind is Kind.MEM_OR_NULL and not self.flags.mem_or_null_untracked:
            raise Rejection("BadPtrOp", pc, "arithmetic on a pointer that may be null")
        vr = src.vr
        if vr.is_const:
            d = _signed(vr.umin)
            lo = hi = -d if op is Opcode.SUB else d
        elif vr.umax >= SIGN_BIT:
            raise Rejection("UnboundedAddrArith", pc, f"offset {vr} is unbounded")
        elif op is Opcode.ADD:
            lo, hi = vr.umin, vr.umax
        else:
            lo, hi = -vr.umax, -vr.umin
        return replace(dst, off=(dst.off[0] + lo, dst.off[1] + hi))

    # memory

    def _check_mem(self, pc: int, base: AbstractValue, off: int, size: int, write: bool) -> None:
        lo, hi = base.off[0] + off, base.off[1] + off + size
        kind = base.kind
        if kind is Kind.STACK:
            if lo < -STACK_SIZE or hi > 0:
                raise Rejection("OobStack", pc, f"access [{lo}, {hi}) outside the {STACK_SIZE}-byte stack")
            self.max_depth = max(self.max_depth, -lo)
        elif kind in (Kind.MAP_VALUE, Kind.MEM):
            if lo < 0 or hi > base.mem_size:
                reason = "OobMapValue" if kind is Kind.MAP_VALUE else "OobMem"
                raise Rejection(reason, pc, f"access [{lo}, {hi}) outside a {base.mem_size}-byte object")
        elif kind is Kind.CTX:
            clo, chi = _ctx_bounds(self.prog, write)
            if lo < clo or hi > chi:
                what = "write" if write else "read"
                raise Rejection("BadCtxAccess", pc, f"{what} [{lo}, {hi}) outside context bounds")
        elif kind is Kind.MEM_OR_NULL:
            raise Rejection("NullDeref", pc, "pointer may be null")
        else:
            raise Rejection("BadMemAccess", pc, f"dereference of {base}")

    # branches

    def _branch(self, pc: int, insn: Instruction, st: State) -> list[tuple[int, State]]:
        dst = self._reg(st, pc, insn.dst)
        src = self._reg(st, pc, insn.src) if insn.src is not None else AbstractValue.const(insn.imm)
        taken_pc, fall_pc = insn.jump_target(pc), pc + 1
        op = insn.op
        is_zero_test = (src.kind is Kind.SCALAR and src.vr.is_const and src.vr.umin == 0
                        and op in (Opcode.JEQ, Opcode.JNE))
        if dst.kind is Kind.MEM_OR_NULL and is_zero_test:
            null_st = self._resolve_null(st, dst.null_id, null=True)
            live_st = self._resolve_null(st, dst.null_id, null=False)
            if op is Opcode.JEQ:
                return [(fall_pc, live_st), (taken_pc, null_st)]
            return [(fall_pc, null_st), (taken_pc, live_st)]
        if dst.kind is not Kind.SCALAR or src.kind is not Kind.SCALAR:
            return [(fall_pc, st), (taken_pc, st)]
        out = []
        for target, taken in ((fall_pc, False), (taken_pc, True)):
            refined = refine(op, taken, dst.vr, src.vr)
            if refined is None:
                continue
            a, b = refined
            s2 = self._set(st, insn.dst, AbstractValue.scalar(a))
            if insn.src is not None and insn.src != insn.dst:
                s2 = self._set(s2, insn.src, AbstractValue.scalar(b))
            out.append((target, s2))
        return out

    def _resolve_null(self, st: State, null_id: int, null: bool) -> State:
        out = []
        for v in st:
            if v.kind is Kind.MEM_OR_NULL and v.null_id == null_id:
                if null:
                    # every copy is taken to be the null constant, even
                    # copies that were moved by arithmetic
                    v = AbstractValue.const(0)
                else:
                    v = replace(v, kind=v.nonnull, null_id=None, nonnull=None)
            out.append(v)
        return tuple(out)

    # calls

    def _map_arg(self, pc: int, i: int, v: AbstractValue, want: MapKind) -> int:
        maps = self.prog.maps
        ok = (v.kind is Kind.SCALAR and v.vr.is_const and v.vr.umin < len(maps)
              and maps[v.vr.umin].kind is want)
        if ok:
            return v.vr.umin
        if self.flags.helper_map_mischeck and v.kind is Kind.SCALAR and v.vr.is_const:
            # the faulty check believes it was handed a map of the right kind
            for fd, m in enumerate(maps):
                if m.kind is want:
                    return fd
        raise Rejection("BadHelperArg", pc, f"r{i + 1} = {v} is not a {want.value} map")

    def _call(self, pc: int, insn: Instruction, st: State) -> State:
        try:
            spec = self.helpers.get(insn.helper)
        except UnknownHelper:
            raise Rejection("UnknownHelper", pc, f"no helper named {insn.helper!r}") from None
        recorded: dict[int, ValueRange] = {}
        map_fd: int | None = None
        args = [self._reg(st, pc, i + 1) for i in range(len(spec.args))]
        for i, (a, v) in enumerate(zip(spec.args, args)):
            reg = i + 1
            if a.kind is ArgKind.SCALAR:
                if v.kind is not Kind.SCALAR:
                    raise Rejection("BadHelperArg", pc, f"r{reg} = {v}, expected a scalar")
                if not v.vr.subrange_of(a.expect):
                    raise Rejection("BadHelperArg", pc,
                                    f"r{reg} deduced {v.vr} not within expected {a.expect}")
                recorded[reg] = v.vr
            elif a.kind is ArgKind.MAP:
                fd = self._map_arg(pc, i, v, a.map_kind)
                map_fd = fd if i == 0 else map_fd
                recorded[reg] = ValueRange.const(fd)
            elif a.kind is ArgKind.CTX:
                if v.kind is not Kind.CTX or v.off != (0, 0):
                    raise Rejection("BadHelperArg", pc, f"r{reg} = {v}, expected the context")
            elif a.kind is ArgKind.RINGBUF_MEM:
                if v.kind is not Kind.MEM or v.off != (0, 0):
                    raise Rejection("BadHelperArg", pc, f"r{reg} = {v}, expected a reservation")
            elif a.kind is ArgKind.STACK_BUF:
                size = self._buf_size(pc, spec, a.size_from, args, map_fd)
                if v.kind is not Kind.STACK:
                    raise Rejection("BadHelperArg", pc, f"r{reg} = {v}, expected a stack buffer")
                if size:
                    self._check_mem(pc, v, 0, size, write=True)
        self.callsites[pc] = recorded
        out = list(st)
        for r in range(1, 6):
            out[r] = UNINIT
        out[0] = self._ret(spec, args, map_fd)
        return tuple(out)

    def _buf_size(self, pc: int, spec: HelperSpec, size_from, args, map_fd) -> int:
        if size_from == "value_size":
            return self.prog.maps[map_fd].value_size
        n = args[size_from]
        if n.kind is not Kind.SCALAR:
            raise Rejection("BadHelperArg", pc, f"r{size_from + 1} = {n}, expected a length")
        return n.vr.umax

    def _ret(self, spec: HelperSpec, args: list[AbstractValue], map_fd: int | None) -> AbstractValue:
        ret = spec.ret
        if ret.kind is RetKind.SCALAR:
            return AbstractValue.scalar(ret.range or ValueRange.full())
        null_id = self.next_null_id
        self.next_null_id += 1
        if ret.size_from == "value_size":
            size, nonnull = self.prog.maps[map_fd].value_size, Kind.MAP_VALUE
        else:
            size, nonnull = args[ret.size_from].vr.umin, Kind.MEM
        return AbstractValue(Kind.MEM_OR_NULL, map_id=map_fd, mem_size=size,
                             null_id=null_id, nonnull=nonnull)


def refine(op: Opcode, taken: bool, a: ValueRange, b: ValueRange) -> tuple[ValueRange, ValueRange] | None:
    """Narrow (a, b) given that ``a <op> b`` is ``taken``; None if impossible."""
    if not taken:
        op = _NEGATE[op]
    if op is Opcode.JEQ:
        lo, hi = max(a.umin, b.umin), min(a.umax, b.umax)
        if lo > hi:
            return None
        v = ValueRange.of(lo, hi)
        return v, v
    if op is Opcode.JNE:
        if a.is_const and b.is_const and a.umin == b.umin:
            return None
        return _exclude(a, b), _exclude(b, a)
    if op in (Opcode.JLT, Opcode.JLE):
        b2, a2 = _refine_gt(b, a, strict=op is Opcode.JLT)  # a < b  <=>  b > a
        return (a2, b2) if a2 is not None and b2 is not None else None
    a2, b2 = _refine_gt(a, b, strict=op is Opcode.JGT)
    return (a2, b2) if a2 is not None and b2 is not None else None


def _refine_gt(a: ValueRange, b: ValueRange, strict: bool):
    """a > b (strict) or a >= b."""
    d = 1 if strict else 0
    a2 = a.meet(b.umin + d, U64_MAX)
    b2 = b.meet(0, a.umax - d) if a.umax - d >= 0 else None
    return a2, b2


def _exclude(a: ValueRange, b: ValueRange) -> ValueRange:
    """Shave a constant ``b`` off an end of ``a``."""
    if not b.is_const or a.is_const:
        return a
    if b.umin == a.umin:
        return ValueRange.of(a.umin + 1, a.umax)
    if b.umin == a.umax:
        return ValueRange.of(a.umin, a.umax - 1)
    return a


_NEGATE = {
    Opcode.JEQ: Opcode.JNE, Opcode.JNE: Opcode.JEQ,
    Opcode.JGT: Opcode.JLE, Opcode.JLE: Opcode.JGT,
    Opcode.JGE: Opcode.JLT, Opcode.JLT: Opcode.JGE,
}


def track(prog: Program, flags: BugFlags = BugFlags(),
          helpers: HelperRegistry | None = None) -> VerifierOutput:
    t = _Tracker(prog, flags, helpers or default_registry())
    try:
        t.run()
    except Rejection as rej:
        return VerifierOutput(False, str(rej), states=t.states, rejection=rej)
    for pc in t.dead_calls:
        t.callsites[pc] = {}
    return VerifierOutput(True, None, t.callsites, t.max_depth, frozenset(t.dead_calls),
                          states=t.states)


def verify(prog: Program, flags: BugFlags = BugFlags(),
           helpers: HelperRegistry | None = None) -> VerifierOutput:
    rej = check_cfg(prog)
    if rej is not None:
        return VerifierOutput(False, str(rej), rejection=rej)
    return track(prog, flags, helpers)
