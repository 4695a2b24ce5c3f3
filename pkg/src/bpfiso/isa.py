"""Miniature BPF-like instruction set, its assembly text format and the
program container.

Assembly grammar, one instruction per line (``#`` starts a comment,
mnemonics are case-insensitive)::

    .type socket_filter|tracepoint
    .map <name> kind=array|ringbuf value_size=<bytes> entries=<n>
    mov rD, <imm>|rS          (also mov32 add sub mul and or or32 lsh rsh mod32)
    ldx{1,2,4,8} rD, [rS+<off>]
    stx{1,2,4,8} [rD+<off>], rS
    st{1,2,4,8}  [rD+<off>], <imm>
    ja +N
    j{eq,ne,gt,ge,lt,le} rA, rB|<imm>, +N
    call <helper_name>
    exit

Jump offsets count instructions relative to the next instruction, so
``ja +0`` is a no-op and ``ja -1`` jumps to itself.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from enum import Enum

MAX_INSNS = 4096
FRAME_REG = 10
N_REGS = 11

IMM_MIN = -(1 << 63)
IMM_MAX = (1 << 63) - 1
OFF_MIN = -(1 << 15)
OFF_MAX = (1 << 15) - 1


class AsmError(Exception):
    """Base class for assembly errors; ``line`` is 1-based or None."""

    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")


class AsmSyntaxError(AsmError):
    pass


class UnknownMnemonic(AsmError):
    pass


class OperandOutOfRange(AsmError):
    pass


class Opcode(Enum):
    MOV = "mov"
    MOV32 = "mov32"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    AND = "and"
    OR = "or"
    OR32 = "or32"
    LSH = "lsh"
    RSH = "rsh"
    MOD32 = "mod32"
    LDX1 = "ldx1"
    LDX2 = "ldx2"
    LDX4 = "ldx4"
    LDX8 = "ldx8"
    STX1 = "stx1"
    STX2 = "stx2"
    STX4 = "stx4"
    STX8 = "stx8"
    ST1 = "st1"
    ST2 = "st2"
    ST4 = "st4"
    ST8 = "st8"
    JA = "ja"
    JEQ = "jeq"
    JNE = "jne"
    JGT = "jgt"
    JGE = "jge"
    JLT = "jlt"
    JLE = "jle"
    CALL = "call"
    EXIT = "exit"

    @property
    def is_alu(self) -> bool:
        return self in _ALU

    @property
    def is_alu32(self) -> bool:
        return self in (Opcode.MOV32, Opcode.OR32, Opcode.MOD32)

    @property
    def is_load(self) -> bool:
        return self.name.startswith("LDX")

    @property
    def is_store(self) -> bool:
        return self.name.startswith("ST")

    @property
    def is_cond_jump(self) -> bool:
        return self in _COND

    @property
    def is_jump(self) -> bool:
        return self is Opcode.JA or self in _COND

    @property
    def size(self) -> int:
        """Access width in bytes of a load/store opcode."""
        return int(self.value[-1])

    @property
    def effects(self) -> frozenset[str]:
        """Architectural state the opcode may modify.

        The vocabulary is closed: ``gpr`` (r0..r9), ``memory`` (through the
        MMU), ``pc``. Nothing reaches PKRS, CR3 or any other control
        register.
        """
        if self.is_alu or self.is_load:
            return frozenset({"gpr", "pc"})
        if self.is_store:
            return frozenset({"memory", "pc"})
        if self is Opcode.CALL:
            return frozenset({"gpr", "memory", "pc"})
        return frozenset({"pc"})


_ALU = frozenset(
    {Opcode.MOV, Opcode.MOV32, Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND,
     Opcode.OR, Opcode.OR32, Opcode.LSH, Opcode.RSH, Opcode.MOD32}
)
_COND = frozenset(
    {Opcode.JEQ, Opcode.JNE, Opcode.JGT, Opcode.JGE, Opcode.JLT, Opcode.JLE}
)


class ProgType(Enum):
    SOCKET_FILTER = "socket_filter"
    TRACEPOINT = "tracepoint"


class MapKind(Enum):
    ARRAY = "array"
    RINGBUF = "ringbuf"


def _check_reg(reg: int, what: str, allow_frame: bool = True) -> None:
    hi = FRAME_REG if allow_frame else FRAME_REG - 1
    if not isinstance(reg, int) or not 0 <= reg <= hi:
        raise OperandOutOfRange(f"{what} register r{reg} not allowed here")


@dataclass(frozen=True)
class Instruction:
    op: Opcode
    dst: int = 0
    src: int | None = None
    imm: int | None = None
    off: int = 0
    helper: str | None = None

    def __post_init__(self) -> None:
        op = self.op
        if not OFF_MIN <= self.off <= OFF_MAX:
            raise OperandOutOfRange(f"offset {self.off} does not fit 16 bits")
        if self.imm is not None and not IMM_MIN <= self.imm <= IMM_MAX:
            raise OperandOutOfRange(f"immediate {self.imm:#x} does not fit 64 bits")
        if op.is_alu or op.is_cond_jump:
            if (self.src is None) == (self.imm is None):
                raise AsmSyntaxError(f"{op.value} takes exactly one of register or immediate")
            _check_reg(self.dst, "destination", allow_frame=op.is_cond_jump)
            if self.src is not None:
                _check_reg(self.src, "source")
        elif op.is_load:
            _check_reg(self.dst, "destination", allow_frame=False)
            _check_reg(self.src, "base")
            self._no(imm=True)
        elif op.name.startswith("STX"):
            _check_reg(self.dst, "base")
            _check_reg(self.src, "source")
            self._no(imm=True)
        elif op.is_store:
            _check_reg(self.dst, "base")
            if self.imm is None or self.src is not None:
                raise AsmSyntaxError(f"{op.value} stores an immediate")
        elif op is Opcode.CALL:
            if not self.helper or not re.fullmatch(r"[a-z_][a-z0-9_]*", self.helper):
                raise AsmSyntaxError(f"bad helper name {self.helper!r}")
        if op is not Opcode.CALL and self.helper is not None:
            raise AsmSyntaxError("only call names a helper")
        if op in (Opcode.JA, Opcode.EXIT, Opcode.CALL):
            if self.src is not None or self.imm is not None or self.dst != 0:
                raise AsmSyntaxError(f"{op.value} takes no register operands")
        if op in (Opcode.EXIT, Opcode.CALL) or op.is_alu:
            if self.off != 0:
                raise AsmSyntaxError(f"{op.value} takes no offset")

    def _no(self, imm: bool) -> None:
        if imm and self.imm is not None:
            raise AsmSyntaxError(f"{self.op.value} takes no immediate")

    def jump_target(self, pc: int) -> int:
        return pc + 1 + self.off

    def encode(self) -> bytes:
        """Fixed 8-byte image of the instruction as placed on code pages."""
        opidx = list(Opcode).index(self.op)
        regs = (self.dst & 0xF) | ((self.src or 0) & 0xF) << 4
        return struct.pack("<BBhI", opidx, regs, self.off, (self.imm or 0) & 0xFFFFFFFF)

    def __str__(self) -> str:
        return format_insn(self)


@dataclass(frozen=True)
class MapDecl:
    name: str
    kind: MapKind
    value_size: int
    n_entries: int

    def __post_init__(self) -> None:
        if self.value_size <= 0 or self.n_entries <= 0:
            raise OperandOutOfRange(f"map {self.name}: sizes must be positive")

    @property
    def byte_size(self) -> int:
        return self.value_size * self.n_entries


@dataclass(frozen=True)
class Program:
    insns: tuple[Instruction, ...]
    name: str = "prog"
    prog_type: ProgType = ProgType.SOCKET_FILTER
    maps: tuple[MapDecl, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "insns", tuple(self.insns))
        object.__setattr__(self, "maps", tuple(self.maps))
        if not self.insns:
            raise AsmSyntaxError("program has no instructions")

    def __len__(self) -> int:
        return len(self.insns)

    def map_index(self, name: str) -> int:
        for i, m in enumerate(self.maps):
            if m.name == name:
                return i
        raise KeyError(name)


# -- text format --------------------------------------------------------------

_REG = r"r(\d+)"
_NUM = r"[+-]?(?:0x[0-9a-f]+|\d+)"
_MEM_RE = re.compile(rf"^\[\s*{_REG}\s*(?:([+-])\s*(0x[0-9a-f]+|\d+))?\s*\]$")
_REG_RE = re.compile(rf"^{_REG}$")
_NUM_RE = re.compile(rf"^{_NUM}$")


def _fmt_imm(v: int) -> str:
    if -256 < v < 256:
        return str(v)
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


def _fmt_mem(reg: int, off: int) -> str:
    sign = "-" if off < 0 else "+"
    return f"[r{reg}{sign}{abs(off)}]"


def format_insn(insn: Instruction) -> str:
    op = insn.op
    name = op.value
    if op.is_alu:
        rhs = f"r{insn.src}" if insn.src is not None else _fmt_imm(insn.imm)
        return f"{name} r{insn.dst}, {rhs}"
    if op.is_load:
        return f"{name} r{insn.dst}, {_fmt_mem(insn.src, insn.off)}"
    if op.name.startswith("STX"):
        return f"{name} {_fmt_mem(insn.dst, insn.off)}, r{insn.src}"
    if op.is_store:
        return f"{name} {_fmt_mem(insn.dst, insn.off)}, {_fmt_imm(insn.imm)}"
    if op is Opcode.JA:
        return f"ja {insn.off:+d}"
    if op.is_cond_jump:
        rhs = f"r{insn.src}" if insn.src is not None else _fmt_imm(insn.imm)
        return f"{name} r{insn.dst}, {rhs}, {insn.off:+d}"
    if op is Opcode.CALL:
        return f"call {insn.helper}"
    return "exit"


def disassemble(prog: Program) -> str:
    lines = []
    if prog.prog_type is not ProgType.SOCKET_FILTER:
        lines.append(f".type {prog.prog_type.value}")
    for m in prog.maps:
        lines.append(
            f".map {m.name} kind={m.kind.value} value_size={m.value_size} entries={m.n_entries}"
        )
    lines.extend(format_insn(i) for i in prog.insns)
    return "\n".join(lines)


def _parse_int(tok: str, lineno: int) -> int:
    if not _NUM_RE.match(tok):
        raise AsmSyntaxError(f"expected a number, got {tok!r}", lineno)
    return int(tok, 0)


def _parse_reg(tok: str, lineno: int) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise AsmSyntaxError(f"expected a register, got {tok!r}", lineno)
    reg = int(m.group(1))
    if reg > FRAME_REG:
        raise OperandOutOfRange(f"no register r{reg}", lineno)
    return reg


def _parse_mem(tok: str, lineno: int) -> tuple[int, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise AsmSyntaxError(f"expected [rN+off], got {tok!r}", lineno)
    reg = int(m.group(1))
    if reg > FRAME_REG:
        raise OperandOutOfRange(f"no register r{reg}", lineno)
    off = int(m.group(3), 0) if m.group(3) else 0
    if m.group(2) == "-":
        off = -off
    return reg, off


def _reg_or_imm(tok: str, lineno: int) -> dict:
    if _REG_RE.match(tok):
        return {"src": _parse_reg(tok, lineno)}
    return {"imm": _parse_int(tok, lineno)}


def _split_operands(rest: str) -> list[str]:
    # commas inside [..] never occur, so a plain split is enough
    return [t.strip() for t in rest.split(",")] if rest.strip() else []


def _parse_directive(words: list[str], lineno: int, meta: dict) -> None:
    head = words[0]
    if head == ".type":
        if len(words) != 2:
            raise AsmSyntaxError(".type takes one argument", lineno)
        try:
            meta["prog_type"] = ProgType(words[1])
        except ValueError:
            raise AsmSyntaxError(f"unknown program type {words[1]!r}", lineno) from None
    elif head == ".map":
        if len(words) < 2:
            raise AsmSyntaxError(".map needs a name", lineno)
        name, opts = words[1], {}
        for w in words[2:]:
            key, eq, val = w.partition("=")
            if not eq:
                raise AsmSyntaxError(f"bad map option {w!r}", lineno)
            opts[key] = val
        if set(opts) != {"kind", "value_size", "entries"}:
            raise AsmSyntaxError(".map needs kind=, value_size= and entries=", lineno)
        try:
            kind = MapKind(opts["kind"])
        except ValueError:
            raise AsmSyntaxError(f"unknown map kind {opts['kind']!r}", lineno) from None
        try:
            decl = MapDecl(name, kind, _parse_int(opts["value_size"], lineno),
                           _parse_int(opts["entries"], lineno))
        except OperandOutOfRange as e:
            raise OperandOutOfRange(e.reason, lineno) from None
        if any(m.name == name for m in meta["maps"]):
            raise AsmSyntaxError(f"duplicate map {name!r}", lineno)
        meta["maps"].append(decl)
    else:
        raise UnknownMnemonic(f"unknown directive {head!r}", lineno)


_BY_NAME = {op.value: op for op in Opcode}


def _parse_insn(line: str, lineno: int) -> Instruction:
    mnemonic, _, rest = line.partition(" ")
    op = _BY_NAME.get(mnemonic)
    if op is None:
        raise UnknownMnemonic(f"unknown mnemonic {mnemonic!r}", lineno)
    ops = _split_operands(rest)

    def want(n: int) -> None:
        if len(ops) != n:
            raise AsmSyntaxError(f"{mnemonic} takes {n} operand(s), got {len(ops)}", lineno)

    if op.is_alu:
        want(2)
        fields = {"dst": _parse_reg(ops[0], lineno), **_reg_or_imm(ops[1], lineno)}
    elif op.is_load:
        want(2)
        base, off = _parse_mem(ops[1], lineno)
        fields = {"dst": _parse_reg(ops[0], lineno), "src": base, "off": off}
    elif op.name.startswith("STX"):
        want(2)
        base, off = _parse_mem(ops[0], lineno)
        fields = {"dst": base, "off": off, "src": _parse_reg(ops[1], lineno)}
    elif op.is_store:
        want(2)
        base, off = _parse_mem(ops[0], lineno)
        fields = {"dst": base, "off": off, "imm": _parse_int(ops[1], lineno)}
    elif op is Opcode.JA:
        want(1)
        fields = {"off": _parse_int(ops[0], lineno)}
    elif op.is_cond_jump:
        want(3)
        fields = {"dst": _parse_reg(ops[0], lineno), **_reg_or_imm(ops[1], lineno),
                  "off": _parse_int(ops[2], lineno)}
    elif op is Opcode.CALL:
        want(1)
        fields = {"helper": ops[0]}
    else:
        want(0)
        fields = {}
    try:
        return Instruction(op, **fields)
    except AsmError as e:
        raise type(e)(e.reason, lineno) from None


def assemble(text: str, name: str = "prog") -> Program:
    meta: dict = {"prog_type": ProgType.SOCKET_FILTER, "maps": []}
    insns: list[Instruction] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().lower()
        if not line:
            continue
        line = re.sub(r"\s+", " ", line)
        if line.startswith("."):
            _parse_directive(line.split(" "), lineno, meta)
        else:
            insns.append(_parse_insn(line, lineno))
    if not insns:
        raise AsmSyntaxError("program has no instructions")
    return Program(tuple(insns), name=name, prog_type=meta["prog_type"], maps=tuple(meta["maps"]))
