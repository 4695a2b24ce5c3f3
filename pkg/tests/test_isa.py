from __future__ import annotations

import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpfiso.isa import (
    MAX_INSNS, AsmError, AsmSyntaxError, Instruction, MapDecl, MapKind, Opcode,
    OperandOutOfRange, Program, ProgType, UnknownMnemonic, assemble, disassemble, format_insn,
)
from bpfiso.scenarios import load_program

IMM = st.integers(-(1 << 63), (1 << 63) - 1)
OFF = st.integers(-(1 << 15), (1 << 15) - 1)
GPR = st.integers(0, 9)
ANY_REG = st.integers(0, 10)
HELPER = st.sampled_from(["map_lookup", "skb_load", "ringbuf_reserve", "scratch_write"])


@st.composite
def instructions(draw):
    op = draw(st.sampled_from(list(Opcode)))
    if op.is_alu:
        if draw(st.booleans()):
            return Instruction(op, draw(GPR), src=draw(ANY_REG))
        return Instruction(op, draw(GPR), imm=draw(IMM))
    if op.is_load:
        return Instruction(op, draw(GPR), src=draw(ANY_REG), off=draw(OFF))
    if op.name.startswith("STX"):
        return Instruction(op, draw(ANY_REG), src=draw(ANY_REG), off=draw(OFF))
    if op.is_store:
        return Instruction(op, draw(ANY_REG), imm=draw(IMM), off=draw(OFF))
    if op is Opcode.JA:
        return Instruction(op, off=draw(OFF))
    if op.is_cond_jump:
        if draw(st.booleans()):
            return Instruction(op, draw(ANY_REG), src=draw(ANY_REG), off=draw(OFF))
        return Instruction(op, draw(ANY_REG), imm=draw(IMM), off=draw(OFF))
    if op is Opcode.CALL:
        return Instruction(op, helper=draw(HELPER))
    return Instruction(op)


@st.composite
def programs(draw):
    insns = draw(st.lists(instructions(), min_size=1, max_size=20))
    maps = draw(st.lists(
        st.builds(MapDecl, st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True),
                  st.sampled_from(list(MapKind)), st.integers(1, 64), st.integers(1, 64)),
        max_size=3, unique_by=lambda m: m.name))
    return Program(tuple(insns), prog_type=draw(st.sampled_from(list(ProgType))),
                   maps=tuple(maps))


# -- examples ------------------------------------------------------------------


def test_minimal_program():
    p = assemble("mov r0, 0\nexit")
    assert len(p) == 2
    assert p.prog_type is ProgType.SOCKET_FILTER
    assert p.insns[0] == Instruction(Opcode.MOV, 0, imm=0)


def test_or32_with_immediate():
    (insn,) = assemble("or32 r5, 0").insns
    assert insn == Instruction(Opcode.OR32, 5, imm=0)


def test_conditional_jump_with_register():
    (insn,) = assemble("jge r5, r6, +2").insns
    assert insn == Instruction(Opcode.JGE, 5, src=6, off=2)
    assert format_insn(insn) == "jge r5, r6, +2"


def test_exit_disassembles_to_exit():
    assert disassemble(Program((Instruction(Opcode.EXIT),))) == "exit"


def test_mnemonics_are_case_insensitive_and_comments_ignored():
    p = assemble("MOV R0, 0x10   # load\n# whole-line comment\n\nEXIT")
    assert p.insns == (Instruction(Opcode.MOV, 0, imm=16), Instruction(Opcode.EXIT))


def test_directives():
    p = assemble(".type tracepoint\n.map counts kind=array value_size=8 entries=4\nmov r0, 0\nexit")
    assert p.prog_type is ProgType.TRACEPOINT
    assert p.maps == (MapDecl("counts", MapKind.ARRAY, 8, 4),)
    assert p.map_index("counts") == 0


# -- errors --------------------------------------------------------------------


@pytest.mark.parametrize("src, err, line", [
    ("mov r0, 0\nfrobnicate r1", UnknownMnemonic, 2),
    ("mov r0", AsmSyntaxError, 1),
    ("ldx8 r0, r1", AsmSyntaxError, 1),
    ("mov r11, 0", OperandOutOfRange, 1),
    ("mov r10, 0", OperandOutOfRange, 1),
    ("ldx8 r10, [r1+0]", OperandOutOfRange, 1),
    ("mov r0, 0x10000000000000000", OperandOutOfRange, 1),
    ("exit\nja +40000", OperandOutOfRange, 2),
    (".map m kind=hash value_size=8 entries=1\nexit", AsmSyntaxError, 1),
])
def test_assembly_errors_carry_their_line(src, err, line):
    with pytest.raises(err) as info:
        assemble(src)
    assert info.value.line == line
    assert isinstance(info.value, AsmError)


def test_empty_program_rejected():
    with pytest.raises(AsmSyntaxError):
        assemble("# nothing here\n")


@given(st.one_of(st.integers(min_value=1 << 63), st.integers(max_value=-(1 << 63) - 1)))
def test_instruction_rejects_wide_immediates(imm):
    with pytest.raises(OperandOutOfRange):
        Instruction(Opcode.MOV, 0, imm=imm)


@given(st.one_of(st.integers(min_value=1 << 15), st.integers(max_value=-(1 << 15) - 1)))
def test_instruction_rejects_wide_offsets(off):
    with pytest.raises(OperandOutOfRange):
        Instruction(Opcode.JA, off=off)


# -- round trip ----------------------------------------------------------------


@settings(max_examples=1000, deadline=None)
@given(programs())
def test_disassemble_then_assemble_is_identity(prog):
    text = disassemble(prog)
    back = assemble(text, name=prog.name)
    assert back == prog
    assert disassemble(back) == text


CORPUS = """\
mov r0, 0
mov r1, r2
mov32 r3, 0xffffffff
add r4, -8
sub r5, r6
mul r7, 3
and r8, 255
or r9, r1
or32 r5, 0
lsh r1, 32
rsh r1, r2
mod32 r2, 7
ldx1 r0, [r1+0]
ldx2 r2, [r10-2]
ldx4 r3, [r1+12]
ldx8 r4, [r10-512]
stx1 [r10-1], r2
stx2 [r10-4], r3
stx4 [r1+8], r4
stx8 [r10-8], r5
st1 [r10-1], 255
st2 [r10-2], 0x1234
st4 [r10-4], -1
st8 [r5-16], 0xbad
ja +0
ja -1
jeq r1, 0, +3
jne r1, r2, +1
jgt r3, 0x600000001, +4
jge r5, r6, +2
jlt r7, 10, +0
jle r5, 0, +5
call map_lookup
call map_update
call map_delete
call ringbuf_reserve
call ringbuf_submit
call skb_load
call scratch_write
exit
mov r0, -0x8000000000000000
mov r0, 0x7fffffffffffffff
add r1, r10
ldx8 r0, [r0+32767]
stx8 [r10-32768], r0
jeq r10, r1, +32767
and r1, -0x100
or r2, 255
mul r3, r3
exit"""


def test_fifty_line_corpus_round_trips_line_by_line():
    lines = CORPUS.splitlines()
    assert len(lines) == 50
    prog = assemble(CORPUS)
    assert disassemble(prog).splitlines() == lines


def test_round_trip_modulo_whitespace():
    messy = "  JGE   r5 ,r6,   +2 \n\tEXIT"
    assert disassemble(assemble(messy)) == "jge r5, r6, +2\nexit"


def test_bundled_programs_round_trip():
    for name in ("byte-counter", "cve-2020-27194", "cve-2022-23222", "cve-2021-34866",
                 "intra-attacker", "intra-victim", "dpa-probe", "tracepoint-sum"):
        prog = load_program(name)
        assert assemble(disassemble(prog), name=name) == prog


def test_cve_2020_27194_listing_follows_the_snippet_order():
    listing = disassemble(load_program("cve-2020-27194")).splitlines()
    snippet = [
        r"ldx8 r5, \[r1\+8\]",       # r5 = <bad addr>
        r"mov r6, 0x600000002",      # r6 = 0x600000002
        r"jge r5, r6, \+\d+",        # if (r5 >= r6 ||
        r"jle r5, 0, \+\d+",         #     r5 <= 0) exit
        r"or r5, 0",                 # r5 = r5 | 0
        r"st8 \[r5-16\], 0xbad",     # *(ptr + r5) = 0xbad
    ]
    pos = [next(i for i, line in enumerate(listing) if re.fullmatch(pat, line))
           for pat in snippet]
    assert pos == sorted(pos)


# -- no control-register writes -----------------------------------------------


def test_no_opcode_can_write_a_control_register():
    vocabulary = {"gpr", "memory", "pc"}
    for op in Opcode:
        assert op.effects <= vocabulary, op
    # nothing in the grammar names a control register either
    for word in ("pkrs", "cr3", "wrmsr", "mov_cr"):
        with pytest.raises(AsmError):
            assemble(f"{word} r0, 0")


def test_program_length_limit_is_enforced_by_the_verifier_not_the_parser():
    p = assemble("\n".join(["mov r0, 0"] * MAX_INSNS + ["exit"]))
    assert len(p) == MAX_INSNS + 1


def test_encode_is_eight_bytes():
    for insn in assemble(CORPUS).insns:
        assert len(insn.encode()) == 8
