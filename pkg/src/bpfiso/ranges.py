"""Unsigned interval domain used by the verifier's register tracking.

A :class:`ValueRange` carries 64-bit unsigned bounds plus the 32-bit
subregister bounds. Ranges never wrap: any operation whose result could
wrap is widened to the full range instead.
"""
from __future__ import annotations

from dataclasses import dataclass

U64_MAX = (1 << 64) - 1
U32_MAX = (1 << 32) - 1


def _u32_of(lo: int, hi: int) -> tuple[int, int]:
    if lo >> 32 == hi >> 32:
        return lo & U32_MAX, hi & U32_MAX
    return 0, U32_MAX


@dataclass(frozen=True)
class ValueRange:
    umin: int
    umax: int
    u32min: int
    u32max: int

    def __post_init__(self) -> None:
        if not 0 <= self.umin <= self.umax <= U64_MAX:
            raise ValueError(f"bad 64-bit bounds [{self.umin:#x}, {self.umax:#x}]")
        if not 0 <= self.u32min <= self.u32max <= U32_MAX:
            raise ValueError(f"bad 32-bit bounds [{self.u32min:#x}, {self.u32max:#x}]")

    @classmethod
    def of(cls, lo: int, hi: int | None = None) -> ValueRange:
        """Range from 64-bit bounds; the 32-bit bounds are derived."""
        hi = lo if hi is None else hi
        return cls(lo, hi, *_u32_of(lo, hi))

    @classmethod
    def const(cls, value: int) -> ValueRange:
        return cls.of(value & U64_MAX)

    @classmethod
    def full(cls) -> ValueRange:
        return cls(0, U64_MAX, 0, U32_MAX)

    @classmethod
    def zext32(cls, lo: int, hi: int) -> ValueRange:
        """Result of a 32-bit op: zero-extended into the 64-bit register."""
        return cls(lo, hi, lo, hi)

    @classmethod
    def of_width(cls, nbytes: int) -> ValueRange:
        return cls.of(0, (1 << (8 * nbytes)) - 1)

    @property
    def is_const(self) -> bool:
        return self.umin == self.umax

    @property
    def is_full(self) -> bool:
        return self.umin == 0 and self.umax == U64_MAX

    def __contains__(self, value: int) -> bool:
        return self.umin <= value <= self.umax

    def subrange_of(self, other: ValueRange) -> bool:
        return other.umin <= self.umin and self.umax <= other.umax

    def join(self, other: ValueRange) -> ValueRange:
        return ValueRange(
            min(self.umin, other.umin),
            max(self.umax, other.umax),
            min(self.u32min, other.u32min),
            max(self.u32max, other.u32max),
        )

    def meet(self, lo: int, hi: int) -> ValueRange | None:
        """Intersect the 64-bit bounds with [lo, hi]; None if empty."""
        lo, hi = max(self.umin, lo), min(self.umax, hi)
        if lo > hi:
            return None
        return ValueRange.of(lo, hi)

    def sub32(self) -> tuple[int, int]:
        """Bounds of the low 32 bits as seen by a 32-bit instruction."""
        return _u32_of(self.umin, self.umax)

    def __str__(self) -> str:
        if self.is_const:
            return f"{self.umin:#x}"
        return f"[{self.umin:#x}, {self.umax:#x}]"


def _all_ones_upto(value: int) -> int:
    return (1 << value.bit_length()) - 1


# -- sound transfer functions -------------------------------------------------


def add(a: ValueRange, b: ValueRange) -> ValueRange:
    if a.umax + b.umax > U64_MAX:
        return ValueRange.full()
    return ValueRange.of(a.umin + b.umin, a.umax + b.umax)


def sub(a: ValueRange, b: ValueRange) -> ValueRange:
    if a.umin < b.umax:
        return ValueRange.full()
    return ValueRange.of(a.umin - b.umax, a.umax - b.umin)


def mul(a: ValueRange, b: ValueRange) -> ValueRange:
    if a.umax * b.umax > U64_MAX:
        return ValueRange.full()
    return ValueRange.of(a.umin * b.umin, a.umax * b.umax)


def and_(a: ValueRange, b: ValueRange) -> ValueRange:
    if a.is_const and b.is_const:
        return ValueRange.const(a.umin & b.umin)
    return ValueRange.of(0, min(a.umax, b.umax))


def or_(a: ValueRange, b: ValueRange) -> ValueRange:
    if a.is_const and b.is_const:
        return ValueRange.const(a.umin | b.umin)
    return ValueRange.of(max(a.umin, b.umin), _all_ones_upto(a.umax | b.umax))


def lsh(a: ValueRange, b: ValueRange) -> ValueRange:
    if not b.is_const:
        return ValueRange.full()
    k = b.umin & 63
    if a.umax << k > U64_MAX:
        return ValueRange.full()
    return ValueRange.of(a.umin << k, a.umax << k)


def rsh(a: ValueRange, b: ValueRange) -> ValueRange:
    if b.umax > 63:
        # shift amounts are masked to 6 bits at runtime
        return ValueRange.of(0, a.umax)
    return ValueRange.of(a.umin >> b.umax, a.umax >> b.umin)


def mov32(a: ValueRange) -> ValueRange:
    return ValueRange.zext32(*a.sub32())


def or32(a: ValueRange, b: ValueRange) -> ValueRange:
    alo, ahi = a.sub32()
    blo, bhi = b.sub32()
    if alo == ahi and blo == bhi:
        v = alo | blo
        return ValueRange.zext32(v, v)
    return ValueRange.zext32(max(alo, blo), _all_ones_upto(ahi | bhi))


def mod32(a: ValueRange, b: ValueRange) -> ValueRange:
    alo, ahi = a.sub32()
    blo, bhi = b.sub32()
    if blo == bhi and blo != 0:
        if ahi < blo:
            return ValueRange.zext32(alo, ahi)
        return ValueRange.zext32(0, min(blo - 1, ahi))
    if blo > 0:
        return ValueRange.zext32(0, min(bhi - 1, ahi))
    # divisor may be zero, which leaves the 32-bit dst unchanged
    return ValueRange.zext32(0, ahi)


# -- the truncating OR of the injected verifier defect ------------------------


def spans_32bit_boundary(a: ValueRange) -> bool:
    return a.umin >> 32 != a.umax >> 32


def or_truncating(a: ValueRange, b: ValueRange) -> ValueRange:
    """OR whose bounds are computed on the truncated 32-bit halves.

    When the operand straddles a 32-bit boundary the low halves of umin and
    umax are taken as if they bounded the value, collapsing the result to a
    point at ``(umin & 0xffffffff) | b``.
    """
    if not spans_32bit_boundary(a) or not b.is_const:
        return or_(a, b)
    v = (a.umin & U32_MAX) | b.umin
    return ValueRange.const(v)


def or32_truncating(a: ValueRange, b: ValueRange) -> ValueRange:
    if not spans_32bit_boundary(a) or not b.is_const:
        return or32(a, b)
    v = ((a.umin & U32_MAX) | b.umin) & U32_MAX
    return ValueRange.zext32(v, v)
