"""Helper functions callable from BPF programs and the maps they operate on.

Each helper has a signature: the kind of every argument and, for scalar
arguments, the range of values it expects. The verifier checks calls
against the signature and the runtime guards call sites with the ranges
the verifier deduced.

Helper bodies never see frames or page tables. They get a
:class:`HelperEnv` whose ``read``/``write`` go through the checked MMU
path under whatever PKRS the runtime installed for helper mode.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol

from .isa import MapDecl, MapKind
from .mem import PAGE_SIZE
from .ranges import U32_MAX, ValueRange


class HelperError(Exception):
    pass


class UnknownHelper(HelperError):
    pass


class OutOfRange(HelperError):
    pass


class SignatureError(HelperError):
    pass


class ArgKind(Enum):
    SCALAR = "scalar"
    MAP = "map"  # fd of a declared map, passed as a constant scalar
    STACK_BUF = "stack_buf"  # pointer to a stack buffer
    CTX = "ctx"
    RINGBUF_MEM = "ringbuf_mem"  # non-null ringbuf reservation


class RetKind(Enum):
    SCALAR = "scalar"
    MEM_OR_NULL = "mem_or_null"


@dataclass(frozen=True)
class ArgSpec:
    kind: ArgKind
    expect: ValueRange | None = None
    map_kind: MapKind | None = None
    # STACK_BUF size: "value_size" of the map in arg 0, or the index of a
    # scalar argument whose upper bound gives the length
    size_from: str | int | None = None


@dataclass(frozen=True)
class RetSpec:
    kind: RetKind
    range: ValueRange | None = None
    # MEM_OR_NULL size: "value_size" of the map in arg 0, or a scalar arg index
    size_from: str | int | None = None


class Accessor(Protocol):
    def read(self, vaddr: int, length: int) -> bytes: ...
    def write(self, vaddr: int, data: bytes) -> None: ...


@dataclass
class KernelLayout:
    """Fixed kernel addresses a helper may legitimately touch."""

    scratch: int
    scratch_len: int
    sentinel: int


@dataclass
class HelperEnv:
    mem: Accessor
    maps: list[MapObject]
    kernel: KernelLayout
    defective: frozenset[str] = frozenset()

    def read(self, vaddr: int, length: int) -> bytes:
        return self.mem.read(vaddr, length)

    def write(self, vaddr: int, data: bytes) -> None:
        self.mem.write(vaddr, data)

    def read_u64(self, vaddr: int) -> int:
        return int.from_bytes(self.read(vaddr, 8), "little")

    def write_u64(self, vaddr: int, value: int) -> None:
        self.write(vaddr, (value & (1 << 64) - 1).to_bytes(8, "little"))

    def map(self, fd: int) -> MapObject | None:
        return self.maps[fd] if 0 <= fd < len(self.maps) else None


Body = Callable[[HelperEnv, list[int]], int]


@dataclass(frozen=True)
class HelperSpec:
    name: str
    id: int
    args: tuple[ArgSpec, ...]
    ret: RetSpec
    body: Body = field(compare=False)

    def __post_init__(self) -> None:
        if len(self.args) > 5:
            raise SignatureError(f"{self.name}: at most 5 arguments")
        for i, a in enumerate(self.args):
            if a.kind is ArgKind.SCALAR and a.expect is None:
                raise SignatureError(f"{self.name}: scalar arg {i + 1} has no expected range")
            if a.kind is ArgKind.MAP and a.map_kind is None:
                raise SignatureError(f"{self.name}: map arg {i + 1} has no map kind")


# -- maps ---------------------------------------------------------------------

META_MAGIC = 0x4F50_535F_4D41_5053  # "SPAM_SPO" little-endian, easy to spot in dumps
META_FMT = "<QQIII"


def data_pages(decl: MapDecl) -> int:
    return -(-data_bytes(decl) // PAGE_SIZE)


def data_bytes(decl: MapDecl) -> int:
    extra = RING_HDR if decl.kind is MapKind.RINGBUF else 0
    return decl.byte_size + extra


def metadata_record(decl: MapDecl, ops: int) -> bytes:
    kind = 0 if decl.kind is MapKind.ARRAY else 1
    return struct.pack(META_FMT, META_MAGIC, ops, decl.value_size, decl.n_entries, kind)


@dataclass
class MapObject:
    """A map bound into one program image; addresses only, no frames."""

    decl: MapDecl
    data: int  # vaddr of the first data page
    meta: int  # vaddr of the critical metadata page, right after the data

    @property
    def kind(self) -> MapKind:
        return self.decl.kind

    @property
    def data_end(self) -> int:
        return self.data + data_pages(self.decl) * PAGE_SIZE


class ArrayMap(MapObject):
    def elem(self, index: int) -> int:
        if not 0 <= index < self.decl.n_entries:
            raise OutOfRange(f"index {index} outside {self.decl.n_entries} entries")
        return self.data + index * self.decl.value_size

    def lookup(self, index: int) -> int:
        """Address of element ``index``, or 0 when it does not exist."""
        try:
            return self.elem(index)
        except OutOfRange:
            return 0

    def update(self, env: HelperEnv, index: int, value: bytes) -> None:
        if len(value) != self.decl.value_size:
            raise OutOfRange("value does not match the map's value size")
        env.write(self.elem(index), value)

    def delete(self, env: HelperEnv, index: int) -> None:
        env.write(self.elem(index), bytes(self.decl.value_size))

    def get(self, env: HelperEnv, index: int) -> bytes:
        return env.read(self.elem(index), self.decl.value_size)


RING_HDR = 16  # consumer and producer positions
REC_HDR = 8
REC_BUSY = 1 << 32
REC_PAD = 1 << 33


class RingbufMap(MapObject):
    """Single-producer ring: [0:8] consumer, [8:16] producer, then the ring.

    Each record is an 8-byte header (length, busy bit, pad bit) followed by
    the payload rounded up to 8 bytes. A record never wraps; the tail of
    the ring is padded instead.
    """

    @property
    def capacity(self) -> int:
        return self.decl.byte_size // 8 * 8

    @property
    def ring(self) -> int:
        return self.data + RING_HDR

    def _pos(self, env: HelperEnv) -> tuple[int, int]:
        return env.read_u64(self.data), env.read_u64(self.data + 8)

    def reserve(self, env: HelperEnv, size: int) -> int:
        if size + REC_HDR > self.capacity:
            return 0
        need = REC_HDR + (-(-size // 8) * 8)
        cons, prod = self._pos(env)
        free = self.capacity - (prod - cons)
        off = prod % self.capacity
        pad = self.capacity - off if off + need > self.capacity else 0
        if need + pad > free:
            return 0
        if pad:
            env.write_u64(self.ring + off, pad - REC_HDR | REC_PAD)
            prod += pad
            off = 0
        env.write_u64(self.ring + off, size | REC_BUSY)
        env.write_u64(self.data + 8, prod + need)
        return self.ring + off + REC_HDR

    def owns(self, addr: int) -> bool:
        return self.ring + REC_HDR <= addr < self.ring + self.capacity

    def submit(self, env: HelperEnv, addr: int) -> None:
        if not self.owns(addr):
            raise OutOfRange(f"{addr:#x} is not a reservation of this ring")
        hdr = env.read_u64(addr - REC_HDR)
        env.write_u64(addr - REC_HDR, hdr & ~REC_BUSY)

    def drain(self, env: HelperEnv) -> list[bytes]:
        """Consume committed records in order, stopping at a busy one."""
        out = []
        cons, prod = self._pos(env)
        while cons < prod:
            off = cons % self.capacity
            hdr = env.read_u64(self.ring + off)
            if hdr & REC_BUSY:
                break
            length = hdr & U32_MAX
            if not hdr & REC_PAD:
                out.append(env.read(self.ring + off + REC_HDR, length))
            cons += REC_HDR + -(-length // 8) * 8
        env.write_u64(self.data, cons)
        return out


def bind_map(decl: MapDecl, data: int, meta: int) -> MapObject:
    cls = ArrayMap if decl.kind is MapKind.ARRAY else RingbufMap
    return cls(decl, data, meta)


# -- socket context -----------------------------------------------------------

SKB_LEN_OFF = 0
SKB_DATA_OFF = 8
SKB_MAX_DATA = PAGE_SIZE - SKB_DATA_OFF


def skb_load(env: HelperEnv, ctx: int, offset: int, length: int) -> bytes:
    pkt_len = int.from_bytes(env.read(ctx + SKB_LEN_OFF, 4), "little")
    if offset < 0 or length < 0 or offset + length > pkt_len:
        raise OutOfRange(f"[{offset}, {offset + length}) beyond a {pkt_len}-byte packet")
    return env.read(ctx + SKB_DATA_OFF + offset, length)


# -- bodies -------------------------------------------------------------------


def _array(env: HelperEnv, fd: int) -> ArrayMap | None:
    m = env.map(fd)
    return m if isinstance(m, ArrayMap) else None


def _map_lookup(env: HelperEnv, args: list[int]) -> int:
    m = _array(env, args[0])
    return m.lookup(args[1]) if m else 0


def _map_update(env: HelperEnv, args: list[int]) -> int:
    m = _array(env, args[0])
    if m is None:
        return 1
    try:
        value = env.read(args[2], m.decl.value_size)
        m.update(env, args[1], value)
    except OutOfRange:
        return 1
    return 0


def _map_delete(env: HelperEnv, args: list[int]) -> int:
    m = _array(env, args[0])
    if m is None:
        return 1
    try:
        m.delete(env, args[1])
    except OutOfRange:
        return 1
    return 0


def _ringbuf_reserve(env: HelperEnv, args: list[int]) -> int:
    m = env.map(args[0])
    if isinstance(m, RingbufMap):
        return m.reserve(env, args[1])
    if m is not None and "ringbuf_reserve" in env.defective:
        # Treats any map as a ring: producer bookkeeping lands on the word
        # right past the data, then the "ring ops" word is handed back.
        env.write_u64(m.data_end, args[1])
        return env.read_u64(m.meta + 8)
    return 0


def _ringbuf_submit(env: HelperEnv, args: list[int]) -> int:
    for m in env.maps:
        if isinstance(m, RingbufMap) and m.owns(args[0]):
            m.submit(env, args[0])
            return 0
    return 1


def _skb_load(env: HelperEnv, args: list[int]) -> int:
    ctx, offset, dst, length = args[:4]
    try:
        data = skb_load(env, ctx, offset, length)
    except OutOfRange:
        return 1
    if data:
        env.write(dst, data)
    return 0


def _scratch_write(env: HelperEnv, args: list[int]) -> int:
    env.write(env.kernel.scratch + args[0], bytes([args[1] & 0xFF]))
    return 0


BOOL = ValueRange.of(0, 1)
ZERO = ValueRange.const(0)
KEY32 = ValueRange.of(0, U32_MAX)
INT_MAX = 0x7FFF_FFFF


def _specs() -> list[HelperSpec]:
    amap = ArgSpec(ArgKind.MAP, map_kind=MapKind.ARRAY)
    key = ArgSpec(ArgKind.SCALAR, KEY32)
    return [
        HelperSpec("map_lookup", 1, (amap, key),
                   RetSpec(RetKind.MEM_OR_NULL, size_from="value_size"), _map_lookup),
        HelperSpec("map_update", 2,
                   (amap, key, ArgSpec(ArgKind.STACK_BUF, size_from="value_size")),
                   RetSpec(RetKind.SCALAR, BOOL), _map_update),
        HelperSpec("map_delete", 3, (amap, key), RetSpec(RetKind.SCALAR, BOOL), _map_delete),
        HelperSpec("ringbuf_reserve", 4,
                   (ArgSpec(ArgKind.MAP, map_kind=MapKind.RINGBUF),
                    ArgSpec(ArgKind.SCALAR, ValueRange.of(0, INT_MAX)),
                    ArgSpec(ArgKind.SCALAR, ZERO)),
                   RetSpec(RetKind.MEM_OR_NULL, size_from=1), _ringbuf_reserve),
        HelperSpec("ringbuf_submit", 5,
                   (ArgSpec(ArgKind.RINGBUF_MEM), ArgSpec(ArgKind.SCALAR, ZERO)),
                   RetSpec(RetKind.SCALAR, BOOL), _ringbuf_submit),
        HelperSpec("skb_load", 6,
                   (ArgSpec(ArgKind.CTX), ArgSpec(ArgKind.SCALAR, ValueRange.of(0, 0xFFFF)),
                    ArgSpec(ArgKind.STACK_BUF, size_from=3),
                    ArgSpec(ArgKind.SCALAR, ValueRange.of(0, 512))),
                   RetSpec(RetKind.SCALAR, BOOL), _skb_load),
        HelperSpec("scratch_write", 7,
                   (ArgSpec(ArgKind.SCALAR, ValueRange.of(0, 0x20)),
                    ArgSpec(ArgKind.SCALAR, ValueRange.of(0, 0xFF))),
                   RetSpec(RetKind.SCALAR, ZERO), _scratch_write),
    ]


class HelperRegistry:
    def __init__(self, specs: list[HelperSpec]):
        self._by_name: dict[str, HelperSpec] = {}
        self._by_id: dict[int, HelperSpec] = {}
        for s in specs:
            if s.name in self._by_name or s.id in self._by_id:
                raise SignatureError(f"duplicate helper {s.name}/{s.id}")
            self._by_name[s.name] = s
            self._by_id[s.id] = s

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self._by_name.values())

    def get(self, name_or_id: str | int) -> HelperSpec:
        table = self._by_id if isinstance(name_or_id, int) else self._by_name
        try:
            return table[name_or_id]
        except KeyError:
            raise UnknownHelper(f"no helper {name_or_id!r}") from None

    def with_override(self, name: str, arg: int, expect: ValueRange) -> HelperRegistry:
        """Copy of the registry with one argument's expected range replaced.

        Models a helper whose declared signature is wrong about what it can
        safely accept.
        """
        spec = self.get(name)
        args = list(spec.args)
        args[arg] = replace(args[arg], expect=expect)
        return HelperRegistry([replace(spec, args=tuple(args)) if s.name == name else s
                               for s in self])


_DEFAULT = HelperRegistry(_specs())


def default_registry() -> HelperRegistry:
    return _DEFAULT
