from __future__ import annotations

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpfiso.helpers import (
    META_FMT, META_MAGIC, ArgKind, ArgSpec, ArrayMap, HelperSpec, OutOfRange, RetKind, RetSpec,
    RingbufMap, SignatureError, UnknownHelper, default_registry, skb_load,
)
from bpfiso.isa import MapDecl, MapKind, assemble
from bpfiso.ranges import ValueRange
from bpfiso.runtime import Machine, ProtectionConfig
from bpfiso.scenarios import ipv4_packet

from oracles import ArrayModel

REG = default_registry()


def machine_with(maps: str) -> tuple[Machine, object]:
    m = Machine(ProtectionConfig())
    image = m.load(assemble(f"{maps}\nmov r0, 0\nexit", name="maps"))
    return m, image


def call(env, name: str, *args: int) -> int:
    return REG.get(name).body(env, list(args))


# -- array maps ----------------------------------------------------------------


@pytest.mark.parametrize("vs, n", [(8, 4), (1, 3), (24, 10), (4096, 2), (100, 41)])
def test_lookup_stride(vs, n):
    m, image = machine_with(f".map a kind=array value_size={vs} entries={n}")
    with m.helper_context(image) as env:
        base = image.maps[0].data
        for i in range(n):
            assert call(env, "map_lookup", 0, i) == base + i * vs
        assert call(env, "map_lookup", 0, n) == 0
        assert call(env, "map_lookup", 0, 2**32 - 1) == 0
        assert call(env, "map_lookup", 7, 0) == 0  # no such fd


ops = st.lists(st.tuples(st.sampled_from(["update", "delete"]), st.integers(0, 5),
                         st.binary(min_size=8, max_size=8)), max_size=25)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_update_delete_match_model(seq):
    m, image = machine_with(".map a kind=array value_size=8 entries=4")
    model = ArrayModel(8, 4)
    with m.helper_context(image) as env:
        buf = image.stack  # value buffer on the program's stack
        for op, idx, val in seq:
            if op == "update":
                env.write(buf, val)
                rc = call(env, "map_update", 0, idx, buf)
                assert (rc == 0) == model.update(idx, val)
            else:
                rc = call(env, "map_delete", 0, idx)
                assert (rc == 0) == model.delete(idx)
        arr = image.maps[0]
        assert [arr.get(env, i) for i in range(4)] == model.values


def test_update_out_of_range_raises_at_the_object_level():
    m, image = machine_with(".map a kind=array value_size=8 entries=4")
    arr = image.maps[0]
    assert isinstance(arr, ArrayMap)
    with m.helper_context(image) as env:
        with pytest.raises(OutOfRange):
            arr.update(env, 4, bytes(8))
        with pytest.raises(OutOfRange):
            arr.update(env, 0, bytes(7))


# -- ring buffers --------------------------------------------------------------


def test_ringbuf_reserve_submit_drain():
    m, image = machine_with(".map rb kind=ringbuf value_size=8 entries=8")
    rb = image.maps[0]
    assert isinstance(rb, RingbufMap) and rb.capacity == 64
    with m.helper_context(image) as env:
        assert call(env, "ringbuf_reserve", 0, 0x7FFF_FFFF, 0) == 0
        assert call(env, "ringbuf_reserve", 0, 57, 0) == 0  # 57 + header > 64
        a = call(env, "ringbuf_reserve", 0, 5, 0)
        b = call(env, "ringbuf_reserve", 0, 8, 0)
        assert a and b and b == a + 16
        env.write(a, b"hello")
        env.write(b, b"worldxyz")
        # nothing is visible while the first record is still busy
        call(env, "ringbuf_submit", b, 0)
        assert rb.drain(env) == []
        call(env, "ringbuf_submit", a, 0)
        assert rb.drain(env) == [b"hello", b"worldxyz"]
        assert call(env, "ringbuf_submit", a + 1000, 0) == 1


def test_ringbuf_pads_instead_of_wrapping():
    m, image = machine_with(".map rb kind=ringbuf value_size=8 entries=8")
    rb = image.maps[0]
    with m.helper_context(image) as env:
        first = call(env, "ringbuf_reserve", 0, 32, 0)  # 40 of 64 bytes
        call(env, "ringbuf_submit", first, 0)
        assert rb.drain(env) == [bytes(32)]
        # 24 bytes left before the end; a 24-byte record needs 32, so it pads
        rec = call(env, "ringbuf_reserve", 0, 24, 0)
        assert rec == rb.ring + 8
        env.write(rec, b"z" * 24)
        call(env, "ringbuf_submit", rec, 0)
        assert rb.drain(env) == [b"z" * 24]


def test_reserve_on_an_array_returns_null_when_not_defective():
    m, image = machine_with(".map a kind=array value_size=8 entries=4")
    with m.helper_context(image) as env:
        assert call(env, "ringbuf_reserve", 0, 8, 0) == 0


# -- skb_load ------------------------------------------------------------------


@settings(max_examples=120, deadline=None)
@given(st.binary(max_size=200), st.integers(0, 260), st.integers(0, 260))
def test_skb_load_matches_direct_indexing(pkt, offset, length):
    m, image = machine_with("")
    m.stage_event(image, pkt)
    with m.helper_context(image) as env:
        if offset + length <= len(pkt):
            assert skb_load(env, image.ctx_addr, offset, length) == pkt[offset:offset + length]
        else:
            with pytest.raises(OutOfRange):
                skb_load(env, image.ctx_addr, offset, length)


def test_skb_load_examples():
    m, image = machine_with("")
    pkt = ipv4_packet(17, 4)
    m.stage_event(image, pkt)
    with m.helper_context(image) as env:
        assert skb_load(env, image.ctx_addr, 9, 1) == b"\x11"
        assert skb_load(env, image.ctx_addr, 0, 0) == b""
        assert call(env, "skb_load", image.ctx_addr, 9, image.stack, 1) == 0
        assert env.read(image.stack, 1) == b"\x11"
        assert call(env, "skb_load", image.ctx_addr, len(pkt), image.stack, 1) == 1


# -- signatures and registry ---------------------------------------------------


def _body(env, args):
    return 0


def test_signature_completeness_is_enforced():
    ret = RetSpec(RetKind.SCALAR, ValueRange.const(0))
    with pytest.raises(SignatureError):
        HelperSpec("h", 99, (ArgSpec(ArgKind.SCALAR),), ret, _body)
    with pytest.raises(SignatureError):
        HelperSpec("h", 99, (ArgSpec(ArgKind.MAP),), ret, _body)
    with pytest.raises(SignatureError):
        HelperSpec("h", 99, (ArgSpec(ArgKind.CTX),) * 6, ret, _body)
    for spec in REG:
        for a in spec.args:
            if a.kind is ArgKind.SCALAR:
                assert a.expect is not None


def test_registry_lookup_and_override():
    assert REG.get("map_lookup") is REG.get(1)
    with pytest.raises(UnknownHelper):
        REG.get("nope")
    with pytest.raises(UnknownHelper):
        REG.get(1000)
    loose = REG.with_override("scratch_write", 0, ValueRange.of(0, 0xBA))
    assert loose.get("scratch_write").args[0].expect == ValueRange.of(0, 0xBA)
    assert REG.get("scratch_write").args[0].expect == ValueRange.of(0, 0x20)


def test_helper_bodies_only_see_read_and_write():
    m, image = machine_with("")
    with m.helper_context(image) as env:
        assert not hasattr(env.mem, "mmu")
        assert {a for a in dir(env.mem) if not a.startswith("_")} == {"read", "write"}


def test_map_metadata_record():
    m, image = machine_with(".map a kind=array value_size=8 entries=4")
    obj = image.maps[0]
    raw = m.kread(obj.meta, struct.calcsize(META_FMT), image.space)
    magic, _ops, vs, n, kind = struct.unpack(META_FMT, raw)
    assert (magic, vs, n, kind) == (META_MAGIC, 8, 4, 0)
    assert obj.meta == obj.data_end
    assert MapDecl("a", MapKind.ARRAY, 8, 4).byte_size == 32
