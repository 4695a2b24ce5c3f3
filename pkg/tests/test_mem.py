from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpfiso.mem import (
    N_KEYS, PAGE_SIZE, Access, AlreadyMapped, Fault, FaultKind, Mmu, NotMapped, Perm, Pkrs,
    Pte, UnknownAddressSpace, WxViolation,
)

from fuzz import run_tlb_sequences
from oracles import pk_verdict, pkrs_raw

BASE = 0x1000_0000


def fresh(pcid_bits: int = 12, **kw) -> tuple[Mmu, object]:
    mmu = Mmu(pcid_bits, **kw)
    space = mmu.new_space(1, "t")
    mmu.switch_to(space)
    return mmu, space


def verdict(mmu, space, pkrs, vaddr, access, data=None):
    try:
        mmu.access(space, pkrs, vaddr, 1 if data is None else len(data), access, data)
    except Fault as f:
        return f.kind
    return None


# -- key checks ----------------------------------------------------------------


def truth_table_rows():
    for key in range(N_KEYS):
        for bits in range(4):
            for write in (False, True):
                yield key, bits, write


def test_pk_truth_table_matches_oracle():
    rows = list(truth_table_rows())
    assert len(rows) == 128
    mmu, space = fresh()
    for key in range(N_KEYS):
        mmu.map_page(space, BASE + key * PAGE_SIZE, 10 + key, writable=True, key=key)
    mismatches = []
    for key, bits, write in rows:
        # the probed key gets `bits`; every other key is left AE
        pkrs = Pkrs(pkrs_raw({key: bits}))
        got = verdict(mmu, space, pkrs, BASE + key * PAGE_SIZE,
                      Access.WRITE if write else Access.READ, b"\x01" if write else None)
        want = pk_verdict(bits, write)
        if (got.name if got else None) != (None if want is None else
                                           {"PkAccessDisabled": "PK_ACCESS_DISABLED",
                                            "PkWriteDisabled": "PK_WRITE_DISABLED"}[want]):
            mismatches.append((key, bits, write, got, want))
    assert mismatches == []


def test_fault_kind_values_match_oracle_names():
    assert FaultKind.PK_ACCESS_DISABLED.value == "PkAccessDisabled"
    assert FaultKind.PK_WRITE_DISABLED.value == "PkWriteDisabled"


def test_pkrs_toggle_grants_and_revokes():
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, writable=True, key=1)
    mmu.set_pkrs(Pkrs.from_keys({1: Perm.AE}))
    mmu.write(BASE, b"x")
    old = mmu.set_pkrs(Pkrs.from_keys({1: Perm.AD}))
    with pytest.raises(Fault) as info:
        mmu.read(BASE, 1)
    assert info.value.kind is FaultKind.PK_ACCESS_DISABLED
    assert mmu.set_pkrs(old).bits(1) == Perm.AD
    assert mmu.read(BASE, 1) == b"x"


def test_wd_allows_reads_only():
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, writable=True, key=2)
    mmu.set_pkrs(Pkrs.from_keys({2: Perm.WD}, default=Perm.AE))
    assert mmu.read(BASE, 4) == bytes(4)
    with pytest.raises(Fault) as info:
        mmu.write(BASE, b"z")
    assert info.value.kind is FaultKind.PK_WRITE_DISABLED


@given(st.integers(0, 0xFFFF_FFFF), st.integers(0, N_KEYS - 1))
def test_exec_is_never_key_gated(raw, key):
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, executable=True, key=key)
    assert verdict(mmu, space, Pkrs(raw), BASE, Access.EXEC) is None


def test_key_checks_come_after_base_permissions():
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, writable=False, key=3)
    mmu.map_page(space, BASE + PAGE_SIZE, 6, executable=True, key=3)
    ad = Pkrs.all_disabled()
    ae = Pkrs.all_enabled()
    # read-only page under AE: write-protection fault, not a key fault
    assert verdict(mmu, space, ae, BASE, Access.WRITE, b"1") is FaultKind.WRITE_PROT
    # and the same under AD: base permissions still win
    assert verdict(mmu, space, ad, BASE, Access.WRITE, b"1") is FaultKind.WRITE_PROT
    assert verdict(mmu, space, ad, BASE, Access.EXEC) is FaultKind.EXEC_FAULT
    assert verdict(mmu, space, ad, BASE + PAGE_SIZE, Access.EXEC) is None
    assert verdict(mmu, space, ad, 0x7777_0000, Access.READ) is FaultKind.PAGE_FAULT


def test_faults_are_recorded():
    mmu, space = fresh()
    with pytest.raises(Fault):
        mmu.read(BASE, 1)
    assert mmu.fault_counts["PageFault"] == 1
    assert mmu.trace[-1] == f"FAULT kind=PageFault pcid=1 vaddr={BASE:#x} access=R"


# -- page tables ---------------------------------------------------------------


def test_wx_exclusive():
    with pytest.raises(WxViolation):
        Pte(5, True, True, True, 0)
    mmu, space = fresh()
    with pytest.raises(WxViolation):
        mmu.map_page(space, BASE, 5, writable=True, executable=True)


def test_map_unmap_lifecycle():
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, writable=True, key=1)
    with pytest.raises(AlreadyMapped):
        mmu.map_page(space, BASE, 6)
    mmu.write(BASE, b"hi")
    assert mmu.mappings_of(5) == {(space.root, BASE // PAGE_SIZE)}
    mmu.unmap_page(space, BASE)
    assert mmu.mappings_of(5) == set()
    # the TLB must not keep serving the old translation
    with pytest.raises(Fault) as info:
        mmu.read(BASE, 1)
    assert info.value.kind is FaultKind.PAGE_FAULT
    with pytest.raises(NotMapped):
        mmu.unmap_page(space, BASE)


def test_reads_split_across_pages():
    mmu, space = fresh()
    mmu.map_page(space, BASE, 5, writable=True)
    mmu.map_page(space, BASE + PAGE_SIZE, 6, writable=True)
    mmu.write(BASE + PAGE_SIZE - 2, b"abcd")
    assert mmu.read(BASE + PAGE_SIZE - 2, 4) == b"abcd"
    with pytest.raises(ValueError):
        mmu.access(space, mmu.pkrs, BASE + PAGE_SIZE - 2, 4, Access.READ)


def test_write_cr3_semantics():
    mmu = Mmu(12)
    a, b = mmu.new_space(3, "a"), mmu.new_space(4, "b")
    for s, pfn in ((a, 10), (b, 11)):
        mmu.map_page(s, BASE, pfn, writable=True)
        mmu.write_cr3(s.root, s.pcid, noflush=False)
        mmu.read(BASE, 1)
    assert mmu.tlb.count(3) == 1 and mmu.tlb.count(4) == 1
    before = mmu.tlb.entries()
    mmu.write_cr3(a.root, 3, noflush=True)
    assert mmu.tlb.entries() == before
    mmu.write_cr3(a.root, 3, noflush=False)
    assert mmu.tlb.count(3) == 0 and mmu.tlb.count(4) == 1
    with pytest.raises(UnknownAddressSpace):
        mmu.write_cr3(999, 3, noflush=True)
    with pytest.raises(UnknownAddressSpace):
        mmu.write_cr3(a.root, 4, noflush=True)


def test_conflicting_pcids_flush_on_switch():
    mmu = Mmu(1)
    a, b = mmu.new_space(1, "a"), mmu.new_space(1, "b")
    mmu.map_page(a, BASE, 10, writable=True)
    mmu.map_page(b, BASE, 11, writable=True)
    mmu.write_in(a, Pkrs(), BASE, b"A")
    mmu.write_in(b, Pkrs(), BASE, b"B")
    assert mmu.switch_to(a) is False  # first owner of pcid 1
    assert mmu.read(BASE, 1) == b"A"
    assert mmu.switch_to(b) is True
    assert mmu.read(BASE, 1) == b"B"
    assert mmu.switch_to(b) is False
    assert mmu.conflict_flushes == 1
    assert mmu.tlb.cross_pcid_hits == 0


def test_pcid_must_fit():
    with pytest.raises(ValueError):
        Mmu(2).new_space(4)


def test_tlb_capacity_evicts_fifo():
    mmu, space = fresh(tlb_capacity=4)
    for i in range(6):
        mmu.map_page(space, BASE + i * PAGE_SIZE, 10 + i)
        mmu.read(BASE + i * PAGE_SIZE, 1)
    assert len(mmu.tlb) == 4
    assert {e.vpn for e in mmu.tlb.entries()} == {BASE // PAGE_SIZE + i for i in range(2, 6)}


# -- randomized TLB sequences --------------------------------------------------

def test_tlb_sequences_small_sample():
    total = run_tlb_sequences(500, seed=1)
    assert total["wrong"] == 0
    assert total["cross"] == 0
    assert total["flush_bad"] == 0
    assert total["conflicts"] > 0
