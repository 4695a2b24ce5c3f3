"""Paged memory with protection keys, the PKRS register and a PCID-tagged TLB.

Every byte touched by the interpreter, the helpers or the runtime goes
through :meth:`Mmu.access`. A successful access is recorded in an audit
counter keyed by the acting party, which lets tests assert that BPF code
never reached a page outside its domain.
"""
from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping

PAGE_SIZE = 4096
PAGE_SHIFT = 12
N_KEYS = 16
VADDR_MAX = (1 << 48) - 1


class Access(Enum):
    READ = "R"
    WRITE = "W"
    EXEC = "X"


class Perm(IntEnum):
    """Two-bit per-key permission field: bit0 is AD, bit1 is WD."""

    AE = 0b00
    AD = 0b01
    WD = 0b10


class FaultKind(Enum):
    PAGE_FAULT = "PageFault"
    WRITE_PROT = "WriteProtFault"
    PK_ACCESS_DISABLED = "PkAccessDisabled"
    PK_WRITE_DISABLED = "PkWriteDisabled"
    EXEC_FAULT = "ExecFault"

    @property
    def is_pk(self) -> bool:
        return self in (FaultKind.PK_ACCESS_DISABLED, FaultKind.PK_WRITE_DISABLED)


class MemError(Exception):
    pass


class AlreadyMapped(MemError):
    pass


class NotMapped(MemError):
    pass


class WxViolation(MemError):
    pass


class UnknownAddressSpace(MemError):
    pass


class Fault(Exception):
    def __init__(self, kind: FaultKind, vaddr: int, pcid: int, access: Access,
                 key: int | None = None):
        self.kind = kind
        self.vaddr = vaddr
        self.pcid = pcid
        self.access = access
        self.key = key
        super().__init__(self.trace_line())

    def trace_line(self) -> str:
        return (f"FAULT kind={self.kind.value} pcid={self.pcid} "
                f"vaddr={self.vaddr:#x} access={self.access.value}")

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "vaddr": self.vaddr, "pcid": self.pcid,
                "access": self.access.value, "key": self.key}


def page_of(vaddr: int) -> int:
    return vaddr >> PAGE_SHIFT


def page_base(vaddr: int) -> int:
    return vaddr & ~(PAGE_SIZE - 1)


@dataclass(frozen=True)
class Pte:
    pfn: int
    present: bool = True
    writable: bool = False
    executable: bool = False
    key: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.key < N_KEYS:
            raise ValueError(f"protection key {self.key} does not fit 4 bits")
        if self.writable and self.executable:
            raise WxViolation(f"frame {self.pfn} mapped writable and executable")


@dataclass(frozen=True)
class Pkrs:
    """The supervisor protection-key rights register: 16 fields of 2 bits."""

    raw: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.raw <= 0xFFFF_FFFF:
            raise ValueError("PKRS is a 32-bit register")

    @classmethod
    def from_keys(cls, perms: Mapping[int, int], default: int = Perm.AD) -> Pkrs:
        raw = 0
        for key in range(N_KEYS):
            raw |= (perms.get(key, default) & 0b11) << (2 * key)
        return cls(raw)

    @classmethod
    def all_enabled(cls) -> Pkrs:
        return cls(0)

    @classmethod
    def all_disabled(cls) -> Pkrs:
        return cls.from_keys({}, default=Perm.AD)

    def bits(self, key: int) -> int:
        return (self.raw >> (2 * key)) & 0b11

    def with_key(self, key: int, bits: int) -> Pkrs:
        mask = 0b11 << (2 * key)
        return Pkrs((self.raw & ~mask) | ((bits & 0b11) << (2 * key)))

    def check(self, key: int, access: Access) -> FaultKind | None:
        """Key verdict for a data access; instruction fetch is never gated."""
        if access is Access.EXEC:
            return None
        bits = self.bits(key)
        if bits & Perm.AD:
            return FaultKind.PK_ACCESS_DISABLED
        if bits & Perm.WD and access is Access.WRITE:
            return FaultKind.PK_WRITE_DISABLED
        return None

    def __str__(self) -> str:
        return f"{self.raw:#010x}"


class PhysicalMemory:
    """Flat array of 4 KiB frames, allocated lazily. Frame 0 is reserved."""

    def __init__(self, n_frames: int = 1 << 20):
        self.n_frames = n_frames
        self._frames: dict[int, bytearray] = {}

    def frame(self, pfn: int) -> bytearray:
        if not 0 < pfn < self.n_frames:
            raise MemError(f"frame {pfn} is not addressable")
        buf = self._frames.get(pfn)
        if buf is None:
            buf = self._frames[pfn] = bytearray(PAGE_SIZE)
        return buf

    def zero(self, pfn: int) -> None:
        self.frame(pfn)[:] = bytes(PAGE_SIZE)


@dataclass
class AddressSpace:
    root: int
    pcid: int
    name: str = ""
    table: dict[int, Pte] = field(default_factory=dict)

    def lookup(self, vaddr: int) -> Pte | None:
        pte = self.table.get(page_of(vaddr))
        return pte if pte is not None and pte.present else None


@dataclass(frozen=True)
class TlbEntry:
    pcid: int
    vpn: int
    pfn: int
    writable: bool
    executable: bool
    key: int


class Tlb:
    """Bounded, PCID-tagged translation cache with FIFO replacement."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("TLB capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[int, int], TlbEntry] = OrderedDict()
        self.hits = 0
        self.fills = 0
        self.cross_pcid_hits = 0

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[TlbEntry]:
        return list(self._entries.values())

    def count(self, pcid: int) -> int:
        return sum(1 for (p, _) in self._entries if p == pcid)

    def lookup(self, pcid: int, vpn: int) -> TlbEntry | None:
        entry = self._entries.get((pcid, vpn))
        if entry is None:
            return None
        if entry.pcid != pcid:
            self.cross_pcid_hits += 1
        self.hits += 1
        return entry

    def fill(self, entry: TlbEntry) -> None:
        key = (entry.pcid, entry.vpn)
        self._entries.pop(key, None)
        while len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)
        self._entries[key] = entry
        self.fills += 1

    def evict(self, pcid: int, vpn: int) -> None:
        self._entries.pop((pcid, vpn), None)

    def flush_pcid(self, pcid: int) -> int:
        doomed = [k for k in self._entries if k[0] == pcid]
        for k in doomed:
            del self._entries[k]
        return len(doomed)


# Keys by trust domain.
KEY_KERNEL = 0
KEY_BPF = 1
KEY_SHARED = 2
KEY_CRITICAL = 3

ACTORS = ("kernel", "bpf", "helper", "irq")


def confinement_violation(actor: str, key: int, access: Access) -> bool:
    """Would this successful access by BPF code escape the BPF domain?"""
    if actor != "bpf":
        return False
    if access is Access.WRITE:
        return key != KEY_BPF
    if access is Access.READ:
        return key in (KEY_KERNEL, KEY_CRITICAL)
    return False


class Mmu:
    """One simulated CPU's view of memory: CR3, PKRS, the TLB and the tables."""

    def __init__(self, pcid_bits: int = 12, tlb_capacity: int = 256,
                 n_frames: int = 1 << 20):
        if not 1 <= pcid_bits <= 12:
            raise ValueError("pcid_bits must be within 1..12")
        self.pcid_bits = pcid_bits
        self.phys = PhysicalMemory(n_frames)
        self.tlb = Tlb(tlb_capacity)
        self.spaces: dict[int, AddressSpace] = {}
        self.active: AddressSpace | None = None
        self.pkrs = Pkrs.all_enabled()
        self.actor = "kernel"
        self.audit: Counter[tuple[str, int, str]] = Counter()
        self.fault_counts: Counter[str] = Counter()
        self.trace: list[str] = []
        self.rmap: dict[int, set[tuple[int, int]]] = {}
        self.pcid_owner: dict[int, int] = {}
        self.conflict_flushes = 0
        self._next_root = 1

    # -- address spaces and CR3 ------------------------------------------------

    def new_space(self, pcid: int, name: str = "") -> AddressSpace:
        if not 0 <= pcid < (1 << self.pcid_bits):
            raise ValueError(f"pcid {pcid} does not fit {self.pcid_bits} bits")
        space = AddressSpace(self._next_root, pcid, name)
        self.spaces[space.root] = space
        self._next_root += 1
        return space

    def write_cr3(self, root: int, pcid: int, noflush: bool) -> None:
        space = self.spaces.get(root)
        if space is None:
            raise UnknownAddressSpace(f"no address space with root {root}")
        if pcid != space.pcid:
            raise UnknownAddressSpace(f"space {root} is tagged pcid {space.pcid}, not {pcid}")
        if not noflush:
            self.tlb.flush_pcid(pcid)
        self.active = space
        self.pcid_owner[pcid] = root

    def switch_to(self, space: AddressSpace) -> bool:
        """Activate ``space``, flushing only when its PCID was last used by
        another space. Returns True when such a conflict flush happened."""
        owner = self.pcid_owner.get(space.pcid)
        conflict = owner is not None and owner != space.root
        if conflict:
            self.conflict_flushes += 1
        self.write_cr3(space.root, space.pcid, noflush=not conflict)
        return conflict

    def set_pkrs(self, new: Pkrs) -> Pkrs:
        old, self.pkrs = self.pkrs, new
        return old

    # -- page tables -----------------------------------------------------------

    def map_page(self, space: AddressSpace, vaddr: int, pfn: int, writable: bool = False,
                 executable: bool = False, key: int = 0) -> None:
        if vaddr % PAGE_SIZE or not 0 <= vaddr <= VADDR_MAX:
            raise MemError(f"vaddr {vaddr:#x} is not a page-aligned address")
        self.phys.frame(pfn)  # rejects the reserved frame 0
        vpn = page_of(vaddr)
        if vpn in space.table:
            raise AlreadyMapped(f"{vaddr:#x} already mapped in space {space.root}")
        space.table[vpn] = Pte(pfn, True, writable, executable, key)
        self.rmap.setdefault(pfn, set()).add((space.root, vpn))

    def unmap_page(self, space: AddressSpace, vaddr: int) -> None:
        vpn = page_of(vaddr)
        pte = space.table.pop(vpn, None)
        if pte is None:
            raise NotMapped(f"{vaddr:#x} not mapped in space {space.root}")
        self.rmap[pte.pfn].discard((space.root, vpn))
        self.tlb.evict(space.pcid, vpn)

    def mappings_of(self, pfn: int) -> set[tuple[int, int]]:
        return set(self.rmap.get(pfn, ()))

    # -- the access path -------------------------------------------------------

    def _translate(self, space: AddressSpace, vaddr: int, access: Access) -> TlbEntry:
        vpn = page_of(vaddr)
        # only the live CR3 is cached; other spaces get a plain table walk so
        # they cannot leave entries under a PCID another space owns
        cached = space is self.active
        entry = self.tlb.lookup(space.pcid, vpn) if cached else None
        if entry is None:
            pte = space.lookup(vaddr)
            if pte is None:
                raise Fault(FaultKind.PAGE_FAULT, vaddr, space.pcid, access)
            entry = TlbEntry(space.pcid, vpn, pte.pfn, pte.writable, pte.executable, pte.key)
            if cached:
                self.tlb.fill(entry)
        return entry

    def access(self, space: AddressSpace, pkrs: Pkrs, vaddr: int, length: int,
               access: Access, data: bytes | None = None) -> bytes:
        """Checked access within a single page. Writes return ``data``."""
        if length < 1:
            raise ValueError("access length must be at least 1")
        if page_of(vaddr) != page_of(vaddr + length - 1):
            raise ValueError("access crosses a page boundary; split it")
        if access is Access.WRITE and (data is None or len(data) != length):
            raise ValueError("write needs exactly `length` bytes of data")
        try:
            if not 0 <= vaddr <= VADDR_MAX:
                raise Fault(FaultKind.PAGE_FAULT, vaddr, space.pcid, access)
            entry = self._translate(space, vaddr, access)
            if access is Access.WRITE and not entry.writable:
                raise Fault(FaultKind.WRITE_PROT, vaddr, space.pcid, access, entry.key)
            if access is Access.EXEC and not entry.executable:
                raise Fault(FaultKind.EXEC_FAULT, vaddr, space.pcid, access, entry.key)
            pk = pkrs.check(entry.key, access)
            if pk is not None:
                raise Fault(pk, vaddr, space.pcid, access, entry.key)
        except Fault as f:
            self.fault_counts[f.kind.value] += 1
            self.trace.append(f.trace_line())
            raise
        self.audit[(self.actor, entry.key, access.value)] += 1
        frame = self.phys.frame(entry.pfn)
        off = vaddr % PAGE_SIZE
        if access is Access.WRITE:
            frame[off:off + length] = data
            return bytes(data)
        return bytes(frame[off:off + length])

    def _split(self, vaddr: int, length: int) -> Iterable[tuple[int, int, int]]:
        done = 0
        while done < length:
            addr = vaddr + done
            n = min(length - done, PAGE_SIZE - addr % PAGE_SIZE)
            yield addr, done, n
            done += n

    def read_in(self, space: AddressSpace, pkrs: Pkrs, vaddr: int, length: int) -> bytes:
        out = bytearray()
        for addr, _, n in self._split(vaddr, length):
            out += self.access(space, pkrs, addr, n, Access.READ)
        return bytes(out)

    def write_in(self, space: AddressSpace, pkrs: Pkrs, vaddr: int, data: bytes) -> None:
        for addr, done, n in self._split(vaddr, len(data)):
            self.access(space, pkrs, addr, n, Access.WRITE, data[done:done + n])

    def read(self, vaddr: int, length: int) -> bytes:
        """Read through the active space under the live PKRS."""
        return self.read_in(self.active, self.pkrs, vaddr, length)

    def write(self, vaddr: int, data: bytes) -> None:
        self.write_in(self.active, self.pkrs, vaddr, data)

    def fetch(self, vaddr: int) -> None:
        self.access(self.active, self.pkrs, vaddr, 1, Access.EXEC)

    def read_u64(self, vaddr: int) -> int:
        return int.from_bytes(self.read(vaddr, 8), "little")

    def write_u64(self, vaddr: int, value: int) -> None:
        self.write(vaddr, (value & (1 << 64) - 1).to_bytes(8, "little"))

    def confinement_violations(self) -> int:
        return sum(n for (actor, key, acc), n in self.audit.items()
                   if confinement_violation(actor, key, Access(acc)))
