"""BPF memory allocators: page pools, sub-page object pools and virtual
reservations, plus the frame allocator and per-program virtual windows
they draw from."""
from __future__ import annotations

from dataclasses import dataclass, field

from .mem import PAGE_SIZE, AddressSpace, MemError, Mmu, NotMapped

WINDOW_BASE = 0x4000_0000
WINDOW_SIZE = 16 << 20
MAX_WINDOWS = 960
OBJ_ALIGN = 8


class AllocError(Exception):
    pass


class OutOfFrames(AllocError):
    pass


class LayoutExhausted(AllocError):
    pass


class PoolFull(AllocError):
    pass


class BadFree(AllocError):
    pass


class OutOfRange(AllocError):
    pass


class AlreadyBacked(AllocError):
    pass


class FrameAllocator:
    """Hands out physical frames, remembering who owns each one."""

    def __init__(self, mmu: Mmu, first: int = 1, limit: int | None = None):
        self.mmu = mmu
        self.limit = mmu.phys.n_frames if limit is None else limit
        self._next = max(first, 1)
        self._free: list[int] = []
        self.owner: dict[int, str] = {}

    def alloc_run(self, owners: list[str]) -> list[int]:
        """Physically contiguous frames, one per entry of ``owners``."""
        n = len(owners)
        if n < 1:
            raise AllocError("must allocate at least one frame")
        if n == 1 and self._free:
            pfns = [self._free.pop()]
        else:
            if self._next + n > self.limit:
                raise OutOfFrames(f"no run of {n} free frames")
            pfns = list(range(self._next, self._next + n))
            self._next += n
        for pfn, who in zip(pfns, owners):
            self.owner[pfn] = who
            self.mmu.phys.zero(pfn)
        return pfns

    def alloc(self, n: int, owner: str) -> list[int]:
        return self.alloc_run([owner] * n)

    def free(self, pfn: int) -> None:
        if pfn not in self.owner:
            raise BadFree(f"frame {pfn} is not allocated")
        if self.mmu.mappings_of(pfn):
            raise AllocError(f"frame {pfn} is still mapped")
        del self.owner[pfn]
        self._free.append(pfn)

    def frames_of(self, owner: str) -> set[int]:
        return {p for p, o in self.owner.items() if o == owner}


@dataclass
class Window:
    """A program's private slice of the shared virtual space."""

    index: int
    cursor: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.index < MAX_WINDOWS:
            raise LayoutExhausted(f"no virtual window {self.index}")

    @property
    def base(self) -> int:
        return WINDOW_BASE + self.index * WINDOW_SIZE

    @property
    def end(self) -> int:
        return self.base + WINDOW_SIZE

    def reserve(self, n_pages: int) -> int:
        size = n_pages * PAGE_SIZE
        if self.cursor + size > WINDOW_SIZE:
            raise LayoutExhausted(f"window {self.index} is full")
        vaddr = self.base + self.cursor
        self.cursor += size
        return vaddr

    def __contains__(self, vaddr: int) -> bool:
        return self.base <= vaddr < self.end


@dataclass
class PagePool:
    mmu: Mmu
    space: AddressSpace
    window: Window
    frames: FrameAllocator
    owner: str
    key: int
    pages: list[tuple[int, int]] = field(default_factory=list)

    def alloc(self, n_pages: int, writable: bool = True) -> int:
        """Map ``n_pages`` fresh zeroed frames contiguously; returns the vaddr."""
        if n_pages < 1:
            raise AllocError("page_alloc needs at least one page")
        vaddr = self.window.reserve(n_pages)
        for i, pfn in enumerate(self.frames.alloc(n_pages, self.owner)):
            self.mmu.map_page(self.space, vaddr + i * PAGE_SIZE, pfn, writable=writable,
                              key=self.key)
            self.pages.append((vaddr + i * PAGE_SIZE, pfn))
        return vaddr


class ObjectPool:
    """First-fit sub-page allocator; objects never straddle a page."""

    def __init__(self, pages: PagePool, max_pages: int | None = None):
        self.pages = pages
        self.max_pages = max_pages
        self._pages: list[int] = []
        self.live: dict[int, int] = {}

    def _fit(self, page: int, size: int) -> int | None:
        spans = sorted((a - page, n) for a, n in self.live.items() if page <= a < page + PAGE_SIZE)
        cursor = 0
        for off, n in spans:
            if off - cursor >= size:
                return cursor
            cursor = max(cursor, -(-(off + n) // OBJ_ALIGN) * OBJ_ALIGN)
        return cursor if PAGE_SIZE - cursor >= size else None

    def alloc(self, size: int) -> int:
        if not 0 < size <= PAGE_SIZE:
            raise AllocError(f"object size {size} outside (0, {PAGE_SIZE}]")
        size = -(-size // OBJ_ALIGN) * OBJ_ALIGN
        for page in self._pages:
            off = self._fit(page, size)
            if off is not None:
                self.live[page + off] = size
                return page + off
        if self.max_pages is not None and len(self._pages) >= self.max_pages:
            raise PoolFull("object pool has no room left")
        try:
            page = self.pages.alloc(1)
        except (OutOfFrames, LayoutExhausted) as e:
            raise PoolFull(str(e)) from e
        self._pages.append(page)
        self.live[page] = size
        return page

    def free(self, addr: int) -> None:
        if addr not in self.live:
            raise BadFree(f"{addr:#x} is not a live object")
        del self.live[addr]


@dataclass
class VirtReservation:
    """Virtual pages held without backing; pages are mapped on demand."""

    mmu: Mmu
    space: AddressSpace
    vaddr: int
    n_pages: int
    backing: list[int | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.backing:
            self.backing = [None] * self.n_pages

    @classmethod
    def reserve(cls, mmu: Mmu, space: AddressSpace, window: Window, n_pages: int) -> VirtReservation:
        if n_pages < 1:
            raise AllocError("reservation needs at least one page")
        return cls(mmu, space, window.reserve(n_pages), n_pages)

    def page_addr(self, index: int) -> int:
        if not 0 <= index < self.n_pages:
            raise OutOfRange(f"page {index} outside a {self.n_pages}-page reservation")
        return self.vaddr + index * PAGE_SIZE

    def map(self, index: int, pfn: int, key: int, writable: bool) -> None:
        addr = self.page_addr(index)
        if self.backing[index] is not None:
            raise AlreadyBacked(f"reservation page {index} already backed")
        self.mmu.map_page(self.space, addr, pfn, writable=writable, key=key)
        self.backing[index] = pfn

    def unmap(self, index: int) -> None:
        addr = self.page_addr(index)
        if self.backing[index] is None:
            raise NotMapped(f"reservation page {index} is not backed")
        self.mmu.unmap_page(self.space, addr)
        self.backing[index] = None


__all__ = [
    "AllocError", "AlreadyBacked", "BadFree", "FrameAllocator", "LayoutExhausted",
    "MemError", "ObjectPool", "OutOfFrames", "OutOfRange", "PagePool", "PoolFull",
    "VirtReservation", "Window", "WINDOW_BASE", "WINDOW_SIZE", "MAX_WINDOWS",
]
