"""Memory-region access policies.

Script addresses are opaque 64-bit values. Each region maps a VM address
range onto a host buffer; every load and store the VM (or a host binding)
performs is resolved through a :class:`PolicyTable`. An access is allowed
only when its whole byte range sits inside one region that permits it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Union

__all__ = [
    "ADDRESS_LIMIT",
    "STACK_SIZE",
    "STACK_BASE",
    "AccessFlags",
    "AccessKind",
    "DenyReason",
    "Allowed",
    "Denied",
    "MemoryFault",
    "MemoryRegion",
    "PolicyError",
    "PolicyTable",
    "add_region",
    "check_access",
]

ADDRESS_LIMIT = 1 << 64
STACK_SIZE = 512
STACK_BASE = 0x0000_7FFF_0000_0000
# regions mapped without an explicit base are packed from here upwards
AUTO_BASE = 0x0000_0001_0000_0000
AUTO_ALIGN = 0x1_0000


class PolicyError(ValueError):
    """A region cannot be added to a policy table."""


@dataclass(frozen=True, slots=True)
class AccessFlags:
    readable: bool = True
    writable: bool = False

    @classmethod
    def parse(cls, text: str) -> "AccessFlags":
        """Parse ``r``, ``w`` or ``rw``."""
        text = text.lower()
        if not text or set(text) - {"r", "w"}:
            raise PolicyError(f"bad access flags {text!r}, expected r, w or rw")
        return cls("r" in text, "w" in text)

    def __str__(self) -> str:
        return ("r" if self.readable else "") + ("w" if self.writable else "")


READ_ONLY = AccessFlags(True, False)
READ_WRITE = AccessFlags(True, True)


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class DenyReason(enum.Enum):
    UNMAPPED = "Unmapped"
    WRITE_TO_READ_ONLY = "WriteToReadOnly"
    READ_FROM_WRITE_ONLY = "ReadFromWriteOnly"
    STRADDLES_REGIONS = "StraddlesRegions"
    OUT_OF_BOUNDS = "OutOfBounds"


@dataclass(frozen=True, slots=True)
class Allowed:
    region: "MemoryRegion"

    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True, slots=True)
class Denied:
    reason: DenyReason

    def __bool__(self) -> bool:
        return False


Access = Union[Allowed, Denied]


class MemoryFault(Exception):
    """A denied access raised on the execution path."""

    def __init__(self, addr: int, size: int, kind: AccessKind, reason: DenyReason):
        self.addr = addr
        self.size = size
        self.kind = kind
        self.reason = reason
        super().__init__(f"{kind.value} of {size} bytes at {addr:#x} denied: {reason.value}")


@dataclass(eq=False)
class MemoryRegion:
    """An address range with access flags, backed by a host buffer.

    ``buffer`` may be any object supporting the buffer protocol; a
    ``memoryview`` into a larger allocation works, which is how the canary
    tests surround regions with guard bytes.
    """

    base: int
    length: int
    flags: AccessFlags
    label: str = ""
    buffer: object = None

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise PolicyError(f"region {self.label!r} has non-positive length {self.length}")
        if not 0 <= self.base or self.base + self.length > ADDRESS_LIMIT:
            raise PolicyError(f"region {self.label!r} overflows the 64-bit address space")
        if not (self.flags.readable or self.flags.writable):
            raise PolicyError(f"region {self.label!r} grants no access")
        if self.buffer is None:
            self.buffer = bytearray(self.length)
        elif len(memoryview(self.buffer).cast("B")) < self.length:
            raise PolicyError(f"backing buffer of region {self.label!r} is shorter than {self.length} bytes")

    @property
    def end(self) -> int:
        return self.base + self.length

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def permits(self, kind: AccessKind) -> bool:
        return self.flags.writable if kind is AccessKind.WRITE else self.flags.readable


class PolicyTable:
    """Ordered list of regions consulted on every memory access.

    ``resolve`` is the hot path used by the interpreter: it either returns
    ``(buffer, offset)`` or raises :class:`MemoryFault`.
    """

    def __init__(self, regions: Iterable[MemoryRegion] = ()):
        self.regions: list[MemoryRegion] = []
        self._fast: tuple = ()
        for region in regions:
            self.add(region)

    def __iter__(self):
        return iter(self.regions)

    def __len__(self) -> int:
        return len(self.regions)

    def add(self, region: MemoryRegion) -> MemoryRegion:
        self.regions.append(region)
        self._fast = tuple(
            (r.base, r.end, r.flags.readable, r.flags.writable, r.buffer) for r in self.regions
        )
        return region

    def map(self, label: str, size_or_data, flags: AccessFlags = READ_WRITE, base: int | None = None) -> MemoryRegion:
        """Create and add a region, choosing a fresh base address if none given."""
        if isinstance(size_or_data, int):
            buffer, length = bytearray(size_or_data), size_or_data
        else:
            buffer = size_or_data
            length = len(memoryview(buffer).cast("B"))
        if base is None:
            base = self._next_base()
        return self.add(MemoryRegion(base, length, flags, label, buffer))

    def _next_base(self) -> int:
        # always leave an unmapped gap after the previous region
        top = max(
            (r.end for r in self.regions if AUTO_BASE <= r.base < STACK_BASE),
            default=AUTO_BASE - AUTO_ALIGN,
        )
        return (top // AUTO_ALIGN + 1) * AUTO_ALIGN

    def find(self, label: str) -> MemoryRegion:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def stack(self) -> MemoryRegion:
        return self.find("stack")

    def check(self, addr: int, size: int, kind: AccessKind) -> Access:
        for region in self.regions:
            if region.base <= addr and addr + size <= region.end and region.permits(kind):
                return Allowed(region)
        return Denied(self._deny_reason(addr, size, kind))

    def _deny_reason(self, addr: int, size: int, kind: AccessKind) -> DenyReason:
        first = [r for r in self.regions if r.contains(addr)]
        if not first:
            return DenyReason.UNMAPPED
        fits = [r for r in first if addr + size <= r.end]
        if fits:
            if kind is AccessKind.WRITE:
                return DenyReason.WRITE_TO_READ_ONLY
            return DenyReason.READ_FROM_WRITE_ONLY
        last = addr + size - 1
        if any(r.contains(last) for r in self.regions):
            return DenyReason.STRADDLES_REGIONS
        return DenyReason.OUT_OF_BOUNDS

    def resolve(self, addr: int, size: int, write: bool):
        """Return ``(buffer, offset)`` for an allowed access or raise MemoryFault."""
        end = addr + size
        for base, rend, readable, writable, buf in self._fast:
            if base <= addr and end <= rend and (writable if write else readable):
                return buf, addr - base
        kind = AccessKind.WRITE if write else AccessKind.READ
        raise MemoryFault(addr, size, kind, self._deny_reason(addr, size, kind))

    def read(self, addr: int, size: int) -> bytes:
        buf, off = self.resolve(addr, size, False)
        return bytes(memoryview(buf).cast("B")[off : off + size])

    def write(self, addr: int, data: bytes) -> None:
        buf, off = self.resolve(addr, len(data), True)
        memoryview(buf).cast("B")[off : off + len(data)] = data

    @classmethod
    def with_stack(cls, buffer=None) -> "PolicyTable":
        """A table holding only the 512-byte read/write stack."""
        table = cls()
        table.add(MemoryRegion(STACK_BASE, STACK_SIZE, READ_WRITE, "stack", buffer))
        return table


def add_region(table: PolicyTable, region: MemoryRegion) -> PolicyTable:
    table.add(region)
    return table


def check_access(table: PolicyTable, addr: int, size: int, kind: AccessKind) -> Access:
    if size not in (1, 2, 4, 8):
        raise ValueError(f"access size must be 1, 2, 4 or 8, not {size}")
    return table.check(addr, size, kind)
