import random

import pytest

from rbpf.sandbox import (
    READ_ONLY,
    READ_WRITE,
    STACK_SIZE,
    AccessFlags,
    AccessKind,
    Allowed,
    Denied,
    DenyReason,
    MemoryFault,
    MemoryRegion,
    PolicyError,
    PolicyTable,
    add_region,
    check_access,
)

from fuzzgen import brute_force_allowed

R, W = AccessKind.READ, AccessKind.WRITE


def test_stack_region():
    table = add_region(PolicyTable(), MemoryRegion(0x1000, STACK_SIZE, READ_WRITE, "stack"))
    assert table.stack.length == 512
    assert check_access(table, 0x1000 + 504, 8, W)


def test_zero_length_region():
    with pytest.raises(PolicyError):
        add_region(PolicyTable(), MemoryRegion(0x1000, 0, READ_WRITE))


def test_region_overflowing_address_space():
    with pytest.raises(PolicyError):
        MemoryRegion((1 << 64) - 4, 8, READ_ONLY)


def test_region_without_permissions():
    with pytest.raises(PolicyError):
        MemoryRegion(0x1000, 8, AccessFlags(False, False))


def test_input_region_boundary():
    table = PolicyTable.with_stack()
    region = table.map("input", 361, READ_ONLY)
    assert check_access(table, region.base + 357, 4, R) == Allowed(region)
    assert check_access(table, region.base + 358, 4, R) == Denied(DenyReason.OUT_OF_BOUNDS)


def test_exact_fill_read():
    table = PolicyTable([MemoryRegion(0x2000, 8, READ_ONLY)])
    assert check_access(table, 0x2000, 8, R)


def test_write_to_read_only():
    table = PolicyTable([MemoryRegion(0x2000, 8, READ_ONLY)])
    assert check_access(table, 0x2000, 4, W) == Denied(DenyReason.WRITE_TO_READ_ONLY)


def test_read_from_write_only():
    table = PolicyTable([MemoryRegion(0x2000, 8, AccessFlags(False, True))])
    assert check_access(table, 0x2000, 4, R) == Denied(DenyReason.READ_FROM_WRITE_ONLY)


def test_straddling_adjacent_regions():
    table = PolicyTable([MemoryRegion(0x2000, 8, READ_WRITE), MemoryRegion(0x2008, 8, READ_WRITE)])
    assert check_access(table, 0x2006, 4, R) == Denied(DenyReason.STRADDLES_REGIONS)


def test_unmapped():
    assert check_access(PolicyTable.with_stack(), 0, 1, R) == Denied(DenyReason.UNMAPPED)


def test_bad_access_size():
    with pytest.raises(ValueError):
        check_access(PolicyTable.with_stack(), 0, 3, R)


def test_flags_parse():
    assert AccessFlags.parse("rw") == READ_WRITE
    assert AccessFlags.parse("r") == READ_ONLY
    with pytest.raises(PolicyError):
        AccessFlags.parse("x")


def test_resolve_raises_memory_fault():
    table = PolicyTable.with_stack()
    with pytest.raises(MemoryFault) as info:
        table.resolve(8, 4, True)
    assert info.value.reason is DenyReason.UNMAPPED


def test_auto_mapped_regions_are_separated():
    table = PolicyTable.with_stack()
    a = table.map("a", 100)
    b = table.map("b", 100)
    assert b.base > a.end
    assert not check_access(table, a.end, 1, R)


def _random_table(rng):
    table = PolicyTable()
    cursor = 0x1000
    for _ in range(rng.randint(1, 5)):
        cursor += rng.choice([0, 0, rng.randint(1, 32)])
        length = rng.randint(1, 48)
        flags = rng.choice([READ_ONLY, READ_WRITE, AccessFlags(False, True)])
        table.add(MemoryRegion(cursor, length, flags))
        cursor += length
    return table, cursor


def test_check_access_matches_brute_force_oracle():
    rng = random.Random(3)
    for _ in range(3000):
        table, top = _random_table(rng)
        for _ in range(20):
            addr = rng.randint(0xFF0, top + 8)
            size = rng.choice((1, 2, 4, 8))
            kind = rng.choice((R, W))
            expected = brute_force_allowed(table.regions, addr, size, kind is W)
            assert bool(check_access(table, addr, size, kind)) == expected
            try:
                table.resolve(addr, size, kind is W)
                resolved = True
            except MemoryFault:
                resolved = False
            assert resolved == expected


def test_adding_regions_never_revokes_access():
    rng = random.Random(4)
    for _ in range(500):
        table, top = _random_table(rng)
        probes = [(rng.randint(0xFF0, top + 8), rng.choice((1, 2, 4, 8)), rng.choice((R, W))) for _ in range(30)]
        before = [bool(check_access(table, *p)) for p in probes]
        table.add(MemoryRegion(top + rng.randint(0, 16), rng.randint(1, 32), READ_WRITE))
        after = [bool(check_access(table, *p)) for p in probes]
        assert all(a or not b for b, a in zip(before, after))


def test_memoryview_backed_region():
    backing = bytearray(b"\xAA" * 32)
    view = memoryview(backing)[8:24]
    table = PolicyTable([MemoryRegion(0x4000, 16, READ_WRITE, "buf", view)])
    table.write(0x4000 + 12, b"\x01\x02\x03\x04")
    assert backing[20:24] == b"\x01\x02\x03\x04"
    assert backing[:8] == b"\xAA" * 8 and backing[24:] == b"\xAA" * 8
    with pytest.raises(MemoryFault):
        table.write(0x4000 + 14, b"\x00" * 4)
