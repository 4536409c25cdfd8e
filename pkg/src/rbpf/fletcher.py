"""Fletcher-32 reference and the bundled bytecode's calling convention."""

from __future__ import annotations

import random
import struct

from .sandbox import READ_ONLY, PolicyTable

__all__ = ["BENCH_SEED", "BENCH_SIZE", "fletcher32_reference", "bench_input", "map_fletcher_input"]

BENCH_SIZE = 361
BENCH_SEED = 2020


def fletcher32_reference(data: bytes) -> int:
    """Fletcher-32 over little-endian 16-bit words, sums starting at zero.

    An odd trailing byte is padded with a zero high byte.
    """
    if len(data) < 2:
        raise ValueError("Fletcher-32 needs at least one 16-bit word")
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    sum1 = sum2 = 0
    for (word,) in struct.iter_unpack("<H", data):
        sum1 = (sum1 + word) % 65535
        sum2 = (sum2 + sum1) % 65535
    return (sum2 << 16) | sum1


def bench_input(size: int = BENCH_SIZE, seed: int = BENCH_SEED) -> bytes:
    """Deterministic pseudo-random benchmark buffer."""
    return random.Random(seed).randbytes(size)


def map_fletcher_input(policy: PolicyTable, data: bytes) -> int:
    """Map ``data`` and its context read-only; return the context address for r1."""
    region = policy.map("input", bytes(data), READ_ONLY)
    ctx = policy.map("context", struct.pack("<QQ", region.base, len(data)), READ_ONLY)
    return ctx.base
