"""Host functions callable from bytecode through CALL.

A script calls a binding with ``call <id>``; arguments travel in r1-r5 and
the result comes back in r0. Ids are part of the script ABI and never
change once assigned; see :data:`STANDARD_BINDINGS` and ``bindings.txt``.

Bindings never touch host memory directly. Every VM address they read or
write goes through the invocation's :class:`~rbpf.sandbox.PolicyTable`, so
a binding cannot be used to escape the sandbox.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .sandbox import MemoryRegion, PolicyTable
from .store import CapacityError, KeyValueStore, Namespace

__all__ = [
    "DuplicateIdError",
    "HostCallError",
    "HostFunction",
    "BindingTable",
    "SensorMeasurement",
    "CoapInvocationContext",
    "Invocation",
    "STANDARD_BINDINGS",
    "default_bindings",
    "render_reference",
    "format_dfp",
    "ERROR_CODES",
]

M64 = 0xFFFF_FFFF_FFFF_FFFF
M32 = 0xFFFF_FFFF

# negative return codes seen by scripts
ERR_GENERIC = -1
ERR_IO = -5
ERR_NO_DEVICE = -19
ERR_INVALID = -22
ERR_NO_SPACE = -28
ERR_BAD_STATE = -71
ERROR_COAP_INTERNAL_SERVER = -500

ERROR_CODES = {
    ERR_GENERIC: "generic failure",
    ERR_IO: "sensor read failed",
    ERR_NO_DEVICE: "invalid sensor handle",
    ERR_INVALID: "invalid argument (e.g. unknown CoAP context)",
    ERR_NO_SPACE: "buffer or store capacity exhausted",
    ERR_BAD_STATE: "CoAP builder call out of order",
    ERROR_COAP_INTERNAL_SERVER: "script-level internal server error (convention, not returned by bindings)",
}

COAP_CODE_CONTENT = 0x45  # 2.05
COAP_CODE_INTERNAL_SERVER_ERROR = 0xA0  # 5.00
COAP_OPT_FINISH_PAYLOAD = 0x0001
COAP_PAYLOAD_MARKER = 0xFF

SENSOR_TOKEN_BASE = 0x5A00_0000


class DuplicateIdError(ValueError):
    pass


class HostCallError(RuntimeError):
    """A binding failed in a way the script cannot handle; faults the VM."""


@dataclass(frozen=True)
class HostFunction:
    id: int
    name: str
    arity: int
    behavior: Callable[..., int]
    signature: str = ""
    doc: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.id <= M32:
            raise ValueError(f"binding id {self.id} is not an unsigned 32-bit value")
        if not 0 <= self.arity <= 5:
            raise ValueError(f"binding {self.name} has arity {self.arity}, at most 5 registers are passed")


class BindingTable:
    def __init__(self, functions: Iterable[HostFunction] = ()):
        self.entries: dict[int, HostFunction] = {}
        for fn in functions:
            self.register(fn)

    def register(self, fn: HostFunction) -> "BindingTable":
        if fn.id in self.entries:
            raise DuplicateIdError(f"binding id {fn.id} already registered as {self.entries[fn.id].name}")
        self.entries[fn.id] = fn
        return self

    def get(self, id: int) -> HostFunction | None:
        return self.entries.get(id)

    def __getitem__(self, id: int) -> HostFunction:
        return self.entries[id]

    def __contains__(self, id: int) -> bool:
        return id in self.entries

    def __iter__(self):
        return iter(sorted(self.entries.values(), key=lambda f: f.id))

    def ids(self) -> set[int]:
        return set(self.entries)

    def names(self) -> dict[str, int]:
        return {fn.name: fn.id for fn in self.entries.values()}

    def id_names(self) -> dict[int, str]:
        return {fn.id: fn.name for fn in self.entries.values()}


@dataclass(frozen=True)
class SensorMeasurement:
    """``value * 10**scale`` in the sensor's unit."""

    value: int
    scale: int = 0

    LAYOUT = struct.Struct("<hbxxxxx")

    def __post_init__(self) -> None:
        if not -0x8000 <= self.value <= 0x7FFF:
            raise ValueError(f"measurement value {self.value} does not fit in 16 bits")
        if not -0x80 <= self.scale <= 0x7F:
            raise ValueError(f"measurement scale {self.scale} does not fit in 8 bits")

    def pack(self) -> bytes:
        return self.LAYOUT.pack(self.value, self.scale)

    @classmethod
    def unpack(cls, raw: bytes) -> "SensorMeasurement":
        value, scale = cls.LAYOUT.unpack(raw[:8])
        return cls(value, scale)


@dataclass
class CoapInvocationContext:
    """Response-building state for one CoAP-triggered invocation.

    The script sees only ``ctx_addr``: a read-only region whose first eight
    bytes hold the PDU base address and next eight the PDU length.
    """

    ctx_addr: int
    pdu_region: MemoryRegion
    response_code: int = 0
    header_len: int = 0
    payload_offset: int = 0
    stage: str = "idle"

    CONTEXT_LAYOUT = struct.Struct("<QQ")

    def context_bytes(self) -> bytes:
        return self.CONTEXT_LAYOUT.pack(self.pdu_region.base, self.pdu_region.length)


@dataclass
class Invocation:
    """What a binding may see of the host during one execution."""

    policy: PolicyTable
    script_id: int = 0
    store: KeyValueStore | None = None
    sensors: Sequence[Any] = ()
    coap: CoapInvocationContext | None = None
    extra: dict = field(default_factory=dict)

    def read(self, addr: int, size: int) -> bytes:
        return self.policy.read(addr & M64, size)

    def write(self, addr: int, data: bytes) -> None:
        self.policy.write(addr & M64, data)


def _s64(v: int) -> int:
    v &= M64
    return v - (1 << 64) if v >> 63 else v


def _s16(v: int) -> int:
    v &= 0xFFFF
    return v - 0x10000 if v & 0x8000 else v


# --- SAUL ----------------------------------------------------------------


def saul_reg_find_nth(inv: Invocation, n: int) -> int:
    n = _s64(n)
    if 1 <= n <= len(inv.sensors):
        return SENSOR_TOKEN_BASE + n
    return 0


def _sensor_for(inv: Invocation, handle: int):
    index = (handle & M64) - SENSOR_TOKEN_BASE
    if 1 <= index <= len(inv.sensors):
        return inv.sensors[index - 1]
    return None


def saul_reg_read(inv: Invocation, handle: int, dest: int) -> int:
    sensor = _sensor_for(inv, handle)
    if sensor is None:
        return ERR_NO_DEVICE
    if getattr(sensor, "failing", False):
        return ERR_IO
    inv.write(dest, sensor.reading.pack())
    return 0


# --- CoAP response builder ----------------------------------------------


def _coap(inv: Invocation, ctx: int) -> CoapInvocationContext | None:
    coap = inv.coap
    if coap is None or ctx & M64 != coap.ctx_addr:
        return None
    # read the context through the policy like any other script pointer
    base, length = CoapInvocationContext.CONTEXT_LAYOUT.unpack(inv.read(ctx, 16))
    if base != coap.pdu_region.base or length != coap.pdu_region.length:
        return None
    return coap


def gcoap_resp_init(inv: Invocation, ctx: int, code: int) -> int:
    coap = _coap(inv, ctx)
    if coap is None:
        return ERR_INVALID
    if coap.stage != "idle":
        return ERR_BAD_STATE
    code &= 0xFF
    inv.write(coap.pdu_region.base, bytes([code]))
    coap.response_code = code
    coap.stage = "init"
    return 0


def coap_add_format(inv: Invocation, ctx: int, fmt: int) -> int:
    coap = _coap(inv, ctx)
    if coap is None:
        return ERR_INVALID
    if coap.stage != "init":
        return ERR_BAD_STATE
    if coap.pdu_region.length < 2:
        return ERR_NO_SPACE
    inv.write(coap.pdu_region.base + 1, bytes([fmt & 0xFF]))
    coap.stage = "format"
    return 0


def coap_opt_finish(inv: Invocation, ctx: int, flags: int) -> int:
    coap = _coap(inv, ctx)
    if coap is None:
        return ERR_INVALID
    if coap.stage != "format":
        return ERR_BAD_STATE
    header_len = 2
    if flags & COAP_OPT_FINISH_PAYLOAD:
        if coap.pdu_region.length < 3:
            return ERR_NO_SPACE
        inv.write(coap.pdu_region.base + 2, bytes([COAP_PAYLOAD_MARKER]))
        header_len = 3
    coap.header_len = coap.payload_offset = header_len
    coap.stage = "finished"
    return header_len


def coap_get_pdu(inv: Invocation, ctx: int) -> int:
    coap = _coap(inv, ctx)
    if coap is None:
        return ERR_INVALID
    if coap.stage != "finished":
        return ERR_BAD_STATE
    return coap.pdu_region.base + coap.payload_offset


# --- formatting -----------------------------------------------------------


def format_dfp(value: int, scale: int) -> str:
    """Render ``value * 10**scale`` in plain decimal, keeping ``-scale`` fraction digits."""
    if scale >= 0:
        return str(value * 10**scale)
    digits = -scale
    sign = "-" if value < 0 else ""
    whole, frac = divmod(abs(value), 10**digits)
    return f"{sign}{whole}.{frac:0{digits}d}"


def fmt_s16_dfp(inv: Invocation, buf: int, value: int, scale: int) -> int:
    scale = _s64(scale)
    if not -64 <= scale <= 64:
        raise HostCallError(f"scale {scale} outside [-64, 64]")
    text = format_dfp(_s16(value), scale).encode("ascii")
    inv.write(buf, text)
    return len(text)


# --- key-value store ------------------------------------------------------


def _store(inv: Invocation) -> KeyValueStore:
    if inv.store is None:
        raise HostCallError("no key-value store attached to this invocation")
    return inv.store


def _put(inv: Invocation, ns: Namespace, key: int, value: int) -> int:
    try:
        _store(inv).put(ns, key & M32, _s64(value))
    except CapacityError:
        return ERR_NO_SPACE
    return 0


def _fetch(inv: Invocation, ns: Namespace, key: int, dest: int) -> int:
    present, value = _store(inv).get(ns, key & M32)
    inv.write(dest, struct.pack("<q", value))
    return 1 if present else 0


def store_local(inv: Invocation, key: int, value: int) -> int:
    return _put(inv, Namespace.local(inv.script_id), key, value)


def fetch_local(inv: Invocation, key: int, dest: int) -> int:
    return _fetch(inv, Namespace.local(inv.script_id), key, dest)


def store_global(inv: Invocation, key: int, value: int) -> int:
    return _put(inv, Namespace.GLOBAL, key, value)


def fetch_global(inv: Invocation, key: int, dest: int) -> int:
    return _fetch(inv, Namespace.GLOBAL, key, dest)


STANDARD_BINDINGS: tuple[HostFunction, ...] = (
    HostFunction(1, "saul_reg_find_nth", 1, saul_reg_find_nth, "(n) -> handle",
                 "handle of the n-th sensor (1-based), 0 if there is none"),
    HostFunction(2, "saul_reg_read", 2, saul_reg_read, "(handle, dest) -> 0 | <0",
                 "write the reading to dest: value i16 at +0, scale i8 at +2, 5 zero bytes"),
    HostFunction(3, "gcoap_resp_init", 2, gcoap_resp_init, "(ctx, code) -> 0 | <0",
                 "start the response; PDU byte 0 = code"),
    HostFunction(4, "coap_add_format", 2, coap_add_format, "(ctx, format) -> 0 | <0",
                 "PDU byte 1 = content format"),
    HostFunction(5, "coap_opt_finish", 2, coap_opt_finish, "(ctx, flags) -> header_len | <0",
                 "finish options; with flag 1 (payload) writes the 0xFF marker and returns 3"),
    HostFunction(6, "coap_get_pdu", 1, coap_get_pdu, "(ctx) -> payload address | <0",
                 "VM address where the payload starts"),
    HostFunction(7, "fmt_s16_dfp", 3, fmt_s16_dfp, "(buf, value, scale) -> length",
                 "write value*10^scale as plain decimal text, return its length"),
    HostFunction(8, "store_local", 2, store_local, "(key, value) -> 0 | <0",
                 "store an i64 under a u32 key in this script's namespace"),
    HostFunction(9, "fetch_local", 2, fetch_local, "(key, dest) -> 1 present | 0 absent",
                 "write the i64 stored under key (0 if absent) to dest"),
    HostFunction(10, "store_global", 2, store_global, "(key, value) -> 0 | <0",
                 "store an i64 under a u32 key in the global namespace"),
    HostFunction(11, "fetch_global", 2, fetch_global, "(key, dest) -> 1 present | 0 absent",
                 "write the global i64 stored under key (0 if absent) to dest"),
)


def default_bindings() -> BindingTable:
    return BindingTable(STANDARD_BINDINGS)


def render_reference(table: BindingTable | None = None) -> str:
    """The ``bindings.txt`` reference shipped with the repository."""
    table = table or default_bindings()
    lines = [
        "# rbpf host bindings. Ids are stable: compiled scripts hard-code them.",
        "# Arguments are passed in r1-r5, the result is returned in r0.",
        "#",
        "# id  name               signature                                 semantics",
    ]
    for fn in table:
        lines.append(f"{fn.id:>4}  {fn.name:<18} {fn.signature:<41} {fn.doc}")
    lines += ["", "# negative return codes"]
    for code, text in sorted(ERROR_CODES.items(), reverse=True):
        lines.append(f"{code:>5}  {text}")
    return "\n".join(lines) + "\n"
