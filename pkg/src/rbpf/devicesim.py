"""A simulated IoT device hosting scripts in an application store.

The device owns a sensor registry, a key-value store and an application
store mapping events to verified programs. ``trigger_coap`` plays the part
of the CoAP server: it sets up the invocation's memory regions, runs the
script installed for the path and turns its return value into a response.
"""

from __future__ import annotations

import enum
import threading
import zlib
from dataclasses import dataclass, field

from .bindings import (
    COAP_CODE_INTERNAL_SERVER_ERROR,
    BindingTable,
    CoapInvocationContext,
    Invocation,
    SensorMeasurement,
    default_bindings,
)
from .compress import CompressedScript, decompress, is_compressed
from .sandbox import READ_ONLY, READ_WRITE, PolicyTable
from .store import KeyValueStore
from .verifier import VerifiedProgram, VerifierReport, verify
from .vm import DEFAULT_FUEL, ExecOutcome, Status, execute

__all__ = [
    "EventKind",
    "EventType",
    "SimulatedSensor",
    "NoApplicationInstalled",
    "InstallError",
    "CoapResponse",
    "ApplicationStore",
    "Device",
    "DEFAULT_PDU_SIZE",
]

DEFAULT_PDU_SIZE = 128


class EventKind(enum.Enum):
    COAP_REQUEST = "CoapRequest"
    TIMER = "Timer"
    PACKET_HOOK = "PacketHook"


@dataclass(frozen=True)
class EventType:
    kind: EventKind
    selector: str = ""

    @classmethod
    def coap(cls, path: str) -> "EventType":
        return cls(EventKind.COAP_REQUEST, path)


@dataclass
class SimulatedSensor:
    name: str
    reading: SensorMeasurement = field(default_factory=lambda: SensorMeasurement(0, 0))
    failing: bool = False


class NoApplicationInstalled(LookupError):
    pass


class InstallError(ValueError):
    def __init__(self, report: VerifierReport):
        self.report = report
        super().__init__("script rejected by the verifier:\n" + report.render())


@dataclass(frozen=True)
class CoapResponse:
    code: int
    payload: bytes
    outcome: ExecOutcome

    def __iter__(self):
        return iter((self.code, self.payload, self.outcome))


class ApplicationStore:
    """Event slots holding verified programs only."""

    def __init__(self) -> None:
        self.slots: dict[EventType, VerifiedProgram] = {}

    def __setitem__(self, event: EventType, program: VerifiedProgram) -> None:
        if not isinstance(program, VerifiedProgram):
            raise TypeError("only verified programs can be stored")
        self.slots[event] = program

    def __getitem__(self, event: EventType) -> VerifiedProgram:
        try:
            return self.slots[event]
        except KeyError:
            raise NoApplicationInstalled(f"no application installed for {event.kind.value} {event.selector!r}") from None

    def __contains__(self, event: EventType) -> bool:
        return event in self.slots


def default_script_id(event: EventType) -> int:
    """Stable id for an event slot, so reinstalling keeps its local store."""
    return zlib.crc32(f"{event.kind.value}:{event.selector}".encode())


class Device:
    def __init__(
        self,
        sensors: list[SimulatedSensor] | None = None,
        store: KeyValueStore | None = None,
        bindings: BindingTable | None = None,
        pdu_size: int = DEFAULT_PDU_SIZE,
        fuel: int = DEFAULT_FUEL,
    ):
        self.sensors: list[SimulatedSensor] = list(sensors or [])
        self.store = store if store is not None else KeyValueStore()
        self.bindings = bindings or default_bindings()
        self.apps = ApplicationStore()
        self.pdu_size = pdu_size
        self.fuel = fuel
        # one trigger at a time per device
        self._lock = threading.Lock()

    def add_sensor(self, name: str, measurement: SensorMeasurement | None = None) -> SimulatedSensor:
        sensor = SimulatedSensor(name, measurement or SensorMeasurement(0, 0))
        self.sensors.append(sensor)
        return sensor

    def set_sensor(self, index: int, measurement: SensorMeasurement) -> None:
        """Set the reading of the sensor at 0-based ``index``."""
        if not 0 <= index < len(self.sensors):
            raise IndexError(f"sensor index {index} out of range ({len(self.sensors)} configured)")
        self.sensors[index].reading = measurement

    def install(
        self,
        event: EventType,
        bytecode: bytes | CompressedScript,
        script_id: int | None = None,
    ) -> VerifiedProgram:
        """Verify and store a script; compressed containers are unpacked first.

        Raises :class:`InstallError` carrying the verifier report when the
        script is rejected; the slot keeps its previous program in that case.
        """
        if isinstance(bytecode, CompressedScript) or is_compressed(bytecode):
            bytecode = decompress(bytecode)
        if script_id is None:
            script_id = default_script_id(event)
        result = verify(bytecode, script_id, self.bindings.ids())
        if isinstance(result, VerifierReport):
            raise InstallError(result)
        self.apps[event] = result
        return result

    def _invoke(self, program: VerifiedProgram, policy: PolicyTable, arg: int, coap=None) -> ExecOutcome:
        invocation = Invocation(
            policy=policy, script_id=program.script_id, store=self.store, sensors=self.sensors, coap=coap
        )
        return execute(program, arg, policy, self.bindings, self.fuel, invocation=invocation)

    def trigger(self, event: EventType, arg: int = 0) -> ExecOutcome:
        """Run the script for a non-CoAP event with only the stack mapped."""
        program = self.apps[event]
        with self._lock:
            return self._invoke(program, PolicyTable.with_stack(), arg)

    def trigger_coap(self, path: str, method: str = "GET") -> CoapResponse:
        if method.upper() != "GET":
            raise ValueError(f"unsupported CoAP method {method!r}")
        program = self.apps[EventType.coap(path)]
        with self._lock:
            policy = PolicyTable.with_stack()
            pdu = policy.map("pdu", self.pdu_size, READ_WRITE)
            ctx_region = policy.map("coap_ctx", 16, READ_ONLY)
            coap = CoapInvocationContext(ctx_region.base, pdu)
            ctx_region.buffer[:] = coap.context_bytes()
            outcome = self._invoke(program, policy, ctx_region.base, coap)

        if outcome.status is not Status.OK or outcome.return_value < 0:
            return CoapResponse(COAP_CODE_INTERNAL_SERVER_ERROR, b"", outcome)
        length = min(outcome.return_value, pdu.length)
        data = bytes(pdu.buffer[:length])
        code = coap.response_code if coap.stage != "idle" else COAP_CODE_INTERNAL_SERVER_ERROR
        return CoapResponse(code, data[coap.payload_offset :], outcome)
