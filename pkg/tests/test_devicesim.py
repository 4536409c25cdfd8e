import pytest

from rbpf import programs
from rbpf.asm import assemble
from rbpf.bindings import COAP_CODE_INTERNAL_SERVER_ERROR, ERROR_COAP_INTERNAL_SERVER, SensorMeasurement
from rbpf.compress import compress
from rbpf.devicesim import ApplicationStore, Device, EventKind, EventType, InstallError, NoApplicationInstalled
from rbpf.verifier import ViolationKind
from rbpf.vm import Status

SENSOR = EventType.coap("/sensor")


@pytest.fixture
def device():
    dev = Device()
    dev.add_sensor("temp", SensorMeasurement(1234, -2))
    dev.install(SENSOR, programs.bytecode("coap_sensor"))
    return dev


def test_coap_sensor_handler(device):
    code, payload, outcome = device.trigger_coap("/sensor", "GET")
    assert code == 0x45
    assert payload == b"12.34"
    assert outcome.return_value == 8
    assert outcome.status is Status.OK


def test_no_sensor_gives_internal_error():
    dev = Device()
    dev.install(SENSOR, programs.bytecode("coap_sensor"))
    code, payload, outcome = dev.trigger_coap("/sensor")
    assert outcome.return_value == ERROR_COAP_INTERNAL_SERVER < 0
    assert payload == b""
    assert code == COAP_CODE_INTERNAL_SERVER_ERROR


def test_set_sensor(device):
    device.set_sensor(0, SensorMeasurement(0, 0))
    assert device.trigger_coap("/sensor").payload == b"0"
    device.set_sensor(0, SensorMeasurement(-215, -1))
    assert device.trigger_coap("/sensor").payload == b"-21.5"
    with pytest.raises(IndexError):
        device.set_sensor(1, SensorMeasurement(1, 0))


def test_failing_sensor(device):
    device.sensors[0].failing = True
    code, payload, outcome = device.trigger_coap("/sensor")
    assert outcome.return_value < 0 and payload == b""


def test_no_application():
    with pytest.raises(NoApplicationInstalled):
        Device().trigger_coap("/nothing")


def test_rejected_install_keeps_previous(device):
    with pytest.raises(InstallError) as info:
        device.install(SENSOR, assemble("ja +5\nexit"))
    assert ViolationKind.JUMP_OUT_OF_BOUNDS in info.value.report.kinds()
    assert device.trigger_coap("/sensor").payload == b"12.34"


@pytest.mark.parametrize("as_bytes", [False, True])
def test_install_compressed(as_bytes):
    dev = Device()
    dev.add_sensor("temp", SensorMeasurement(7, 2))
    cs = compress(programs.bytecode("coap_sensor"))
    prog = dev.install(SENSOR, cs.to_bytes() if as_bytes else cs)
    assert prog.bytecode == programs.bytecode("coap_sensor")
    assert dev.trigger_coap("/sensor").payload == b"700"


def test_faulting_script_gives_internal_error():
    dev = Device()
    dev.install(SENSOR, assemble("ldxdw r0, [r1+4096]\nexit"))
    code, payload, outcome = dev.trigger_coap("/sensor")
    assert outcome.status is Status.FAULT
    assert code == COAP_CODE_INTERNAL_SERVER_ERROR and payload == b""


def test_script_that_never_responds():
    dev = Device()
    dev.install(SENSOR, assemble("mov r0, 0\nexit"))
    assert dev.trigger_coap("/sensor").code == COAP_CODE_INTERNAL_SERVER_ERROR


def test_only_get_supported(device):
    with pytest.raises(ValueError):
        device.trigger_coap("/sensor", "POST")


def test_application_store_only_takes_verified_programs():
    with pytest.raises(TypeError):
        ApplicationStore()[SENSOR] = assemble("exit")


def test_counter_on_timer_event():
    dev = Device()
    timer = EventType(EventKind.TIMER, "tick")
    dev.install(timer, programs.bytecode("counter"))
    assert [dev.trigger(timer).return_value for _ in range(3)] == [1, 2, 3]


def test_reinstall_keeps_local_store():
    dev = Device()
    timer = EventType(EventKind.TIMER, "tick")
    dev.install(timer, programs.bytecode("counter"))
    dev.trigger(timer)
    dev.install(timer, programs.bytecode("counter"))
    assert dev.trigger(timer).return_value == 2


def test_fuel_limit_applies():
    dev = Device(fuel=50)
    dev.install(SENSOR, assemble("ja -1\nexit"))
    code, _, outcome = dev.trigger_coap("/sensor")
    assert outcome.status is Status.FUEL_EXHAUSTED and outcome.instructions_executed == 50
    assert code == COAP_CODE_INTERNAL_SERVER_ERROR


@pytest.mark.parametrize(
    "source",
    [
        "stdw [r1+0], 1\nmov r0, 0\nexit",  # the context is read-only
        "stb [r1+16], 1\nmov r0, 0\nexit",  # just past the context
        "ldxdw r2, [r1+0]\nldxdw r3, [r1+8]\nadd r2, r3\nstb [r2+0], 1\nmov r0, 0\nexit",  # just past the PDU
        "ldxdw r2, [r1+0]\nstb [r2-1], 1\nmov r0, 0\nexit",  # just before the PDU
    ],
)
def test_scripts_cannot_write_outside_pdu_and_stack(source):
    dev = Device()
    dev.install(SENSOR, assemble(source))
    code, payload, outcome = dev.trigger_coap("/sensor")
    assert outcome.status is Status.FAULT
    assert outcome.fault.value == "MemoryAccessDenied"
    assert code == COAP_CODE_INTERNAL_SERVER_ERROR


def test_pdu_and_stack_are_writable():
    dev = Device()
    src = "ldxdw r2, [r1+0]\nldxdw r3, [r1+8]\nadd r2, r3\nstb [r2-1], 1\nstdw [r10-512], 2\nmov r0, 0\nexit"
    dev.install(SENSOR, assemble(src))
    assert dev.trigger_coap("/sensor").outcome.status is Status.OK
