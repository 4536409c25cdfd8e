from pathlib import Path

import pytest

from rbpf import bindings as b
from rbpf.asm import assemble
from rbpf.bindings import (
    COAP_CODE_CONTENT,
    COAP_OPT_FINISH_PAYLOAD,
    BindingTable,
    CoapInvocationContext,
    DuplicateIdError,
    HostFunction,
    Invocation,
    SensorMeasurement,
    default_bindings,
    format_dfp,
    render_reference,
)
from rbpf.devicesim import SimulatedSensor
from rbpf.sandbox import READ_ONLY, READ_WRITE, PolicyTable
from rbpf.store import KeyValueStore, Namespace
from rbpf.verifier import verify_or_raise
from rbpf.vm import FaultKind, execute

ROOT = Path(__file__).resolve().parents[1]


class CountingPolicy(PolicyTable):
    """Records every access decision so tests can see host-side checks."""

    def __init__(self, *args, **kwargs):
        self.log = []
        super().__init__(*args, **kwargs)

    def resolve(self, addr, size, write):
        self.log.append((addr, size, write))
        return super().resolve(addr, size, write)


def counting_policy() -> CountingPolicy:
    table = CountingPolicy()
    table.add(PolicyTable.with_stack().stack)
    return table


def coap_invocation(pdu_size=64):
    policy = PolicyTable.with_stack()
    pdu = policy.map("pdu", pdu_size, READ_WRITE)
    ctx_region = policy.map("ctx", 16, READ_ONLY)
    coap = CoapInvocationContext(ctx_region.base, pdu)
    ctx_region.buffer[:] = coap.context_bytes()
    return Invocation(policy=policy, coap=coap), coap


def test_register_and_dispatch():
    calls = []
    table = BindingTable().register(HostFunction(1, "f", 0, lambda inv, *a: calls.append(a) or 5))
    program = verify_or_raise(assemble("call 1\nexit"), 0, table.ids())
    out = execute(program, 0, PolicyTable.with_stack(), table)
    assert calls and out.return_value == 5


def test_duplicate_id():
    fn = HostFunction(1, "f", 0, lambda inv, *a: 0)
    with pytest.raises(DuplicateIdError):
        BindingTable([fn, fn])


def test_unregistered_dispatch_faults():
    program = verify_or_raise(assemble("call 99\nexit"))
    out = execute(program, 0, PolicyTable.with_stack(), default_bindings())
    assert out.fault is FaultKind.UNKNOWN_HOST_CALL


def test_host_function_validation():
    with pytest.raises(ValueError):
        HostFunction(1, "f", 6, lambda inv: 0)
    with pytest.raises(ValueError):
        HostFunction(-1, "f", 0, lambda inv: 0)


def test_binding_ids_are_stable():
    assert default_bindings().id_names() == {
        1: "saul_reg_find_nth",
        2: "saul_reg_read",
        3: "gcoap_resp_init",
        4: "coap_add_format",
        5: "coap_opt_finish",
        6: "coap_get_pdu",
        7: "fmt_s16_dfp",
        8: "store_local",
        9: "fetch_local",
        10: "store_global",
        11: "fetch_global",
    }


def test_bindings_reference_file_is_current():
    assert (ROOT / "bindings.txt").read_text() == render_reference()


def test_find_nth():
    inv = Invocation(policy=PolicyTable.with_stack(), sensors=[SimulatedSensor("t")])
    assert b.saul_reg_find_nth(inv, 1) != 0
    assert b.saul_reg_find_nth(inv, 2) == 0
    assert b.saul_reg_find_nth(inv, 0) == 0


def test_sensor_read_layout():
    policy = PolicyTable.with_stack()
    inv = Invocation(policy=policy, sensors=[SimulatedSensor("t", SensorMeasurement(1234, -2))])
    dest = policy.stack.end - 8
    assert b.saul_reg_read(inv, b.saul_reg_find_nth(inv, 1), dest) == 0
    raw = policy.read(dest, 8)
    assert raw == (1234).to_bytes(2, "little", signed=True) + bytes([0xFE]) + bytes(5)
    assert SensorMeasurement.unpack(raw) == SensorMeasurement(1234, -2)


def test_sensor_read_bad_handle():
    inv = Invocation(policy=PolicyTable.with_stack(), sensors=[SimulatedSensor("t")])
    assert b.saul_reg_read(inv, 0, 0) < 0


def test_sensor_read_into_read_only_region_faults():
    policy = PolicyTable.with_stack()
    ro = policy.map("ro", 8, READ_ONLY)
    program = verify_or_raise(
        assemble("mov r6, r1\nmov r1, 1\ncall saul_reg_find_nth\nmov r1, r0\nmov r2, r6\ncall saul_reg_read\nexit")
    )
    inv = Invocation(policy=policy, sensors=[SimulatedSensor("t", SensorMeasurement(1, 0))])
    out = execute(program, ro.base, policy, default_bindings(), invocation=inv)
    assert out.fault is FaultKind.MEMORY_ACCESS_DENIED
    assert bytes(ro.buffer) == bytes(8)


def test_failing_sensor_returns_io_error():
    inv = Invocation(policy=PolicyTable.with_stack(), sensors=[SimulatedSensor("t", failing=True)])
    assert b.saul_reg_read(inv, b.saul_reg_find_nth(inv, 1), inv.policy.stack.base) == b.ERR_IO


def test_coap_golden_bytes():
    inv, coap = coap_invocation()
    ctx = coap.ctx_addr
    assert b.gcoap_resp_init(inv, ctx, COAP_CODE_CONTENT) == 0
    assert b.coap_add_format(inv, ctx, 0) == 0
    assert b.coap_opt_finish(inv, ctx, COAP_OPT_FINISH_PAYLOAD) == 3
    assert bytes(coap.pdu_region.buffer[:3]) == bytes([0x45, 0x00, 0xFF])
    assert b.coap_get_pdu(inv, ctx) == coap.pdu_region.base + 3


def test_coap_out_of_order():
    inv, coap = coap_invocation()
    assert b.coap_opt_finish(inv, coap.ctx_addr, COAP_OPT_FINISH_PAYLOAD) < 0
    assert b.coap_get_pdu(inv, coap.ctx_addr) < 0
    assert b.gcoap_resp_init(inv, coap.ctx_addr + 1, COAP_CODE_CONTENT) < 0


def test_coap_finish_without_payload():
    inv, coap = coap_invocation()
    b.gcoap_resp_init(inv, coap.ctx_addr, COAP_CODE_CONTENT)
    b.coap_add_format(inv, coap.ctx_addr, 0)
    assert b.coap_opt_finish(inv, coap.ctx_addr, 0) == 2


@pytest.mark.parametrize(
    "value, scale, text",
    [(1234, -2, "12.34"), (-5, 0, "-5"), (7, 2, "700"), (0, 0, "0"), (-1234, -2, "-12.34"), (5, -3, "0.005"), (-5, -1, "-0.5")],
)
def test_format_dfp(value, scale, text):
    assert format_dfp(value, scale) == text


def test_fmt_s16_dfp_writes_through_policy():
    policy = counting_policy()
    inv = Invocation(policy=policy)
    buf = policy.stack.base
    assert b.fmt_s16_dfp(inv, buf, 1234, -2 & ((1 << 64) - 1)) == 5
    assert policy.read(buf, 5) == b"12.34"
    assert (buf, 5, True) in policy.log


def test_fmt_s16_dfp_rejects_absurd_scale():
    with pytest.raises(b.HostCallError):
        b.fmt_s16_dfp(Invocation(policy=PolicyTable.with_stack()), 0, 1, 100)


def test_kv_bindings_from_bytecode():
    store = KeyValueStore()
    policy = PolicyTable.with_stack()
    src = """
        mov r1, 5
        lddw r2, 0x123456789
        call store_global
        mov r1, 5
        mov r2, r10
        add r2, -8
        call fetch_global
        ldxdw r7, [r10-8]
        mov r1, 6
        mov r2, r10
        add r2, -16
        call fetch_local
        lsh r0, 40
        add r0, r7
        exit
    """
    program = verify_or_raise(assemble(src), 3)
    out = execute(program, 0, policy, default_bindings(), invocation=Invocation(policy, 3, store))
    assert out.return_value == 0x123456789  # fetch_local was absent -> 0
    assert store.get(Namespace.GLOBAL, 5) == (True, 0x123456789)


def test_store_full_returns_negative():
    store = KeyValueStore(capacity=1)
    store.put(Namespace.local(0), 1, 1)
    program = verify_or_raise(assemble("mov r1, 2\nmov r2, 1\ncall store_local\nexit"))
    policy = PolicyTable.with_stack()
    out = execute(program, 0, policy, default_bindings(), invocation=Invocation(policy, 0, store))
    assert out.return_value == b.ERR_NO_SPACE


def test_host_functions_never_bypass_policy():
    """Every byte a binding touches must pass through the policy table."""
    policy = counting_policy()
    src = """
        mov r1, 1
        call saul_reg_find_nth
        mov r1, r0
        mov r2, r10
        add r2, -8
        call saul_reg_read
        mov r1, 9
        mov r2, r10
        add r2, -16
        call fetch_local
        mov r1, r10
        add r1, -32
        mov r2, 1234
        mov r3, -2
        call fmt_s16_dfp
        exit
    """
    program = verify_or_raise(assemble(src))
    inv = Invocation(policy, 0, KeyValueStore(), [SimulatedSensor("t", SensorMeasurement(1234, -2))])
    out = execute(program, 0, policy, default_bindings(), invocation=inv)
    assert out.ok and out.host_calls == 4
    top = policy.stack.end
    assert (top - 8, 8, True) in policy.log
    assert (top - 16, 8, True) in policy.log
    assert (top - 32, 5, True) in policy.log
    assert bytes(policy.stack.buffer[-32:-27]) == b"12.34"
