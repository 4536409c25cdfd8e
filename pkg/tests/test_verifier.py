import random

import pytest

from rbpf import isa, programs
from rbpf.asm import assemble
from rbpf.bindings import default_bindings
from rbpf.isa import Instruction
from rbpf.verifier import (
    VerificationError,
    VerifiedProgram,
    VerifierReport,
    ViolationKind,
    check_jump_targets,
    verify,
    verify_or_raise,
)
from rbpf.vm import FaultKind, execute
from rbpf.sandbox import PolicyTable

from fuzzgen import random_memory_program

IDS = default_bindings().ids()


def kinds(result):
    assert isinstance(result, VerifierReport)
    return result.kinds()


def test_single_exit_is_valid():
    prog = verify(assemble("exit"), 0, IDS)
    assert isinstance(prog, VerifiedProgram)
    assert prog.slot_count == 1


def test_jump_past_end():
    report = verify(assemble("ja +5\nexit"), 0, IDS)
    assert [(v.slot, v.kind) for v in report.violations] == [(0, ViolationKind.JUMP_OUT_OF_BOUNDS)]


def test_frame_pointer_write():
    assert ViolationKind.READ_ONLY_REGISTER_WRITE in kinds(verify(assemble("mov r10, 0\nexit"), 0, IDS))


def test_negative_jump_before_start():
    insts = [Instruction(isa.OP_JA, offset=-2), Instruction(isa.OP_EXIT)]
    assert [v.kind for v in check_jump_targets(insts)] == [ViolationKind.JUMP_OUT_OF_BOUNDS]


def test_jump_to_last_slot_is_fine():
    insts = isa.decode_program(assemble("jeq r1, 0, +1\nmov r0, 1\nexit"))
    assert check_jump_targets(insts) == []


def test_jump_into_lddw_high_half():
    insts = [
        Instruction(isa.OP_JA, offset=1),
        *isa.lddw_pair(1, 7),
        Instruction(isa.OP_EXIT),
    ]
    assert [v.kind for v in check_jump_targets(insts)] == [ViolationKind.ILLEGAL_JUMP_TARGET]


@pytest.mark.parametrize(
    "data, kind",
    [
        (b"", ViolationKind.EMPTY_PROGRAM),
        (assemble("exit")[:7], ViolationKind.TRUNCATED),
        (bytes(8) + assemble("exit"), ViolationKind.DECODE_ERROR),
        (isa.encode(isa.lddw_pair(1, 1)[0]) + assemble("exit"), ViolationKind.UNPAIRED_LDDW),
        (assemble("mov r0, 0"), ViolationKind.MISSING_EXIT),
        (assemble("exit\nmov r0, 1"), ViolationKind.BAD_TERMINAL),
        (assemble("call 99\nexit"), ViolationKind.UNKNOWN_HOST_CALL),
        (isa.encode(Instruction(isa.OP_LE, 1, imm=8)) + assemble("exit"), ViolationKind.INVALID_IMMEDIATE),
    ],
)
def test_structural_violations(data, kind):
    assert kind in kinds(verify(data, 0, IDS))


def test_call_check_skipped_without_binding_set():
    assert isinstance(verify(assemble("call 99\nexit")), VerifiedProgram)


def test_report_collects_everything_in_slot_order():
    report = verify(assemble("mov r10, 1\nja +9\ncall 99\nmov r0, 0"), 0, IDS)
    slots = [v.slot for v in report.violations]
    assert slots == sorted(slots)
    assert {ViolationKind.READ_ONLY_REGISTER_WRITE, ViolationKind.JUMP_OUT_OF_BOUNDS, ViolationKind.UNKNOWN_HOST_CALL} <= report.kinds()


def test_report_render_format():
    text = verify(assemble("ja +5\nexit"), 0, IDS).render()
    assert text.startswith("slot 0: JumpOutOfBounds: ")


def test_verify_is_pure():
    data = assemble("mov r10, 1\nja +9\nexit")
    assert verify(data, 0, IDS).render() == verify(data, 0, IDS).render()


def test_verified_program_cannot_be_forged():
    with pytest.raises(TypeError):
        VerifiedProgram((Instruction(isa.OP_EXIT),), assemble("exit"), 0, object())


def test_verify_or_raise():
    with pytest.raises(VerificationError) as info:
        verify_or_raise(assemble("ja +5\nexit"))
    assert ViolationKind.JUMP_OUT_OF_BOUNDS in info.value.report.kinds()


@pytest.mark.parametrize("name", programs.NAMES)
def test_corpus_verifies(name):
    assert isinstance(verify(programs.bytecode(name), 0, IDS), VerifiedProgram)


def test_verified_programs_never_trip_runtime_jump_guard():
    rng = random.Random(11)
    bases = [PolicyTable.with_stack().stack.base]
    checked = 0
    for _ in range(10_000):
        insts = random_memory_program(rng, bases, rng.randint(1, 12))
        prog = verify(isa.encode_program(insts), 0, IDS)
        if not isinstance(prog, VerifiedProgram):
            continue
        checked += 1
        outcome = execute(prog, 0, PolicyTable.with_stack(), default_bindings(), fuel=200)
        assert outcome.fault is not FaultKind.JUMP_OUT_OF_BOUNDS
    assert checked == 10_000
