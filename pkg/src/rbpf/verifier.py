"""Preflight structural validation of bytecode.

``verify`` checks everything that can be known without running the program:
slot framing, decodability, ``lddw`` pairing, jump targets, the terminal
instruction, frame-pointer writes and host-call ids. It collects every
violation rather than stopping at the first.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable

from . import isa
from .isa import Instruction, OpcodeClass

__all__ = [
    "ViolationKind",
    "Violation",
    "VerifierReport",
    "VerificationError",
    "VerifiedProgram",
    "verify",
    "verify_or_raise",
    "check_jump_targets",
]


class ViolationKind(enum.Enum):
    EMPTY_PROGRAM = "EmptyProgram"
    TRUNCATED = "Truncated"
    DECODE_ERROR = "DecodeError"
    UNPAIRED_LDDW = "UnpairedLddw"
    JUMP_OUT_OF_BOUNDS = "JumpOutOfBounds"
    ILLEGAL_JUMP_TARGET = "IllegalJumpTarget"
    MISSING_EXIT = "MissingExit"
    BAD_TERMINAL = "BadTerminal"
    READ_ONLY_REGISTER_WRITE = "ReadOnlyRegisterWrite"
    UNKNOWN_HOST_CALL = "UnknownHostCall"
    INVALID_IMMEDIATE = "InvalidImmediate"


@dataclass(frozen=True)
class Violation:
    slot: int
    kind: ViolationKind
    message: str

    def __str__(self) -> str:
        return f"slot {self.slot}: {self.kind.value}: {self.message}"


@dataclass
class VerifierReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> set[ViolationKind]:
        return {v.kind for v in self.violations}

    def render(self) -> str:
        return "\n".join(str(v) for v in self.violations)


class VerificationError(ValueError):
    def __init__(self, report: VerifierReport):
        self.report = report
        super().__init__(report.render() or "verification failed")


_TOKEN = object()


@dataclass(frozen=True, eq=False)
class VerifiedProgram:
    """Bytecode that passed :func:`verify`. Do not construct directly."""

    instructions: tuple[Instruction, ...]
    bytecode: bytes
    script_id: int = 0
    _token: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self._token is not _TOKEN:
            raise TypeError("VerifiedProgram instances are only created by verify()")

    @property
    def slot_count(self) -> int:
        return len(self.instructions)

    @property
    def size(self) -> int:
        return len(self.bytecode)


def _decode_slots(data: bytes, report: VerifierReport) -> list[Instruction | None]:
    """Decode each slot independently; failures become ``None`` plus a violation."""
    n = len(data) // isa.SLOT_SIZE
    slots: list[Instruction | None] = []
    pc = 0
    while pc < n:
        raw = data[pc * 8 : pc * 8 + 8]
        opcode, regs, offset, imm = struct.unpack("<BBhi", raw)
        dst, src = regs & 0x0F, regs >> 4
        if dst >= isa.NUM_REGS or src >= isa.NUM_REGS:
            report.violations.append(
                Violation(pc, ViolationKind.DECODE_ERROR, f"register index out of range (dst={dst}, src={src})")
            )
            slots.append(None)
            pc += 1
            continue
        if isa.classify(opcode) is OpcodeClass.UNKNOWN:
            report.violations.append(Violation(pc, ViolationKind.DECODE_ERROR, f"unknown opcode {opcode:#04x}"))
            slots.append(None)
            pc += 1
            continue
        inst = Instruction(opcode, dst, src, offset, imm)
        slots.append(inst)
        pc += 1
        if opcode == isa.OP_LDDW:
            if pc >= n:
                report.violations.append(
                    Violation(pc - 1, ViolationKind.UNPAIRED_LDDW, "lddw at end of program has no second slot")
                )
                break
            hop, hregs, hoff, himm = struct.unpack("<BBhi", data[pc * 8 : pc * 8 + 8])
            if hop or hregs or hoff:
                report.violations.append(
                    Violation(pc, ViolationKind.UNPAIRED_LDDW, "second lddw slot must be zero except its immediate")
                )
            slots.append(Instruction(0, 0, 0, 0, himm))
            pc += 1
    return slots


def _lddw_high_slots(instructions: Iterable[Instruction | None]) -> set[int]:
    high = set()
    insts = list(instructions)
    pc = 0
    while pc < len(insts):
        inst = insts[pc]
        if inst is not None and inst.opcode == isa.OP_LDDW:
            high.add(pc + 1)
            pc += 2
        else:
            pc += 1
    return high


def check_jump_targets(instructions: list[Instruction | None]) -> list[Violation]:
    """Violations for jumps leaving the program or landing inside an ``lddw``."""
    n = len(instructions)
    high = _lddw_high_slots(instructions)
    out = []
    for pc, inst in enumerate(instructions):
        if inst is None or pc in high or not isa.is_jump(inst.opcode):
            continue
        target = pc + 1 + inst.offset
        if not 0 <= target < n:
            out.append(
                Violation(pc, ViolationKind.JUMP_OUT_OF_BOUNDS, f"target slot {target} outside [0, {n})")
            )
        elif target in high:
            out.append(
                Violation(pc, ViolationKind.ILLEGAL_JUMP_TARGET, f"target slot {target} is the second half of an lddw")
            )
    return out


def verify(
    bytecode: bytes,
    script_id: int = 0,
    binding_ids: Iterable[int] | None = None,
) -> VerifiedProgram | VerifierReport:
    """Validate ``bytecode``; return a VerifiedProgram or a report of every violation.

    ``binding_ids=None`` skips the host-call check; pass an explicit set to
    enforce it (the usual case).
    """
    data = bytes(bytecode)
    report = VerifierReport()
    if not data:
        report.violations.append(Violation(0, ViolationKind.EMPTY_PROGRAM, "program has no instructions"))
        return report
    if len(data) % isa.SLOT_SIZE:
        report.violations.append(
            Violation(
                len(data) // isa.SLOT_SIZE,
                ViolationKind.TRUNCATED,
                f"length {len(data)} is not a multiple of 8",
            )
        )
        data_slots = data[: len(data) - len(data) % isa.SLOT_SIZE]
    else:
        data_slots = data
    if not 0 <= script_id <= 0xFFFF_FFFF:
        raise ValueError(f"script id {script_id} is not an unsigned 32-bit value")

    slots = _decode_slots(data_slots, report)
    report.violations.extend(check_jump_targets(slots))
    high = _lddw_high_slots(slots)
    allowed_calls = None if binding_ids is None else set(binding_ids)

    has_exit = False
    for pc, inst in enumerate(slots):
        if inst is None or pc in high:
            continue
        op = inst.opcode
        if op == isa.OP_EXIT:
            has_exit = True
        if isa.writes_dst(op) and inst.dst == isa.FRAME_POINTER:
            report.violations.append(
                Violation(pc, ViolationKind.READ_ONLY_REGISTER_WRITE, "r10 is the read-only frame pointer")
            )
        if op == isa.OP_CALL and allowed_calls is not None and (inst.imm & 0xFFFF_FFFF) not in allowed_calls:
            report.violations.append(
                Violation(pc, ViolationKind.UNKNOWN_HOST_CALL, f"no binding with id {inst.imm & 0xFFFF_FFFF}")
            )
        if op in (isa.OP_LE, isa.OP_BE) and inst.imm not in isa.ENDIAN_WIDTHS:
            report.violations.append(
                Violation(pc, ViolationKind.INVALID_IMMEDIATE, f"byte swap width {inst.imm} not 16, 32 or 64")
            )

    if slots and not has_exit:
        report.violations.append(Violation(len(slots) - 1, ViolationKind.MISSING_EXIT, "program has no exit"))
    if slots:
        last = len(slots) - 1
        final = slots[last]
        if last in high:
            report.violations.append(
                Violation(last, ViolationKind.BAD_TERMINAL, "program ends inside an lddw")
            )
        elif final is not None and final.opcode not in (isa.OP_EXIT, isa.OP_JA):
            report.violations.append(
                Violation(last, ViolationKind.BAD_TERMINAL, f"final instruction {final.mnemonic} may fall through")
            )

    if not report.ok:
        report.violations.sort(key=lambda v: v.slot)
        return report
    return VerifiedProgram(tuple(slots), data, script_id, _TOKEN)


def verify_or_raise(bytecode: bytes, script_id: int = 0, binding_ids: Iterable[int] | None = None) -> VerifiedProgram:
    result = verify(bytecode, script_id, binding_ids)
    if isinstance(result, VerifierReport):
        raise VerificationError(result)
    return result
