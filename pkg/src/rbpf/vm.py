"""The interpreter loop.

A verified program is turned into a list of handler closures, one per slot,
each applying its instruction to the register file and returning the next
slot index. The dispatch loop is a plain ``for`` over the fuel budget, so
fuel accounting costs nothing extra per instruction. EXIT and all faults
leave the loop by exception.

Registers hold unsigned 64-bit values internally; signed views are taken
where an instruction asks for them, and the return value is reported
signed.
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass, field
from typing import Callable

from . import isa
from .bindings import BindingTable, Invocation
from .isa import Instruction
from .sandbox import STACK_SIZE, MemoryFault, PolicyTable
from .verifier import VerifiedProgram

__all__ = [
    "DEFAULT_FUEL",
    "Status",
    "FaultKind",
    "VmFault",
    "OutOfFuel",
    "ExecOutcome",
    "VmState",
    "Step",
    "RunStats",
    "execute",
    "step",
    "run_stats",
    "timed_execute",
]

DEFAULT_FUEL = 100_000

M64 = 0xFFFF_FFFF_FFFF_FFFF
M32 = 0xFFFF_FFFF
SIGN64 = 1 << 63
SIGN32 = 1 << 31


class Status(enum.Enum):
    OK = "Ok"
    FAULT = "Fault"
    FUEL_EXHAUSTED = "FuelExhausted"


class FaultKind(enum.Enum):
    MEMORY_ACCESS_DENIED = "MemoryAccessDenied"
    JUMP_OUT_OF_BOUNDS = "JumpOutOfBounds"
    DIVISION_BY_ZERO = "DivisionByZero"
    UNKNOWN_HOST_CALL = "UnknownHostCall"
    HOST_CALL_FAILED = "HostCallFailed"
    INVALID_INSTRUCTION = "InvalidInstruction"


class VmFault(Exception):
    def __init__(self, kind: FaultKind, detail: str = "", pc: int | None = None, cause: Exception | None = None):
        self.kind = kind
        self.detail = detail
        self.pc = pc
        self.cause = cause
        where = f" at pc {pc}" if pc is not None else ""
        super().__init__(f"{kind.value}{where}: {detail}" if detail else f"{kind.value}{where}")


class OutOfFuel(Exception):
    """Raised by :func:`step` when the fuel budget is already spent."""


class _Exit(Exception):
    pass


_EXIT = _Exit()


@dataclass(frozen=True)
class ExecOutcome:
    status: Status
    return_value: int
    instructions_executed: int
    host_calls: int
    pc: int
    fault: FaultKind | None = None
    detail: str = ""
    # the denied access for MemoryAccessDenied faults: (addr, size, kind)
    access: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def describe(self) -> str:
        if self.status is Status.FAULT:
            return f"Fault({self.fault.value}, pc={self.pc})"
        if self.status is Status.FUEL_EXHAUSTED:
            return f"FuelExhausted(pc={self.pc})"
        return "Ok"


class Step(enum.Enum):
    CONTINUE = "continue"
    EXIT = "exit"


def _signed64(v: int) -> int:
    return v - (1 << 64) if v & SIGN64 else v


def _signed32(v: int) -> int:
    v &= M32
    return v - (1 << 32) if v & SIGN32 else v


@dataclass
class VmState:
    """Register file, program counter, stack and fuel for one invocation."""

    program: VerifiedProgram
    policy: PolicyTable
    bindings: BindingTable
    invocation: Invocation
    fuel_remaining: int = DEFAULT_FUEL
    regs: list[int] = field(default_factory=lambda: [0] * isa.NUM_REGS)
    pc: int = 0
    instructions_executed: int = 0
    host_calls: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def setup(
        cls,
        program: VerifiedProgram,
        context_arg: int,
        policy: PolicyTable,
        bindings: BindingTable,
        fuel: int = DEFAULT_FUEL,
        invocation: Invocation | None = None,
    ) -> "VmState":
        try:
            stack = policy.stack
        except KeyError:
            raise ValueError("policy table has no stack region") from None
        if stack.length != STACK_SIZE or not (stack.flags.readable and stack.flags.writable):
            raise ValueError("stack region must be 512 bytes, read/write")
        if fuel <= 0:
            raise ValueError("fuel must be positive")
        memoryview(stack.buffer).cast("B")[:STACK_SIZE] = bytes(STACK_SIZE)
        if invocation is None:
            invocation = Invocation(policy=policy, script_id=program.script_id)
        state = cls(program, policy, bindings, invocation, fuel)
        state.regs[1] = context_arg & M64
        state.regs[isa.FRAME_POINTER] = stack.end
        return state

    @property
    def stack(self):
        return self.policy.stack.buffer

    def signed_regs(self) -> list[int]:
        return [_signed64(r) for r in self.regs]


# ---------------------------------------------------------------------------
# handler construction

_ALU64: dict[int, Callable[[int, int], int]] = {
    0x00: lambda a, b: (a + b) & M64,
    0x10: lambda a, b: (a - b) & M64,
    0x20: lambda a, b: (a * b) & M64,
    0x30: lambda a, b: a // b,
    0x40: lambda a, b: a | b,
    0x50: lambda a, b: a & b,
    0x60: lambda a, b: (a << (b & 63)) & M64,
    0x70: lambda a, b: a >> (b & 63),
    0x90: lambda a, b: a % b,
    0xA0: lambda a, b: a ^ b,
    0xB0: lambda a, b: b,
    0xC0: lambda a, b: (_signed64(a) >> (b & 63)) & M64,
}

_ALU32: dict[int, Callable[[int, int], int]] = {
    0x00: lambda a, b: (a + b) & M32,
    0x10: lambda a, b: (a - b) & M32,
    0x20: lambda a, b: (a * b) & M32,
    0x30: lambda a, b: (a & M32) // (b & M32),
    0x40: lambda a, b: (a | b) & M32,
    0x50: lambda a, b: a & b & M32,
    0x60: lambda a, b: (a << (b & 31)) & M32,
    0x70: lambda a, b: (a & M32) >> (b & 31),
    0x90: lambda a, b: (a & M32) % (b & M32),
    0xA0: lambda a, b: (a ^ b) & M32,
    0xB0: lambda a, b: b & M32,
    0xC0: lambda a, b: (_signed32(a) >> (b & 31)) & M32,
}

_JMP64: dict[int, Callable[[int, int], bool]] = {
    0x10: lambda a, b: a == b,
    0x20: lambda a, b: a > b,
    0x30: lambda a, b: a >= b,
    0x40: lambda a, b: bool(a & b),
    0x50: lambda a, b: a != b,
    0x60: lambda a, b: _signed64(a) > _signed64(b),
    0x70: lambda a, b: _signed64(a) >= _signed64(b),
    0xA0: lambda a, b: a < b,
    0xB0: lambda a, b: a <= b,
    0xC0: lambda a, b: _signed64(a) < _signed64(b),
    0xD0: lambda a, b: _signed64(a) <= _signed64(b),
}

_JMP32: dict[int, Callable[[int, int], bool]] = {
    0x10: lambda a, b: a & M32 == b & M32,
    0x20: lambda a, b: a & M32 > b & M32,
    0x30: lambda a, b: a & M32 >= b & M32,
    0x40: lambda a, b: bool(a & b & M32),
    0x50: lambda a, b: a & M32 != b & M32,
    0x60: lambda a, b: _signed32(a) > _signed32(b),
    0x70: lambda a, b: _signed32(a) >= _signed32(b),
    0xA0: lambda a, b: a & M32 < b & M32,
    0xB0: lambda a, b: a & M32 <= b & M32,
    0xC0: lambda a, b: _signed32(a) < _signed32(b),
    0xD0: lambda a, b: _signed32(a) <= _signed32(b),
}

_UNSIGNED = {1: struct.Struct("<B"), 2: struct.Struct("<H"), 4: struct.Struct("<I"), 8: struct.Struct("<Q")}


def _bswap(value: int, width: int) -> int:
    return int.from_bytes((value & ((1 << width) - 1)).to_bytes(width // 8, "little"), "big")


def _faulting(kind: FaultKind, detail: str):
    def h():
        raise VmFault(kind, detail)

    return h


def _make_handler(pc: int, insts: list[Instruction], state: VmState):
    """Build the closure executing the instruction at slot ``pc``."""
    inst = insts[pc]
    op, dst, src, off, imm = inst.opcode, inst.dst, inst.src, inst.offset, inst.imm
    regs = state.regs
    n = len(insts)
    nxt = pc + 1
    klass = isa.classify(op)
    resolve = state.policy.resolve

    if klass is isa.OpcodeClass.ALU64 or klass is isa.OpcodeClass.ALU32:
        if op == isa.OP_LE or op == isa.OP_BE:
            if imm not in isa.ENDIAN_WIDTHS:
                return _faulting(FaultKind.INVALID_INSTRUCTION, f"byte swap width {imm}")
            mask = (1 << imm) - 1
            if op == isa.OP_LE:
                def h():
                    regs[dst] &= mask
                    return nxt
            else:
                width = imm

                def h():
                    regs[dst] = _bswap(regs[dst], width)
                    return nxt
            return h

        code = op & 0xF0
        wide = klass is isa.OpcodeClass.ALU64
        if code == 0x80:
            if wide:
                def h():
                    regs[dst] = -regs[dst] & M64
                    return nxt
            else:
                def h():
                    regs[dst] = -regs[dst] & M32
                    return nxt
            return h

        fn = (_ALU64 if wide else _ALU32)[code]
        if op & isa.SRC_REG:
            if code == 0xB0 and wide:
                def h():
                    regs[dst] = regs[src]
                    return nxt
            elif code == 0x00 and wide:
                def h():
                    regs[dst] = (regs[dst] + regs[src]) & M64
                    return nxt
            else:
                def h():
                    regs[dst] = fn(regs[dst], regs[src])
                    return nxt
            return h

        k = imm & M64 if wide else imm & M32
        if code in (0x30, 0x90) and k == 0:
            return _faulting(FaultKind.DIVISION_BY_ZERO, "division by immediate zero")
        if code == 0xB0:
            def h():
                regs[dst] = k
                return nxt
        elif code in (0x00, 0x10) and wide:
            if code == 0x10:
                k = -k & M64

            def h():
                regs[dst] = (regs[dst] + k) & M64
                return nxt
        elif code == 0x60 and wide:
            shift = k & 63

            def h():
                regs[dst] = (regs[dst] << shift) & M64
                return nxt
        elif code == 0x70 and wide:
            shift = k & 63

            def h():
                regs[dst] >>= shift
                return nxt
        elif code == 0x40 and wide:
            def h():
                regs[dst] |= k
                return nxt
        elif code == 0x50 and wide:
            def h():
                regs[dst] &= k
                return nxt
        elif code == 0x90 and wide:
            def h():
                regs[dst] %= k
                return nxt
        else:
            def h():
                regs[dst] = fn(regs[dst], k)
                return nxt
        return h

    if klass is isa.OpcodeClass.LOAD_REG:
        size = isa.SIZE_BYTES[op & 0x18]
        unpack = _UNSIGNED[size].unpack_from

        def h():
            buf, o = resolve((regs[src] + off) & M64, size, False)
            regs[dst] = unpack(buf, o)[0]
            return nxt
        return h

    if klass is isa.OpcodeClass.STORE_REG:
        size = isa.SIZE_BYTES[op & 0x18]
        pack = _UNSIGNED[size].pack_into
        mask = (1 << (8 * size)) - 1

        def h():
            buf, o = resolve((regs[dst] + off) & M64, size, True)
            pack(buf, o, regs[src] & mask)
            return nxt
        return h

    if klass is isa.OpcodeClass.STORE_IMM:
        size = isa.SIZE_BYTES[op & 0x18]
        pack = _UNSIGNED[size].pack_into
        value = imm & ((1 << (8 * size)) - 1)

        def h():
            buf, o = resolve((regs[dst] + off) & M64, size, True)
            pack(buf, o, value)
            return nxt
        return h

    if klass is isa.OpcodeClass.LOAD:
        if pc + 1 >= n:
            return _faulting(FaultKind.INVALID_INSTRUCTION, "lddw without second slot")
        value = (imm & M32) | ((insts[pc + 1].imm & M32) << 32)
        after = pc + 2

        def h():
            regs[dst] = value
            return after
        return h

    if klass is isa.OpcodeClass.JUMP:
        target = pc + 1 + off
        in_bounds = 0 <= target < n
        if op == isa.OP_JA:
            if not in_bounds:
                return _faulting(FaultKind.JUMP_OUT_OF_BOUNDS, f"jump to slot {target}")

            def h():
                return target
            return h
        cmp = (_JMP64 if op & 0x07 == isa.CLS_JMP else _JMP32)[op & 0xF0]
        if in_bounds:
            if op & isa.SRC_REG:
                def h():
                    return target if cmp(regs[dst], regs[src]) else nxt
                return h
            k = imm & M64
            cond = op & 0xF0
            if op & 0x07 == isa.CLS_JMP and cond == 0x10:
                def h():
                    return target if regs[dst] == k else nxt
            elif op & 0x07 == isa.CLS_JMP and cond == 0x50:
                def h():
                    return target if regs[dst] != k else nxt
            elif op & 0x07 == isa.CLS_JMP and cond == 0x20:
                def h():
                    return target if regs[dst] > k else nxt
            elif op & 0x07 == isa.CLS_JMP and cond == 0xA0:
                def h():
                    return target if regs[dst] < k else nxt
            else:
                def h():
                    return target if cmp(regs[dst], k) else nxt
            return h

        rhs = (lambda: regs[src]) if op & isa.SRC_REG else (lambda k=imm & M64: k)

        def h():
            if cmp(regs[dst], rhs()):
                raise VmFault(FaultKind.JUMP_OUT_OF_BOUNDS, f"jump to slot {target}")
            return nxt
        return h

    if klass is isa.OpcodeClass.CALL:
        fn = state.bindings.get(imm & M32)
        if fn is None:
            return _faulting(FaultKind.UNKNOWN_HOST_CALL, f"no binding with id {imm & M32}")
        behavior, arity, name = fn.behavior, fn.arity, fn.name
        inv = state.invocation
        counter = state.host_calls

        def h():
            counter[0] += 1
            try:
                result = behavior(inv, *regs[1 : 1 + arity])
            except (MemoryFault, VmFault):
                raise
            except Exception as exc:
                raise VmFault(FaultKind.HOST_CALL_FAILED, f"{name}: {exc}", cause=exc) from exc
            regs[0] = int(result) & M64
            return nxt
        return h

    if klass is isa.OpcodeClass.EXIT:
        def h():
            raise _EXIT
        return h

    return _faulting(FaultKind.INVALID_INSTRUCTION, f"opcode {op:#04x} is not executable")


def _compile(state: VmState) -> list:
    insts = state.program.instructions
    code = [_make_handler(pc, insts, state) for pc in range(len(insts))]
    # falling off the end lands here
    code.append(_faulting(FaultKind.JUMP_OUT_OF_BOUNDS, "execution ran past the last slot"))
    return code


def _outcome_from_exception(exc: BaseException, state: VmState, executed: int, pc: int) -> ExecOutcome:
    access = None
    if isinstance(exc, MemoryFault):
        kind, detail = FaultKind.MEMORY_ACCESS_DENIED, str(exc)
        access = (exc.addr, exc.size, exc.kind)
    elif isinstance(exc, ZeroDivisionError):
        kind, detail = FaultKind.DIVISION_BY_ZERO, "division by zero"
    elif isinstance(exc, VmFault):
        kind, detail = exc.kind, exc.detail
        if isinstance(exc.cause, MemoryFault):
            access = (exc.cause.addr, exc.cause.size, exc.cause.kind)
    else:
        raise exc
    return ExecOutcome(
        Status.FAULT,
        _signed64(state.regs[0]),
        executed,
        state.host_calls[0],
        pc,
        fault=kind,
        detail=detail,
        access=access,
    )


def _run(state: VmState, trace: Callable[[int, list[int]], None] | None) -> ExecOutcome:
    code = _compile(state)
    pc = state.pc
    fuel = state.fuel_remaining
    slot_count = state.program.slot_count
    i = -1
    try:
        if trace is None:
            for i in range(fuel):
                pc = code[pc]()
        else:
            for i in range(fuel):
                if not 0 <= pc < slot_count:
                    raise VmFault(FaultKind.JUMP_OUT_OF_BOUNDS, f"pc {pc} outside program")
                trace(pc, state.regs)
                pc = code[pc]()
    except _Exit:
        executed = i + 1
        state.pc, state.instructions_executed = pc, executed
        state.fuel_remaining -= executed
        return ExecOutcome(Status.OK, _signed64(state.regs[0]), executed, state.host_calls[0], pc)
    except (MemoryFault, ZeroDivisionError, VmFault) as exc:
        executed = i + 1
        state.pc, state.instructions_executed = pc, executed
        state.fuel_remaining -= executed
        return _outcome_from_exception(exc, state, executed, pc)
    state.pc, state.instructions_executed = pc, fuel
    state.fuel_remaining = 0
    return ExecOutcome(Status.FUEL_EXHAUSTED, _signed64(state.regs[0]), fuel, state.host_calls[0], pc)


def execute(
    program: VerifiedProgram,
    context_arg: int,
    policy: PolicyTable,
    bindings: BindingTable,
    fuel: int = DEFAULT_FUEL,
    *,
    invocation: Invocation | None = None,
    trace: Callable[[int, list[int]], None] | None = None,
) -> ExecOutcome:
    """Run ``program`` until EXIT, a fault, or the fuel budget runs out.

    r1 receives ``context_arg`` and r10 the top of the stack region; every
    other register starts at zero. ``trace(pc, regs)`` is called before each
    instruction when given (slow; for debugging and tests).
    """
    state = VmState.setup(program, context_arg, policy, bindings, fuel, invocation)
    return _run(state, trace)


def step(state: VmState, inst: Instruction | None = None) -> Step:
    """Execute a single instruction against ``state``.

    ``inst`` defaults to the instruction at ``state.pc``. Faults raise
    :class:`VmFault` with ``pc`` set; fuel exhaustion also raises, with no
    state change.
    """
    insts = state.program.instructions
    if inst is not None and inst != insts[state.pc]:
        insts = list(insts)
        insts[state.pc] = inst
    pc = state.pc
    if not 0 <= pc < state.program.slot_count:
        raise VmFault(FaultKind.JUMP_OUT_OF_BOUNDS, f"pc {pc} outside program", pc)
    if state.fuel_remaining <= 0:
        raise OutOfFuel(f"fuel exhausted at pc {pc}")
    handler = _make_handler(pc, insts, state)
    state.fuel_remaining -= 1
    state.instructions_executed += 1
    try:
        nxt = handler()
    except _Exit:
        return Step.EXIT
    except MemoryFault as exc:
        raise VmFault(FaultKind.MEMORY_ACCESS_DENIED, str(exc), pc, exc) from exc
    except ZeroDivisionError as exc:
        raise VmFault(FaultKind.DIVISION_BY_ZERO, "division by zero", pc, exc) from exc
    except VmFault as exc:
        exc.pc = pc
        raise
    if not 0 <= nxt < state.program.slot_count:
        raise VmFault(FaultKind.JUMP_OUT_OF_BOUNDS, "execution ran past the last slot", pc)
    state.pc = nxt
    return Step.CONTINUE


@dataclass(frozen=True)
class RunStats:
    instructions: int
    wall_time: float
    instructions_per_second: float

    def __str__(self) -> str:
        return (
            f"{self.instructions} instructions in {self.wall_time * 1e6:.0f} us "
            f"({self.instructions_per_second / 1e6:.2f}M instr/s)"
        )


def run_stats(outcome: ExecOutcome | int, wall_time: float) -> RunStats:
    executed = outcome if isinstance(outcome, int) else outcome.instructions_executed
    if executed == 0 or wall_time <= 0:
        return RunStats(executed, wall_time, 0.0)
    return RunStats(executed, wall_time, executed / wall_time)


def timed_execute(*args, **kwargs) -> tuple[ExecOutcome, float]:
    """:func:`execute` plus its monotonic wall time in seconds."""
    start = time.perf_counter()
    outcome = execute(*args, **kwargs)
    return outcome, time.perf_counter() - start
