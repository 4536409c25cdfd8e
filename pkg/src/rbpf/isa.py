"""eBPF instruction encoding, decoding and disassembly.

Every instruction is one 8-byte little-endian slot::

    byte 0      opcode
    byte 1      dst register (low nibble), src register (high nibble)
    bytes 2-3   signed 16-bit offset
    bytes 4-7   signed 32-bit immediate

The 64-bit immediate load (``lddw``) spans two slots; the second slot has
opcode 0 and carries the upper 32 immediate bits.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

__all__ = [
    "SLOT_SIZE",
    "NUM_REGS",
    "FRAME_POINTER",
    "DecodeError",
    "EncodeError",
    "OpcodeClass",
    "Instruction",
    "classify",
    "decode",
    "encode",
    "decode_program",
    "encode_program",
    "lddw_pair",
    "disassemble",
    "format_instruction",
    "MNEMONICS",
    "OPCODES",
]

SLOT_SIZE = 8
NUM_REGS = 11
FRAME_POINTER = 10

_SLOT = struct.Struct("<BBhi")

# instruction classes (low three opcode bits)
CLS_LD = 0x00
CLS_LDX = 0x01
CLS_ST = 0x02
CLS_STX = 0x03
CLS_ALU = 0x04
CLS_JMP = 0x05
CLS_JMP32 = 0x06
CLS_ALU64 = 0x07

SRC_IMM = 0x00
SRC_REG = 0x08

MODE_IMM = 0x00
MODE_MEM = 0x60

SIZE_W = 0x00
SIZE_H = 0x08
SIZE_B = 0x10
SIZE_DW = 0x18

SIZE_BYTES = {SIZE_B: 1, SIZE_H: 2, SIZE_W: 4, SIZE_DW: 8}
SIZE_SUFFIX = {SIZE_B: "b", SIZE_H: "h", SIZE_W: "w", SIZE_DW: "dw"}

ALU_OPS = {
    "add": 0x00,
    "sub": 0x10,
    "mul": 0x20,
    "div": 0x30,
    "or": 0x40,
    "and": 0x50,
    "lsh": 0x60,
    "rsh": 0x70,
    "neg": 0x80,
    "mod": 0x90,
    "xor": 0xA0,
    "mov": 0xB0,
    "arsh": 0xC0,
}
ALU_END = 0xD0

JMP_OPS = {
    "ja": 0x00,
    "jeq": 0x10,
    "jgt": 0x20,
    "jge": 0x30,
    "jset": 0x40,
    "jne": 0x50,
    "jsgt": 0x60,
    "jsge": 0x70,
    "jlt": 0xA0,
    "jle": 0xB0,
    "jslt": 0xC0,
    "jsle": 0xD0,
}

OP_LDDW = CLS_LD | MODE_IMM | SIZE_DW  # 0x18
OP_CALL = CLS_JMP | 0x80  # 0x85
OP_EXIT = CLS_JMP | 0x90  # 0x95
OP_JA = CLS_JMP | JMP_OPS["ja"]  # 0x05
OP_LE = CLS_ALU | ALU_END | SRC_IMM  # 0xd4
OP_BE = CLS_ALU | ALU_END | SRC_REG  # 0xdc

ENDIAN_WIDTHS = (16, 32, 64)


class DecodeError(ValueError):
    """Bytes do not form a supported instruction."""

    def __init__(self, message: str, slot: int | None = None):
        self.slot = slot
        if slot is not None:
            message = f"slot {slot}: {message}"
        super().__init__(message)


class EncodeError(ValueError):
    """An instruction field does not fit its encoding."""


class OpcodeClass(enum.Enum):
    ALU64 = "alu64"
    ALU32 = "alu32"
    LOAD = "load"
    LOAD_REG = "load_reg"
    STORE_IMM = "store_imm"
    STORE_REG = "store_reg"
    JUMP = "jump"
    CALL = "call"
    EXIT = "exit"
    UNKNOWN = "unknown"


def _build_tables() -> tuple[dict[int, OpcodeClass], dict[int, str]]:
    classes: dict[int, OpcodeClass] = {}
    names: dict[int, str] = {}
    for name, code in ALU_OPS.items():
        for cls, suffix, klass in ((CLS_ALU64, "", OpcodeClass.ALU64), (CLS_ALU, "32", OpcodeClass.ALU32)):
            if name == "neg":
                classes[cls | code] = klass
                names[cls | code] = name + suffix
                continue
            for src in (SRC_IMM, SRC_REG):
                classes[cls | code | src] = klass
                names[cls | code | src] = name + suffix
    classes[OP_LE] = OpcodeClass.ALU32
    names[OP_LE] = "le"
    classes[OP_BE] = OpcodeClass.ALU32
    names[OP_BE] = "be"

    for size, suffix in SIZE_SUFFIX.items():
        classes[CLS_LDX | MODE_MEM | size] = OpcodeClass.LOAD_REG
        names[CLS_LDX | MODE_MEM | size] = "ldx" + suffix
        classes[CLS_ST | MODE_MEM | size] = OpcodeClass.STORE_IMM
        names[CLS_ST | MODE_MEM | size] = "st" + suffix
        classes[CLS_STX | MODE_MEM | size] = OpcodeClass.STORE_REG
        names[CLS_STX | MODE_MEM | size] = "stx" + suffix
    classes[OP_LDDW] = OpcodeClass.LOAD
    names[OP_LDDW] = "lddw"

    classes[OP_JA] = OpcodeClass.JUMP
    names[OP_JA] = "ja"
    for name, code in JMP_OPS.items():
        if name == "ja":
            continue
        for cls, suffix in ((CLS_JMP, ""), (CLS_JMP32, "32")):
            for src in (SRC_IMM, SRC_REG):
                classes[cls | code | src] = OpcodeClass.JUMP
                names[cls | code | src] = name + suffix
    classes[OP_CALL] = OpcodeClass.CALL
    names[OP_CALL] = "call"
    classes[OP_EXIT] = OpcodeClass.EXIT
    names[OP_EXIT] = "exit"
    return classes, names


_CLASSES, MNEMONICS = _build_tables()
OPCODES: frozenset[int] = frozenset(_CLASSES)


def classify(opcode: int) -> OpcodeClass:
    return _CLASSES.get(opcode, OpcodeClass.UNKNOWN)


def is_jump(opcode: int) -> bool:
    """Direct jumps carrying an offset (CALL and EXIT excluded)."""
    return _CLASSES.get(opcode) is OpcodeClass.JUMP


def is_conditional_jump(opcode: int) -> bool:
    return is_jump(opcode) and opcode != OP_JA


def writes_dst(opcode: int) -> bool:
    """True if executing the opcode assigns the dst register."""
    klass = _CLASSES.get(opcode)
    return klass in (OpcodeClass.ALU64, OpcodeClass.ALU32, OpcodeClass.LOAD, OpcodeClass.LOAD_REG)


def uses_src_reg(opcode: int) -> bool:
    klass = _CLASSES.get(opcode)
    if klass in (OpcodeClass.LOAD_REG, OpcodeClass.STORE_REG):
        return True
    if klass in (OpcodeClass.ALU64, OpcodeClass.ALU32, OpcodeClass.JUMP):
        return bool(opcode & SRC_REG) and opcode not in (OP_BE, OP_JA)
    return False


@dataclass(frozen=True, slots=True)
class Instruction:
    """One decoded 8-byte slot."""

    opcode: int
    dst: int = 0
    src: int = 0
    offset: int = 0
    imm: int = 0

    @property
    def klass(self) -> OpcodeClass:
        return classify(self.opcode)

    @property
    def mnemonic(self) -> str:
        return MNEMONICS.get(self.opcode, f"op{self.opcode:#04x}")

    def __str__(self) -> str:
        return format_instruction(self)


def _check_fields(inst: Instruction) -> None:
    if not 0 <= inst.opcode <= 0xFF:
        raise EncodeError(f"opcode {inst.opcode} does not fit in 8 bits")
    for name, reg in (("dst", inst.dst), ("src", inst.src)):
        if not 0 <= reg < NUM_REGS:
            raise EncodeError(f"{name} register r{reg} out of range r0-r10")
    if not -0x8000 <= inst.offset <= 0x7FFF:
        raise EncodeError(f"offset {inst.offset} does not fit in signed 16 bits")
    if not -0x8000_0000 <= inst.imm <= 0x7FFF_FFFF:
        raise EncodeError(f"immediate {inst.imm} does not fit in signed 32 bits")


def encode(inst: Instruction) -> bytes:
    """Encode one slot. The high half of an ``lddw`` pair has opcode 0."""
    _check_fields(inst)
    return _SLOT.pack(inst.opcode, inst.dst | (inst.src << 4), inst.offset, inst.imm)


def _unpack(raw: bytes, slot: int | None = None) -> Instruction:
    if len(raw) != SLOT_SIZE:
        raise DecodeError(f"truncated instruction: {len(raw)} bytes, expected 8", slot)
    opcode, regs, offset, imm = _SLOT.unpack(raw)
    dst, src = regs & 0x0F, regs >> 4
    if dst >= NUM_REGS:
        raise DecodeError(f"dst register r{dst} out of range", slot)
    if src >= NUM_REGS:
        raise DecodeError(f"src register r{src} out of range", slot)
    return Instruction(opcode, dst, src, offset, imm)


def decode(raw: bytes) -> Instruction:
    """Decode a single standalone slot."""
    inst = _unpack(bytes(raw))
    if inst.opcode not in _CLASSES:
        raise DecodeError(f"unknown opcode {inst.opcode:#04x}")
    return inst


def decode_program(data: bytes) -> list[Instruction]:
    """Decode a flat bytecode image into one Instruction per slot.

    The second slot of ``lddw`` is returned as an opcode-0 Instruction whose
    ``imm`` holds the upper 32 bits.
    """
    data = bytes(data)
    if len(data) % SLOT_SIZE:
        raise DecodeError(f"truncated program: {len(data)} bytes is not a multiple of 8", len(data) // SLOT_SIZE)
    n = len(data) // SLOT_SIZE
    out: list[Instruction] = []
    pc = 0
    while pc < n:
        inst = _unpack(data[pc * 8 : pc * 8 + 8], pc)
        if inst.opcode not in _CLASSES:
            raise DecodeError(f"unknown opcode {inst.opcode:#04x}", pc)
        out.append(inst)
        if inst.opcode == OP_LDDW:
            if pc + 1 >= n:
                raise DecodeError("lddw missing its second slot", pc)
            hi = _unpack(data[pc * 8 + 8 : pc * 8 + 16], pc + 1)
            if hi.opcode or hi.dst or hi.src or hi.offset:
                raise DecodeError("malformed lddw second slot", pc + 1)
            out.append(hi)
            pc += 2
        else:
            pc += 1
    return out


def encode_program(instructions: Sequence[Instruction]) -> bytes:
    return b"".join(encode(i) for i in instructions)


def lddw_pair(dst: int, value: int) -> tuple[Instruction, Instruction]:
    """The two slots loading a 64-bit constant into ``dst``."""
    value &= 0xFFFF_FFFF_FFFF_FFFF
    lo, hi = value & 0xFFFF_FFFF, value >> 32
    return (
        Instruction(OP_LDDW, dst, 0, 0, _s32(lo)),
        Instruction(0, 0, 0, 0, _s32(hi)),
    )


def _s32(value: int) -> int:
    return value - (1 << 32) if value & 0x8000_0000 else value


def _mem(reg: int, offset: int) -> str:
    if offset < 0:
        return f"[r{reg}-{-offset}]"
    return f"[r{reg}+{offset}]"


def _rel(offset: int) -> str:
    return f"+{offset}" if offset >= 0 else str(offset)


def format_instruction(
    inst: Instruction,
    wide_imm: int | None = None,
    call_names: Mapping[int, str] | None = None,
) -> str:
    """Render one instruction in assembler syntax.

    ``wide_imm`` is the full 64-bit value when ``inst`` is an ``lddw``.
    """
    op = inst.opcode
    name = MNEMONICS.get(op)
    klass = classify(op)
    if name is None:
        raise DecodeError(f"unknown opcode {op:#04x}")
    if klass is OpcodeClass.EXIT:
        return "exit"
    if klass is OpcodeClass.CALL:
        if call_names and inst.imm in call_names:
            return f"call {call_names[inst.imm]}"
        return f"call {inst.imm}"
    if klass is OpcodeClass.LOAD:
        value = (inst.imm & 0xFFFF_FFFF) if wide_imm is None else wide_imm
        return f"lddw r{inst.dst}, {value:#x}"
    if klass is OpcodeClass.LOAD_REG:
        return f"{name} r{inst.dst}, {_mem(inst.src, inst.offset)}"
    if klass is OpcodeClass.STORE_IMM:
        return f"{name} {_mem(inst.dst, inst.offset)}, {inst.imm}"
    if klass is OpcodeClass.STORE_REG:
        return f"{name} {_mem(inst.dst, inst.offset)}, r{inst.src}"
    if op in (OP_LE, OP_BE):
        return f"{name}{inst.imm} r{inst.dst}"
    if klass in (OpcodeClass.ALU64, OpcodeClass.ALU32):
        if name.startswith("neg"):
            return f"{name} r{inst.dst}"
        rhs = f"r{inst.src}" if op & SRC_REG else str(inst.imm)
        return f"{name} r{inst.dst}, {rhs}"
    if op == OP_JA:
        return f"ja {_rel(inst.offset)}"
    rhs = f"r{inst.src}" if op & SRC_REG else str(inst.imm)
    return f"{name} r{inst.dst}, {rhs}, {_rel(inst.offset)}"


def disassemble(data: bytes, call_names: Mapping[int, str] | None = None) -> list[str]:
    """One text line per instruction; an ``lddw`` pair yields a single line."""
    insts = decode_program(data)
    lines = []
    pc = 0
    while pc < len(insts):
        inst = insts[pc]
        if inst.opcode == OP_LDDW:
            wide = (inst.imm & 0xFFFF_FFFF) | ((insts[pc + 1].imm & 0xFFFF_FFFF) << 32)
            lines.append(format_instruction(inst, wide))
            pc += 2
        else:
            lines.append(format_instruction(inst, call_names=call_names))
            pc += 1
    return lines
