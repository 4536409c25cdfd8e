"""Text assembler for the supported eBPF subset.

Syntax, one instruction per line::

    loop:                       ; labels end with ':'
        ldxh r7, [r2+0]
        add r4, r7
        mod r4, 65535
        jne r6, 0, loop         ; label, or +N / -N slots relative
        lddw r1, 0x1122334455667788
        call fmt_s16_dfp        ; binding name or numeric id
        exit

ALU mnemonics take a ``32`` suffix for the 32-bit variant (``64`` is
accepted and ignored); conditional jumps take ``32`` for JMP32 compares.
Everything after ``;`` or ``#`` is a comment. The output of
:func:`rbpf.isa.disassemble` assembles back to the same bytes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from . import isa
from .isa import Instruction

__all__ = ["AsmError", "assemble", "assemble_instructions"]


class AsmError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


_LABEL = re.compile(r"^([A-Za-z_.][\w.]*)\s*:")
_REG = re.compile(r"^r(\d+)$")
_MEM = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(\w+))?\s*\]$")
_SIZES = {"b": isa.SIZE_B, "h": isa.SIZE_H, "w": isa.SIZE_W, "dw": isa.SIZE_DW}


@dataclass
class _Pending:
    line: int
    mnemonic: str
    operands: list[str]
    slot: int


def _strip(text: str) -> str:
    for marker in (";", "#"):
        pos = text.find(marker)
        if pos >= 0:
            text = text[:pos]
    return text.strip()


def _split_operands(text: str) -> list[str]:
    if not text:
        return []
    return [part.strip() for part in text.split(",")]


def _reg(token: str, line: int) -> int:
    m = _REG.match(token)
    if not m:
        raise AsmError(line, f"expected a register, got {token!r}")
    reg = int(m.group(1))
    if reg >= isa.NUM_REGS:
        raise AsmError(line, f"register r{reg} out of range r0-r10")
    return reg


def _int(token: str, line: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise AsmError(line, f"expected an integer, got {token!r}") from None


def _imm32(token: str, line: int) -> int:
    value = _int(token, line)
    if 0x8000_0000 <= value <= 0xFFFF_FFFF:
        value -= 1 << 32
    if not -0x8000_0000 <= value <= 0x7FFF_FFFF:
        raise AsmError(line, f"immediate {token} does not fit in 32 bits")
    return value


def _mem(token: str, line: int) -> tuple[int, int]:
    m = _MEM.match(token.replace(" ", ""))
    if not m:
        raise AsmError(line, f"expected a memory operand [rN+off], got {token!r}")
    reg = int(m.group(1))
    if reg >= isa.NUM_REGS:
        raise AsmError(line, f"register r{reg} out of range r0-r10")
    off = 0
    if m.group(3) is not None:
        off = _int(m.group(3), line)
        if m.group(2) == "-":
            off = -off
    if not -0x8000 <= off <= 0x7FFF:
        raise AsmError(line, f"memory offset {off} does not fit in 16 bits")
    return reg, off


def _expect(ops: list[str], count: int, p: _Pending) -> None:
    if len(ops) != count:
        raise AsmError(p.line, f"{p.mnemonic} takes {count} operand(s), got {len(ops)}")


def _target(token: str, p: _Pending, labels: Mapping[str, int]) -> int:
    if token in labels:
        off = labels[token] - (p.slot + 1)
    elif re.match(r"^[+-]?(0x[0-9a-fA-F]+|\d+)$", token):
        off = int(token, 0)
    else:
        raise AsmError(p.line, f"undefined label {token!r}")
    if not -0x8000 <= off <= 0x7FFF:
        raise AsmError(p.line, f"jump offset {off} does not fit in 16 bits")
    return off


def _alu_mnemonic(mnemonic: str) -> tuple[str, int] | None:
    for suffix, cls in (("32", isa.CLS_ALU), ("64", isa.CLS_ALU64), ("", isa.CLS_ALU64)):
        base = mnemonic[: len(mnemonic) - len(suffix)] if suffix else mnemonic
        if suffix and not mnemonic.endswith(suffix):
            continue
        if base in isa.ALU_OPS:
            return base, cls
    return None


def _jmp_mnemonic(mnemonic: str) -> tuple[str, int] | None:
    if mnemonic.endswith("32") and mnemonic[:-2] in isa.JMP_OPS and mnemonic[:-2] != "ja":
        return mnemonic[:-2], isa.CLS_JMP32
    if mnemonic in isa.JMP_OPS:
        return mnemonic, isa.CLS_JMP
    return None


def _encode_one(p: _Pending, labels: Mapping[str, int], calls: Mapping[str, int]) -> list[Instruction]:
    m, ops = p.mnemonic, p.operands

    if m == "exit":
        _expect(ops, 0, p)
        return [Instruction(isa.OP_EXIT)]

    if m == "call":
        _expect(ops, 1, p)
        target = ops[0]
        if target in calls:
            return [Instruction(isa.OP_CALL, imm=calls[target])]
        if re.match(r"^(0x[0-9a-fA-F]+|\d+)$", target):
            return [Instruction(isa.OP_CALL, imm=_imm32(target, p.line))]
        raise AsmError(p.line, f"unknown binding {target!r}")

    if m == "lddw":
        _expect(ops, 2, p)
        dst = _reg(ops[0], p.line)
        value = _int(ops[1], p.line)
        if not -(1 << 63) <= value < (1 << 64):
            raise AsmError(p.line, f"lddw immediate {ops[1]} does not fit in 64 bits")
        return list(isa.lddw_pair(dst, value))

    em = re.match(r"^(le|be)(16|32|64)$", m)
    if em:
        _expect(ops, 1, p)
        op = isa.OP_LE if em.group(1) == "le" else isa.OP_BE
        return [Instruction(op, _reg(ops[0], p.line), imm=int(em.group(2)))]

    mm = re.match(r"^(ldx|stx|st)(dw|w|h|b)$", m)
    if mm:
        _expect(ops, 2, p)
        kind, size = mm.group(1), _SIZES[mm.group(2)]
        if kind == "ldx":
            dst = _reg(ops[0], p.line)
            src, off = _mem(ops[1], p.line)
            return [Instruction(isa.CLS_LDX | isa.MODE_MEM | size, dst, src, off)]
        dst, off = _mem(ops[0], p.line)
        if kind == "stx":
            return [Instruction(isa.CLS_STX | isa.MODE_MEM | size, dst, _reg(ops[1], p.line), off)]
        return [Instruction(isa.CLS_ST | isa.MODE_MEM | size, dst, 0, off, _imm32(ops[1], p.line))]

    if m == "ja":
        _expect(ops, 1, p)
        return [Instruction(isa.OP_JA, offset=_target(ops[0], p, labels))]

    jm = _jmp_mnemonic(m)
    if jm:
        _expect(ops, 3, p)
        name, cls = jm
        dst = _reg(ops[0], p.line)
        off = _target(ops[2], p, labels)
        if _REG.match(ops[1]):
            return [Instruction(cls | isa.JMP_OPS[name] | isa.SRC_REG, dst, _reg(ops[1], p.line), off)]
        return [Instruction(cls | isa.JMP_OPS[name], dst, 0, off, _imm32(ops[1], p.line))]

    am = _alu_mnemonic(m)
    if am:
        name, cls = am
        code = isa.ALU_OPS[name]
        if name == "neg":
            _expect(ops, 1, p)
            return [Instruction(cls | code, _reg(ops[0], p.line))]
        _expect(ops, 2, p)
        dst = _reg(ops[0], p.line)
        if _REG.match(ops[1]):
            return [Instruction(cls | code | isa.SRC_REG, dst, _reg(ops[1], p.line))]
        return [Instruction(cls | code, dst, 0, 0, _imm32(ops[1], p.line))]

    raise AsmError(p.line, f"unknown mnemonic {m!r}")


def _slot_width(mnemonic: str) -> int:
    return 2 if mnemonic == "lddw" else 1


def assemble_instructions(source: str, call_names: Mapping[str, int] | None = None) -> list[Instruction]:
    if call_names is None:
        from .bindings import default_bindings

        call_names = default_bindings().names()
    labels: dict[str, int] = {}
    pending: list[_Pending] = []
    slot = 0
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = _strip(raw)
        while True:
            lm = _LABEL.match(text)
            if not lm:
                break
            name = lm.group(1)
            if name in labels:
                raise AsmError(lineno, f"label {name!r} defined twice")
            labels[name] = slot
            text = text[lm.end() :].strip()
        if not text:
            continue
        mnemonic, _, rest = text.partition(" ")
        mnemonic = mnemonic.lower()
        p = _Pending(lineno, mnemonic, _split_operands(rest.strip()), slot)
        pending.append(p)
        slot += _slot_width(mnemonic)

    out: list[Instruction] = []
    for p in pending:
        try:
            out.extend(_encode_one(p, labels, call_names))
        except isa.EncodeError as exc:
            raise AsmError(p.line, str(exc)) from None
    return out


def assemble(source: str, call_names: Mapping[str, int] | None = None) -> bytes:
    """Assemble ``source`` to flat bytecode."""
    return isa.encode_program(assemble_instructions(source, call_names))
