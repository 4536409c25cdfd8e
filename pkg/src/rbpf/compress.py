"""LZSS compression of script bytecode.

The payload is a heatshrink bitstream, so embedded heatshrink decoders
configured with the same window and lookahead sizes can unpack it. Each token
starts with a tag bit. ``1`` is followed by an 8-bit literal; ``0`` by a
back-reference of ``window_bits`` bits (distance - 1) and ``lookahead_bits``
bits (length - 1). Bits are packed MSB first and the final byte is
zero-padded. As in heatshrink, the window starts out filled with zero bytes,
so a back-reference may reach before the first output byte and copy zeros.
Back-references may overlap the bytes they produce, which is
what lets runs of zero fields in instruction slots collapse so well.

Container layout (little-endian)::

    0   4  magic b"RBF1"
    4   4  original length (u32)
    8   1  window_bits
    9   1  lookahead_bits
    10  -  payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

__all__ = [
    "MAGIC",
    "DEFAULT_WINDOW_BITS",
    "DEFAULT_LOOKAHEAD_BITS",
    "ParameterError",
    "FormatError",
    "CompressedScript",
    "LzssEncoder",
    "compress",
    "compress_chunks",
    "decompress",
    "is_compressed",
]

MAGIC = b"RBF1"
DEFAULT_WINDOW_BITS = 8
DEFAULT_LOOKAHEAD_BITS = 4
MIN_WINDOW_BITS = 4
MAX_WINDOW_BITS = 15
MIN_LOOKAHEAD_BITS = 3

_HEADER = struct.Struct("<4sIBB")


class ParameterError(ValueError):
    pass


class FormatError(ValueError):
    pass


def _check_params(window_bits: int, lookahead_bits: int) -> None:
    if not MIN_WINDOW_BITS <= window_bits <= MAX_WINDOW_BITS:
        raise ParameterError(f"window_bits must be in [{MIN_WINDOW_BITS}, {MAX_WINDOW_BITS}], got {window_bits}")
    if not MIN_LOOKAHEAD_BITS <= lookahead_bits < window_bits:
        raise ParameterError(
            f"lookahead_bits must be in [{MIN_LOOKAHEAD_BITS}, window_bits), got {lookahead_bits}"
        )


def _min_match(window_bits: int, lookahead_bits: int) -> int:
    # shortest match whose back-reference is cheaper than literals
    return (1 + window_bits + lookahead_bits) // 9 + 1


@dataclass(frozen=True)
class CompressedScript:
    original_length: int
    window_bits: int
    lookahead_bits: int
    payload: bytes
    magic: bytes = MAGIC

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.magic, self.original_length, self.window_bits, self.lookahead_bits) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedScript":
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise FormatError(f"container truncated: {len(data)} bytes, header needs {_HEADER.size}")
        magic, length, wbits, lbits = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        try:
            _check_params(wbits, lbits)
        except ParameterError as exc:
            raise FormatError(str(exc)) from None
        return cls(length, wbits, lbits, data[_HEADER.size :], magic)

    def __len__(self) -> int:
        return _HEADER.size + len(self.payload)


class _BitWriter:
    def __init__(self) -> None:
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, value: int, bits: int) -> None:
        self.acc = (self.acc << bits) | value
        self.nbits += bits
        while self.nbits >= 8:
            self.nbits -= 8
            self.out.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def take(self) -> bytes:
        chunk = bytes(self.out)
        self.out.clear()
        return chunk

    def flush(self) -> bytes:
        if self.nbits:
            self.out.append((self.acc << (8 - self.nbits)) & 0xFF)
            self.acc = self.nbits = 0
        return self.take()


class LzssEncoder:
    """Incremental encoder: ``feed`` chunks, then ``finish``.

    A token is only emitted once a full lookahead is buffered (or the input
    ended), so chunk boundaries do not change the output.
    """

    def __init__(self, window_bits: int = DEFAULT_WINDOW_BITS, lookahead_bits: int = DEFAULT_LOOKAHEAD_BITS):
        _check_params(window_bits, lookahead_bits)
        self.window_bits = window_bits
        self.lookahead_bits = lookahead_bits
        self.window = 1 << window_bits
        self.min_len = _min_match(window_bits, lookahead_bits)
        self.max_len = 1 << lookahead_bits
        # zero-filled history, the same starting window the decoder assumes
        self._buf = bytearray(self.window)
        self._pos = self.window
        self._bits = _BitWriter()
        self.length = 0
        self._done = False

    def feed(self, data: bytes) -> bytes:
        if self._done:
            raise ValueError("encoder already finished")
        self._buf += data
        self.length += len(data)
        self._encode(final=False)
        return self._bits.take()

    def finish(self) -> bytes:
        self._encode(final=True)
        self._done = True
        return self._bits.flush()

    def _encode(self, final: bool) -> None:
        buf, window, max_len, min_len = self._buf, self.window, self.max_len, self.min_len
        write = self._bits.write
        wbits, lbits = self.window_bits, self.lookahead_bits
        pos = self._pos
        end = len(buf)
        while pos < end and (final or end - pos >= max_len):
            limit = min(max_len, end - pos)
            start = max(0, pos - window)
            best_len = best_dist = 0
            length = min_len
            while length <= limit:
                j = buf.rfind(buf[pos : pos + length], start, pos + length - 1)
                if j < 0:
                    break
                best_len, best_dist = length, pos - j
                length += 1
            if best_len:
                write(0, 1)
                write(best_dist - 1, wbits)
                write(best_len - 1, lbits)
                pos += best_len
            else:
                write(0x100 | buf[pos], 9)
                pos += 1
        # keep only the history a future match can reach
        drop = max(0, pos - window)
        if drop:
            del buf[:drop]
            pos -= drop
        self._pos = pos


def compress(
    bytecode: bytes,
    window_bits: int = DEFAULT_WINDOW_BITS,
    lookahead_bits: int = DEFAULT_LOOKAHEAD_BITS,
) -> CompressedScript:
    if not bytecode:
        raise ValueError("nothing to compress")
    enc = LzssEncoder(window_bits, lookahead_bits)
    payload = enc.feed(bytes(bytecode)) + enc.finish()
    return CompressedScript(len(bytecode), window_bits, lookahead_bits, payload)


def compress_chunks(
    chunks: Iterable[bytes],
    window_bits: int = DEFAULT_WINDOW_BITS,
    lookahead_bits: int = DEFAULT_LOOKAHEAD_BITS,
) -> CompressedScript:
    enc = LzssEncoder(window_bits, lookahead_bits)
    parts = [enc.feed(chunk) for chunk in chunks]
    if not enc.length:
        raise ValueError("nothing to compress")
    parts.append(enc.finish())
    return CompressedScript(enc.length, window_bits, lookahead_bits, b"".join(parts))


def decompress(cs: CompressedScript | bytes) -> bytes:
    if not isinstance(cs, CompressedScript):
        cs = CompressedScript.from_bytes(cs)
    if cs.magic != MAGIC:
        raise FormatError(f"bad magic {cs.magic!r}")
    _check_params(cs.window_bits, cs.lookahead_bits)
    wbits, lbits = cs.window_bits, cs.lookahead_bits
    payload = cs.payload
    total_bits = 8 * len(payload)
    history = 1 << wbits
    out = bytearray(history)
    want = cs.original_length + history
    acc = 0
    nbits = 0
    consumed = 0
    index = 0

    def need(bits: int) -> int:
        nonlocal acc, nbits, index, consumed
        while nbits < bits:
            if index >= len(payload):
                raise FormatError(f"payload truncated after {len(out) - history} of {want - history} bytes")
            acc = (acc << 8) | payload[index]
            index += 1
            nbits += 8
        nbits -= bits
        consumed += bits
        value = acc >> nbits
        acc &= (1 << nbits) - 1
        return value

    while len(out) < want:
        if need(1):
            out.append(need(8))
            continue
        dist = need(wbits) + 1
        length = need(lbits) + 1
        if len(out) + length > want:
            raise FormatError("back-reference runs past the declared length")
        src = len(out) - dist
        for i in range(length):
            out.append(out[src + i])

    if total_bits - consumed >= 8 or acc:
        raise FormatError("trailing data after the declared length")
    return bytes(out[history:])


def is_compressed(data: bytes) -> bool:
    return bytes(data[:4]) == MAGIC
