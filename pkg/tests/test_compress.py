import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbpf import isa, programs
from rbpf.compress import (
    MAGIC,
    CompressedScript,
    FormatError,
    LzssEncoder,
    ParameterError,
    compress,
    compress_chunks,
    decompress,
    is_compressed,
)

EXIT_SLOT = isa.encode(isa.Instruction(isa.OP_EXIT))


@given(st.binary(min_size=1, max_size=600))
@settings(max_examples=300)
def test_round_trip(data):
    assert decompress(compress(data)) == data


@given(st.binary(min_size=1, max_size=300), st.integers(4, 12), st.integers(3, 11))
@settings(max_examples=200)
def test_round_trip_any_parameters(data, w, lookahead):
    if lookahead >= w:
        lookahead = w - 1
    assert decompress(compress(data, w, lookahead)) == data


def test_redundant_slots_shrink_below_ten_percent():
    data = EXIT_SLOT * 64
    cs = compress(data, 8, 5)
    assert len(cs.payload) < 0.10 * len(data)
    assert decompress(cs) == data


def test_redundant_slots_at_default_parameters():
    data = EXIT_SLOT * 64
    assert len(compress(data).payload) < 0.11 * len(data)


def test_fletcher_bytecode_shrinks_by_forty_percent():
    code = programs.bytecode("fletcher32")
    assert len(compress(code)) <= 0.6 * len(code)


def test_container_round_trip():
    cs = compress(b"hello hello hello")
    raw = cs.to_bytes()
    assert is_compressed(raw) and raw[:4] == MAGIC
    assert CompressedScript.from_bytes(raw) == cs
    assert decompress(raw) == b"hello hello hello"


def test_corrupted_magic():
    raw = bytearray(compress(b"abcabcabc").to_bytes())
    raw[0] ^= 0xFF
    with pytest.raises(FormatError):
        decompress(bytes(raw))


def test_truncated_payload():
    raw = compress(bytes(range(200))).to_bytes()
    with pytest.raises(FormatError):
        decompress(raw[:-5])
    with pytest.raises(FormatError):
        decompress(raw[:6])


def test_trailing_garbage():
    raw = compress(b"abcdefgh").to_bytes()
    with pytest.raises(FormatError):
        decompress(raw + b"\x00\x00")


def test_reference_before_start_reads_zero_history():
    # tag 0, distance 5 (stored as 4), length 4 (stored as 3), nothing decoded yet
    cs = CompressedScript(4, 8, 4, bytes([0b00000010, 0b00011000]))
    assert decompress(cs) == bytes(4)


def test_reference_past_declared_length():
    cs = CompressedScript(2, 8, 4, bytes([0b00000010, 0b00011000]))
    with pytest.raises(FormatError):
        decompress(cs)


def test_bad_parameters():
    with pytest.raises(ParameterError):
        compress(b"x", 3, 2)
    with pytest.raises(ParameterError):
        compress(b"x", 8, 8)
    with pytest.raises(ValueError):
        compress(b"")


def test_streaming_matches_one_shot():
    rng = random.Random(9)
    data = b"".join(programs.corpus().values()) + rng.randbytes(300)
    one_shot = compress(data)
    for _ in range(20):
        cuts = sorted(rng.sample(range(1, len(data)), 6))
        chunks = [data[a:b] for a, b in zip([0, *cuts], [*cuts, len(data)])]
        assert compress_chunks(chunks) == one_shot


def test_encoder_cannot_be_reused():
    enc = LzssEncoder()
    enc.feed(b"abc")
    enc.finish()
    with pytest.raises(ValueError):
        enc.feed(b"d")


def test_interoperates_with_heatshrink():
    hs = pytest.importorskip("heatshrink2")
    rng = random.Random(12)
    slots = [EXIT_SLOT, bytes.fromhex("b701000000000000"), *programs.corpus().values()]
    for i in range(200):
        if i % 2:
            data = rng.randbytes(rng.randint(1, 1500))
        else:
            data = b"".join(rng.choice(slots) for _ in range(rng.randint(1, 40)))
        for w, lookahead in [(8, 4), (8, 5), (10, 4), (5, 3)]:
            ours = compress(data, w, lookahead)
            assert hs.decompress(ours.payload, window_sz2=w, lookahead_sz2=lookahead) == data
            theirs = hs.compress(data, window_sz2=w, lookahead_sz2=lookahead)
            assert decompress(CompressedScript(len(data), w, lookahead, theirs)) == data
