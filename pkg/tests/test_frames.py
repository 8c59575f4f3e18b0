import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtn_learn.frames import (
    BadCrc,
    BadMagic,
    Frame,
    FrameError,
    FrameType,
    ManifestEntry,
    Truncated,
    UnknownVersion,
    decode_frame,
    encode_frame,
    frame_wire_len,
)


def roundtrip(f: Frame) -> Frame:
    raw = encode_frame(f)
    decoded, consumed = decode_frame(raw)
    assert consumed == len(raw) == frame_wire_len(f)
    return decoded


def test_beacon_roundtrip():
    f = Frame(type=FrameType.BEACON, node_id="mule-1", role=1)
    assert roundtrip(f) == f


def test_hello_roundtrip():
    f = Frame(type=FrameType.HELLO, node_id="rural-1", role=0, chunk_size=65536)
    assert roundtrip(f) == f


def test_manifest_roundtrip():
    e = ManifestEntry(
        id=bytes(range(32)),
        total_len=1048576,
        source="rural-1",
        destination="urban-1",
        created_at=123456,
        ttl=86400000,
        kind=2,
        priority=1,
        payload_digest=bytes(reversed(range(32))),
        complete=False,
        ranges=((0, 131072),),
    )
    f = Frame(type=FrameType.MANIFEST, entries=(e,))
    assert roundtrip(f) == f


def test_want_chunk_ack_bye_roundtrip():
    bid = b"\xab" * 32
    for f in (
        Frame(type=FrameType.WANT, wants=((bid, 131072),)),
        Frame(type=FrameType.CHUNK, bundle_id=bid, offset=65536, data=b"\x01\x02" * 100),
        Frame(type=FrameType.ACK, bundle_id=bid, acked_to=196608),
        Frame(type=FrameType.BYE),
    ):
        assert roundtrip(f) == f


def test_bitflip_detected():
    raw = bytearray(encode_frame(Frame(type=FrameType.CHUNK, bundle_id=b"\x01" * 32,
                                       offset=0, data=b"payload bytes")))
    raw[len(raw) // 2] ^= 0x01
    with pytest.raises(BadCrc):
        decode_frame(bytes(raw))


def test_bad_magic():
    raw = bytearray(encode_frame(Frame(type=FrameType.BYE)))
    raw[0] = ord("X")
    with pytest.raises(BadMagic):
        decode_frame(bytes(raw))


def test_unknown_version():
    raw = bytearray(encode_frame(Frame(type=FrameType.BYE)))
    raw[4] = 9
    with pytest.raises(UnknownVersion):
        decode_frame(bytes(raw))


def test_truncated_then_completes():
    raw = encode_frame(Frame(type=FrameType.BEACON, node_id="urban-1", role=2))
    for cut in (0, 3, 9, len(raw) - 1):
        with pytest.raises(Truncated):
            decode_frame(raw[:cut])
    f, n = decode_frame(raw + b"trailing")
    assert n == len(raw)
    assert f.node_id == "urban-1"


def test_decode_consumes_exactly_one_frame():
    a = encode_frame(Frame(type=FrameType.BYE))
    b = encode_frame(Frame(type=FrameType.ACK, bundle_id=b"\x02" * 32, acked_to=5))
    buf = a + b
    f1, n1 = decode_frame(buf)
    assert f1.type == FrameType.BYE
    f2, n2 = decode_frame(buf[n1:])
    assert f2.type == FrameType.ACK and n1 + n2 == len(buf)


def _random_frame(rng: random.Random) -> Frame:
    t = rng.choice(list(FrameType))
    bid = rng.randbytes(32)
    if t in (FrameType.BEACON, FrameType.HELLO):
        name = "".join(rng.choice("abcdefgirstu-0123456789") for _ in range(rng.randrange(1, 20)))
        return Frame(type=t, node_id=name, role=rng.randrange(3),
                     chunk_size=rng.randrange(1, 1 << 20) if t == FrameType.HELLO else 0)
    if t == FrameType.MANIFEST:
        entries = tuple(
            ManifestEntry(
                id=rng.randbytes(32),
                total_len=rng.randrange(0, 1 << 40),
                source=f"n{rng.randrange(100)}",
                destination=f"n{rng.randrange(100)}",
                created_at=rng.randrange(0, 1 << 48),
                ttl=rng.randrange(1, 1 << 40),
                kind=rng.randrange(3),
                priority=rng.randrange(2),
                payload_digest=rng.randbytes(32),
                complete=rng.random() < 0.5,
                ranges=tuple(sorted((rng.randrange(0, 1 << 30), rng.randrange(0, 1 << 30))
                                    for _ in range(rng.randrange(3)))),
            )
            for _ in range(rng.randrange(4))
        )
        return Frame(type=t, entries=entries)
    if t == FrameType.WANT:
        return Frame(type=t, wants=tuple((rng.randbytes(32), rng.randrange(0, 1 << 30))
                                         for _ in range(rng.randrange(5))))
    if t == FrameType.CHUNK:
        return Frame(type=t, bundle_id=bid, offset=rng.randrange(0, 1 << 40),
                     data=rng.randbytes(rng.randrange(0, 2000)))
    if t == FrameType.ACK:
        return Frame(type=t, bundle_id=bid, acked_to=rng.randrange(0, 1 << 40))
    return Frame(type=FrameType.BYE)


def test_random_frames_roundtrip_1000():
    rng = random.Random(1234)
    for _ in range(1000):
        f = _random_frame(rng)
        assert roundtrip(f) == f


def test_random_garbage_never_crashes():
    rng = random.Random(99)
    for _ in range(2000):
        blob = rng.randbytes(rng.randrange(0, 200))
        try:
            decode_frame(blob)
        except FrameError:
            pass


@settings(max_examples=200, deadline=None)
@given(data=st.binary(max_size=120))
def test_decoder_total_on_arbitrary_bytes(data):
    try:
        decode_frame(data)
    except FrameError:
        pass
