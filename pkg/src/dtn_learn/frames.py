"""Wire frames for the contact protocol.

Every frame is MAGIC "DTLP" | version u8 | type u8 | body_len u32 LE | body |
crc32 u32 LE over header+body. Integers little-endian, strings u16-length-
prefixed UTF-8. The full bit layout lives in docs/wire.md.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"DTLP"
VERSION = 1
MAX_BODY = 1 * 1024 * 1024
_HEADER = struct.Struct("<4sBBI")


class FrameType(IntEnum):
    BEACON = 0
    HELLO = 1
    MANIFEST = 2
    WANT = 3
    CHUNK = 4
    ACK = 5
    BYE = 6


class FrameError(Exception):
    """Base for all decode failures; decoders raise nothing else."""


class BadMagic(FrameError):
    pass


class UnknownVersion(FrameError):
    pass


class UnknownType(FrameError):
    pass


class BadLength(FrameError):
    pass


class BadCrc(FrameError):
    pass


class Truncated(FrameError):
    """Not enough bytes yet; feed more and retry."""


class Role(IntEnum):
    RURAL = 0
    MULE = 1
    URBAN = 2


@dataclass(frozen=True)
class ManifestEntry:
    id: bytes
    total_len: int
    source: str
    destination: str
    created_at: int
    ttl: int
    kind: int
    priority: int
    payload_digest: bytes
    complete: bool
    ranges: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class Frame:
    type: FrameType
    # BEACON / HELLO
    node_id: str = ""
    role: int = 0
    chunk_size: int = 0  # HELLO only
    # MANIFEST
    entries: tuple[ManifestEntry, ...] = ()
    # WANT: (id, start_offset) pairs
    wants: tuple[tuple[bytes, int], ...] = ()
    # CHUNK / ACK
    bundle_id: bytes = b""
    offset: int = 0
    data: bytes = b""
    acked_to: int = 0


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise BadLength("body shorter than its fields")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise BadLength(f"invalid utf-8 string: {e}") from e

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise BadLength(f"{len(self.buf) - self.pos} trailing bytes in body")


def _encode_body(f: Frame) -> bytes:
    t = f.type
    if t in (FrameType.BEACON, FrameType.HELLO):
        body = _pack_str(f.node_id) + bytes([f.role])
        if t == FrameType.HELLO:
            body += struct.pack("<I", f.chunk_size)
        return body
    if t == FrameType.MANIFEST:
        parts = [struct.pack("<I", len(f.entries))]
        for e in f.entries:
            parts.append(e.id)
            parts.append(struct.pack("<q", e.total_len))
            parts.append(_pack_str(e.source))
            parts.append(_pack_str(e.destination))
            parts.append(struct.pack("<qq", e.created_at, e.ttl))
            parts.append(bytes([e.kind, e.priority]))
            parts.append(e.payload_digest)
            parts.append(bytes([1 if e.complete else 0]))
            parts.append(struct.pack("<H", len(e.ranges)))
            for start, end in e.ranges:
                parts.append(struct.pack("<qq", start, end))
        return b"".join(parts)
    if t == FrameType.WANT:
        parts = [struct.pack("<I", len(f.wants))]
        for bid, start in f.wants:
            parts.append(bid)
            parts.append(struct.pack("<q", start))
        return b"".join(parts)
    if t == FrameType.CHUNK:
        return f.bundle_id + struct.pack("<q", f.offset) + f.data
    if t == FrameType.ACK:
        return f.bundle_id + struct.pack("<q", f.acked_to)
    if t == FrameType.BYE:
        return b""
    raise UnknownType(str(t))


def _decode_body(ftype: FrameType, body: bytes) -> Frame:
    r = _Reader(body)
    if ftype in (FrameType.BEACON, FrameType.HELLO):
        node_id = r.string()
        role = r.u8()
        chunk_size = r.u32() if ftype == FrameType.HELLO else 0
        r.done()
        return Frame(type=ftype, node_id=node_id, role=role, chunk_size=chunk_size)
    if ftype == FrameType.MANIFEST:
        count = r.u32()
        entries = []
        for _ in range(count):
            bid = r.take(32)
            total_len = r.u64()
            source = r.string()
            dest = r.string()
            created_at = r.u64()
            ttl = r.u64()
            kind = r.u8()
            priority = r.u8()
            digest = r.take(32)
            complete = r.u8() != 0
            nranges = r.u16()
            ranges = tuple((r.u64(), r.u64()) for _ in range(nranges))
            entries.append(
                ManifestEntry(
                    id=bid,
                    total_len=total_len,
                    source=source,
                    destination=dest,
                    created_at=created_at,
                    ttl=ttl,
                    kind=kind,
                    priority=priority,
                    payload_digest=digest,
                    complete=complete,
                    ranges=ranges,
                )
            )
        r.done()
        return Frame(type=ftype, entries=tuple(entries))
    if ftype == FrameType.WANT:
        count = r.u32()
        wants = tuple((r.take(32), r.u64()) for _ in range(count))
        r.done()
        return Frame(type=ftype, wants=wants)
    if ftype == FrameType.CHUNK:
        bid = r.take(32)
        offset = r.u64()
        data = r.buf[r.pos :]
        return Frame(type=ftype, bundle_id=bid, offset=offset, data=data)
    if ftype == FrameType.ACK:
        bid = r.take(32)
        acked_to = r.u64()
        r.done()
        return Frame(type=ftype, bundle_id=bid, acked_to=acked_to)
    # BYE
    r.done()
    return Frame(type=ftype)


def encode_frame(f: Frame) -> bytes:
    body = _encode_body(f)
    if len(body) > MAX_BODY:
        raise BadLength(f"body {len(body)} exceeds {MAX_BODY}")
    header = _HEADER.pack(MAGIC, VERSION, int(f.type), len(body))
    crc = zlib.crc32(header + body)
    return header + body + struct.pack("<I", crc)


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Frame, int]:
    """Decode one frame from the head of buf; returns (frame, bytes consumed).

    Raises Truncated when more bytes are needed, other FrameError subclasses
    when the head can never become a valid frame.
    """
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        prefix = buf[: min(len(buf), 4)]
        if MAGIC.startswith(prefix):
            raise Truncated("incomplete header")
        raise BadMagic(prefix.hex())
    magic, version, ftype, body_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(magic.hex())
    if version != VERSION:
        raise UnknownVersion(str(version))
    try:
        ftype_e = FrameType(ftype)
    except ValueError as e:
        raise UnknownType(str(ftype)) from e
    if body_len > MAX_BODY:
        raise BadLength(f"declared body {body_len} exceeds {MAX_BODY}")
    total = _HEADER.size + body_len + 4
    if len(buf) < total:
        raise Truncated(f"need {total} bytes, have {len(buf)}")
    body = buf[_HEADER.size : _HEADER.size + body_len]
    (crc,) = struct.unpack_from("<I", buf, _HEADER.size + body_len)
    if zlib.crc32(buf[: _HEADER.size] + body) != crc:
        raise BadCrc("frame crc mismatch")
    frame = _decode_body(ftype_e, body)
    return frame, total


def frame_wire_len(f: Frame) -> int:
    return _HEADER.size + len(_encode_body(f)) + 4
