"""Persistent bundle store: payload files plus an append-only index journal.

Layout under the store root (format version 0x01):

    <id-hex>.payload    one file per bundle, written at chunk offsets
    index.journal       version byte, then records framed as
                        [u32 LE body_len][body][u32 LE crc32(body)]

Record bodies start with a type byte: INSERT (complete bundle), PARTIAL
(metadata for an in-progress inbound transfer), RANGE (a chunk landed, with
its own CRC32), PROMOTE (partial verified complete), REMOVE (expired or
custody handed off). Recovery replays the journal, drops a torn tail record,
and re-verifies every partial's chunk CRCs against the payload file, keeping
the longest verified prefix. A torn final chunk therefore costs exactly that
chunk; a bundle whose INSERT or PROMOTE record made it to disk is never lost.

Single-writer discipline: all mutations go through one owner. Reads are safe
from other threads.
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from .bundle import Bundle, BundleMeta, Kind, Priority

FORMAT_VERSION = 0x01
DEFAULT_QUOTA = 4 * 1024 * 1024 * 1024

_REC_INSERT = 1
_REC_PARTIAL = 2
_REC_RANGE = 3
_REC_PROMOTE = 4
_REC_REMOVE = 5


class StoreError(Exception):
    pass


class StorageFull(StoreError):
    pass


class IoFailure(StoreError):
    pass


class UnknownBundle(StoreError):
    pass


class PutResult(IntEnum):
    INSERTED = 0
    DUPLICATE = 1


class RemoveReason(IntEnum):
    EXPIRED = 0
    CUSTODY = 1


@dataclass
class StoreEntry:
    meta: BundleMeta
    complete: bool
    received_at: int
    # Disjoint, sorted, merged [start, end) byte ranges; a single prefix range
    # in practice because chunks arrive in order.
    ranges: list[tuple[int, int]] = field(default_factory=list)

    def prefix_end(self) -> int:
        if self.complete:
            return self.meta.payload_len
        if self.ranges and self.ranges[0][0] == 0:
            return self.ranges[0][1]
        return 0


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off : off + n].decode("utf-8"), off + n


def _pack_meta(meta: BundleMeta, received_at: int) -> bytes:
    return b"".join(
        (
            meta.id,
            _pack_str(meta.source),
            _pack_str(meta.destination),
            struct.pack("<qqBBq", meta.created_at, meta.ttl, int(meta.kind), int(meta.priority), meta.payload_len),
            meta.payload_digest,
            struct.pack("<q", received_at),
        )
    )


def _unpack_meta(buf: bytes) -> tuple[BundleMeta, int]:
    bid = buf[:32]
    off = 32
    source, off = _unpack_str(buf, off)
    dest, off = _unpack_str(buf, off)
    created_at, ttl, kind, priority, payload_len = struct.unpack_from("<qqBBq", buf, off)
    off += 26
    digest = buf[off : off + 32]
    off += 32
    (received_at,) = struct.unpack_from("<q", buf, off)
    meta = BundleMeta(
        id=bid,
        source=source,
        destination=dest,
        created_at=created_at,
        ttl=ttl,
        priority=Priority(priority),
        kind=Kind(kind),
        payload_len=payload_len,
        payload_digest=digest,
    )
    return meta, received_at


def _merge_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    if not ranges:
        return []
    ranges = sorted(ranges)
    merged = [ranges[0]]
    for start, end in ranges[1:]:
        last_s, last_e = merged[-1]
        if start <= last_e:
            merged[-1] = (last_s, max(last_e, end))
        else:
            merged.append((start, end))
    return merged


class BundleStore:
    """Disk-backed bundle store with dedup, TTL expiry and partial-transfer state.

    durable=True fsyncs payload and journal writes (daemon mode); durable=False
    still writes through to the OS (simulator mode, where the process outlives
    the run).
    """

    def __init__(self, root: str | Path, quota: int = DEFAULT_QUOTA, durable: bool = True):
        self.root = Path(root)
        self.quota = quota
        self.durable = durable
        self.root.mkdir(parents=True, exist_ok=True)
        self._index: dict[bytes, StoreEntry] = {}
        self._journal_path = self.root / "index.journal"
        self._open_journal()

    # -- journal ----------------------------------------------------------

    def _open_journal(self) -> None:
        if self._journal_path.exists():
            self._replay()
            self._journal = open(self._journal_path, "ab")
        else:
            self._journal = open(self._journal_path, "wb")
            self._journal.write(bytes([FORMAT_VERSION]))
            self._flush_journal()

    def _flush_journal(self) -> None:
        self._journal.flush()
        if self.durable:
            os.fsync(self._journal.fileno())

    def _append(self, body: bytes) -> None:
        rec = struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))
        try:
            self._journal.write(rec)
            self._flush_journal()
        except OSError as e:
            raise IoFailure(str(e)) from e

    def _replay(self) -> None:
        raw = self._journal_path.read_bytes()
        if not raw or raw[0] != FORMAT_VERSION:
            raise IoFailure(f"bad journal version in {self._journal_path}")
        pos = 1
        good = 1
        # chunk crcs per bundle, only needed during recovery
        chunk_crcs: dict[bytes, list[tuple[int, int, int]]] = {}
        while pos + 4 <= len(raw):
            (body_len,) = struct.unpack_from("<I", raw, pos)
            end = pos + 4 + body_len + 4
            if end > len(raw):
                break  # torn tail
            body = raw[pos + 4 : pos + 4 + body_len]
            (crc,) = struct.unpack_from("<I", raw, pos + 4 + body_len)
            if zlib.crc32(body) != crc or not body:
                break  # torn/corrupt record: stop replay here
            self._apply_record(body, chunk_crcs)
            pos = end
            good = end
        if good < len(raw):
            with open(self._journal_path, "r+b") as f:
                f.truncate(good)
        self._verify_partials(chunk_crcs)

    def _apply_record(self, body: bytes, chunk_crcs: dict[bytes, list[tuple[int, int, int]]]) -> None:
        rtype = body[0]
        rest = body[1:]
        if rtype in (_REC_INSERT, _REC_PARTIAL):
            meta, received_at = _unpack_meta(rest)
            entry = StoreEntry(meta=meta, complete=(rtype == _REC_INSERT), received_at=received_at)
            if rtype == _REC_INSERT:
                entry.ranges = [(0, meta.payload_len)] if meta.payload_len else []
            self._index[meta.id] = entry
            chunk_crcs.pop(meta.id, None)
        elif rtype == _REC_RANGE:
            bid = rest[:32]
            offset, length, crc = struct.unpack_from("<qqI", rest, 32)
            entry = self._index.get(bid)
            if entry is not None and not entry.complete:
                entry.ranges = _merge_ranges(entry.ranges + [(offset, offset + length)])
                chunk_crcs.setdefault(bid, []).append((offset, length, crc))
        elif rtype == _REC_PROMOTE:
            bid = rest[:32]
            entry = self._index.get(bid)
            if entry is not None:
                entry.complete = True
                entry.ranges = [(0, entry.meta.payload_len)] if entry.meta.payload_len else []
                chunk_crcs.pop(bid, None)
        elif rtype == _REC_REMOVE:
            bid = rest[:32]
            self._index.pop(bid, None)
            chunk_crcs.pop(bid, None)

    def _verify_partials(self, chunk_crcs: dict[bytes, list[tuple[int, int, int]]]) -> None:
        """Keep, per partial, only the longest prefix whose chunk CRCs check out."""
        for bid, chunks in chunk_crcs.items():
            entry = self._index.get(bid)
            if entry is None or entry.complete:
                continue
            path = self._payload_path(bid)
            verified_end = 0
            try:
                with open(path, "rb") as f:
                    for offset, length, crc in sorted(chunks):
                        if offset != verified_end:
                            break
                        f.seek(offset)
                        data = f.read(length)
                        if len(data) != length or zlib.crc32(data) != crc:
                            break
                        verified_end = offset + length
            except OSError:
                verified_end = 0
            entry.ranges = [(0, verified_end)] if verified_end else []

    # -- paths ------------------------------------------------------------

    def _payload_path(self, bid: bytes) -> Path:
        return self.root / f"{bid.hex()}.payload"

    # -- quota ------------------------------------------------------------

    def used_bytes(self) -> int:
        return sum(e.meta.payload_len for e in self._index.values())

    def free_quota(self) -> int:
        return max(0, self.quota - self.used_bytes())

    # -- mutations --------------------------------------------------------

    def put(self, bundle: Bundle, now: int | None = None) -> PutResult:
        """Insert a complete bundle; durable on return. Idempotent by id."""
        entry = self._index.get(bundle.id)
        if entry is not None and entry.complete:
            return PutResult.DUPLICATE
        if entry is None and bundle.payload_len > self.free_quota():
            raise StorageFull(
                f"payload {bundle.payload_len} exceeds free quota {self.free_quota()}"
            )
        path = self._payload_path(bundle.id)
        tmp = path.with_suffix(".payload.tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(bundle.payload)
                f.flush()
                if self.durable:
                    os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as e:
            raise IoFailure(str(e)) from e
        received_at = bundle.created_at if now is None else now
        self._append(bytes([_REC_INSERT]) + _pack_meta(BundleMeta.of(bundle), received_at))
        ent = StoreEntry(meta=BundleMeta.of(bundle), complete=True, received_at=received_at)
        ent.ranges = [(0, bundle.payload_len)] if bundle.payload_len else []
        self._index[bundle.id] = ent
        return PutResult.INSERTED

    def begin_partial(self, meta: BundleMeta, now: int) -> StoreEntry:
        """Register an inbound transfer. No-op if the id is already tracked."""
        entry = self._index.get(meta.id)
        if entry is not None:
            return entry
        if meta.payload_len > self.free_quota():
            raise StorageFull(
                f"payload {meta.payload_len} exceeds free quota {self.free_quota()}"
            )
        self._payload_path(meta.id).touch()
        self._append(bytes([_REC_PARTIAL]) + _pack_meta(meta, now))
        entry = StoreEntry(meta=meta, complete=False, received_at=now)
        self._index[meta.id] = entry
        return entry

    def write_chunk(self, bid: bytes, offset: int, data: bytes) -> None:
        """Persist one chunk of a partial; the chunk is durable on return."""
        entry = self._index.get(bid)
        if entry is None:
            raise UnknownBundle(bid.hex())
        if entry.complete:
            return  # late duplicate chunk
        try:
            with open(self._payload_path(bid), "r+b") as f:
                f.seek(offset)
                f.write(data)
                f.flush()
                if self.durable:
                    os.fsync(f.fileno())
        except OSError as e:
            raise IoFailure(str(e)) from e
        self._append(
            bytes([_REC_RANGE]) + bid + struct.pack("<qqI", offset, len(data), zlib.crc32(data))
        )
        entry.ranges = _merge_ranges(entry.ranges + [(offset, offset + len(data))])

    def promote(self, bid: bytes) -> bool:
        """Mark a fully received partial Complete after verifying the payload digest.

        Returns False (and truncates nothing) on digest mismatch.
        """
        entry = self._index.get(bid)
        if entry is None:
            raise UnknownBundle(bid.hex())
        if entry.complete:
            return True
        if entry.prefix_end() != entry.meta.payload_len:
            return False
        h = hashlib.sha256()
        with open(self._payload_path(bid), "rb") as f:
            while True:
                block = f.read(1 << 20)
                if not block:
                    break
                h.update(block)
        if h.digest() != entry.meta.payload_digest:
            return False
        self._append(bytes([_REC_PROMOTE]) + bid)
        entry.complete = True
        entry.ranges = [(0, entry.meta.payload_len)] if entry.meta.payload_len else []
        return True

    def discard_to_prefix(self, bid: bytes, prefix_end: int) -> None:
        """Drop received ranges beyond prefix_end (corrupt-completion recovery)."""
        entry = self._index.get(bid)
        if entry is None or entry.complete:
            return
        entry.ranges = [(0, prefix_end)] if prefix_end else []

    def remove(self, bid: bytes, reason: RemoveReason) -> None:
        entry = self._index.pop(bid, None)
        if entry is None:
            return
        self._append(bytes([_REC_REMOVE]) + bid + bytes([int(reason)]))
        try:
            self._payload_path(bid).unlink(missing_ok=True)
        except OSError as e:
            raise IoFailure(str(e)) from e

    def expire_bundles(self, now: int) -> list[bytes]:
        """Remove every bundle with created_at + ttl <= now; returns removed ids."""
        expired = [bid for bid, e in self._index.items() if e.meta.expired(now)]
        for bid in sorted(expired):
            self.remove(bid, RemoveReason.EXPIRED)
        return sorted(expired)

    # -- queries ----------------------------------------------------------

    def get(self, bid: bytes) -> StoreEntry | None:
        return self._index.get(bid)

    def entries(self) -> list[StoreEntry]:
        return list(self._index.values())

    def has_complete(self, bid: bytes) -> bool:
        e = self._index.get(bid)
        return e is not None and e.complete

    def read_payload(self, bid: bytes, offset: int = 0, length: int | None = None) -> bytes:
        entry = self._index.get(bid)
        if entry is None:
            raise UnknownBundle(bid.hex())
        if length is None:
            length = entry.meta.payload_len - offset
        with open(self._payload_path(bid), "rb") as f:
            f.seek(offset)
            return f.read(length)

    def get_bundle(self, bid: bytes) -> Bundle:
        entry = self._index.get(bid)
        if entry is None or not entry.complete:
            raise UnknownBundle(bid.hex())
        m = entry.meta
        return Bundle(
            id=m.id,
            source=m.source,
            destination=m.destination,
            created_at=m.created_at,
            ttl=m.ttl,
            priority=m.priority,
            kind=m.kind,
            payload=self.read_payload(bid),
        )

    def offer_queue(self, now: int) -> list[bytes]:
        """All Complete, unexpired bundle ids in (priority, created_at, id) order."""
        live = [
            e for e in self._index.values() if e.complete and not e.meta.expired(now)
        ]
        live.sort(key=lambda e: e.meta.order_key())
        return [e.meta.id for e in live]

    def close(self) -> None:
        self._flush_journal()
        self._journal.close()
