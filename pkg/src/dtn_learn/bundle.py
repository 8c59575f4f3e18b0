"""Bundle: the unit of store-carry-forward data.

A bundle is immutable once created. Its id is content-derived, so two
nodes independently constructing the same bundle agree on identity and
re-sends deduplicate for free.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum

MAX_NODE_ID_BYTES = 64
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024
DEFAULT_TTL_MS = 7 * 24 * 3600 * 1000


class Priority(IntEnum):
    # Lower value = served first. Control carries topic requests; they must
    # clear the link before bulk content in a short contact.
    CONTROL = 0
    CONTENT = 1


class Kind(IntEnum):
    TOPIC_REQUEST = 0
    CONTENT_UPDATE = 1
    CONTENT_RESPONSE = 2


class BundleError(Exception):
    pass


class ZeroTtl(BundleError):
    pass


class OversizePayload(BundleError):
    pass


class EmptyPayload(BundleError):
    pass


class BadNodeId(BundleError):
    pass


def check_node_id(node_id: str) -> str:
    if not node_id:
        raise BadNodeId("node id must be nonempty")
    if len(node_id.encode("utf-8")) > MAX_NODE_ID_BYTES:
        raise BadNodeId(f"node id exceeds {MAX_NODE_ID_BYTES} bytes: {node_id!r}")
    return node_id


def payload_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def bundle_id(source: str, destination: str, created_at: int, p_digest: bytes) -> bytes:
    """SHA-256 over (source, destination, created_at, payload digest).

    Strings are length-prefixed so distinct field splits can never collide.
    """
    h = hashlib.sha256()
    src = source.encode("utf-8")
    dst = destination.encode("utf-8")
    h.update(struct.pack("<H", len(src)))
    h.update(src)
    h.update(struct.pack("<H", len(dst)))
    h.update(dst)
    h.update(struct.pack("<q", created_at))
    h.update(p_digest)
    return h.digest()


@dataclass(frozen=True)
class Bundle:
    id: bytes  # 32 bytes
    source: str
    destination: str
    created_at: int  # ms since epoch
    ttl: int  # ms
    priority: Priority
    kind: Kind
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def payload_digest(self) -> bytes:
        return payload_digest(self.payload)

    def expires_at(self) -> int:
        return self.created_at + self.ttl

    def expired(self, now: int) -> bool:
        return self.expires_at() <= now

    def verify_id(self) -> bool:
        return self.id == bundle_id(
            self.source, self.destination, self.created_at, self.payload_digest
        )


@dataclass(frozen=True)
class BundleMeta:
    """Header-only view of a bundle, as carried in manifests and the store index."""

    id: bytes
    source: str
    destination: str
    created_at: int
    ttl: int
    priority: Priority
    kind: Kind
    payload_len: int
    payload_digest: bytes

    def expires_at(self) -> int:
        return self.created_at + self.ttl

    def expired(self, now: int) -> bool:
        return self.expires_at() <= now

    def order_key(self) -> tuple:
        return (int(self.priority), self.created_at, self.id)

    @classmethod
    def of(cls, b: Bundle) -> "BundleMeta":
        return cls(
            id=b.id,
            source=b.source,
            destination=b.destination,
            created_at=b.created_at,
            ttl=b.ttl,
            priority=b.priority,
            kind=b.kind,
            payload_len=b.payload_len,
            payload_digest=b.payload_digest,
        )


def create_bundle(
    source: str,
    destination: str,
    kind: Kind,
    priority: Priority,
    payload: bytes,
    ttl: int,
    now: int,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> Bundle:
    """Build a bundle; deterministic for identical inputs."""
    check_node_id(source)
    check_node_id(destination)
    if ttl <= 0:
        raise ZeroTtl(f"ttl must be positive, got {ttl}")
    if len(payload) > max_payload:
        raise OversizePayload(f"payload {len(payload)} exceeds max {max_payload}")
    if not payload and kind != Kind.TOPIC_REQUEST:
        raise EmptyPayload(f"empty payload not allowed for kind {kind.name}")
    p_digest = payload_digest(payload)
    return Bundle(
        id=bundle_id(source, destination, now, p_digest),
        source=source,
        destination=destination,
        created_at=now,
        ttl=ttl,
        priority=priority,
        kind=kind,
        payload=payload,
    )
