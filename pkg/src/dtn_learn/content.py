"""Content catalog and topic-request lifecycle at rural and urban nodes.

Bundle payloads are versioned JSON ("schema": 1) with a "type" of
topic_request, content_update or content_response. Catalog items and the
request table persist as JSON files rewritten atomically; article bodies sit
in one file per (title, version) named by content id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .bundle import Bundle, Kind, Priority, create_bundle
from .routing import NodeRole
from .store import BundleStore

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_REQUEST_TTL_MS = 3 * 24 * 3600 * 1000
DEFAULT_CONTENT_TTL_MS = 7 * 24 * 3600 * 1000


class ContentError(Exception):
    pass


class EmptyTitle(ContentError):
    pass


class EmptyTopic(ContentError):
    pass


class NotFound(ContentError):
    pass


class MalformedPayload(ContentError):
    pass


class Origin(str, Enum):
    LOCAL_AUTHOR = "local_author"
    FETCHED_REMOTE = "fetched_remote"


class RequestStatus(str, Enum):
    PENDING_PICKUP = "pending_pickup"
    IN_TRANSIT = "in_transit"
    AT_GATEWAY = "at_gateway"
    FULFILLED = "fulfilled"
    FAILED = "failed"


_STATUS_ORDER = {
    RequestStatus.PENDING_PICKUP: 0,
    RequestStatus.IN_TRANSIT: 1,
    RequestStatus.AT_GATEWAY: 2,
    RequestStatus.FULFILLED: 3,
    RequestStatus.FAILED: 3,
}


def content_id(title: str, version: int) -> str:
    raw = title.encode("utf-8")
    return hashlib.sha256(struct.pack("<H", len(raw)) + raw + struct.pack("<I", version)).hexdigest()


def request_id(topic: str, requester: str, created_at: int) -> str:
    t = topic.encode("utf-8")
    r = requester.encode("utf-8")
    return hashlib.sha256(
        struct.pack("<H", len(t)) + t + struct.pack("<H", len(r)) + r + struct.pack("<q", created_at)
    ).hexdigest()


@dataclass
class ContentItem:
    content_id: str
    title: str
    body: str
    version: int
    origin: Origin
    updated_at: int
    remote_version: int = 0  # publisher's version for synced items; stale guard


@dataclass
class TopicRequest:
    request_id: str
    topic: str
    requester: str
    status: RequestStatus
    created_at: int
    resolved_at: int | None = None
    failure_reason: str = ""
    bundle_id: str = ""
    history: list[str] = field(default_factory=list)


# -- payload schema ----------------------------------------------------------


def encode_topic_request(topic: str, req_id: str, requester: str) -> bytes:
    return json.dumps(
        {"schema": SCHEMA_VERSION, "type": "topic_request", "topic": topic,
         "request_id": req_id, "requester": requester},
        sort_keys=True,
    ).encode("utf-8")


def encode_content_update(title: str, version: int, body: str, origin: Origin) -> bytes:
    return json.dumps(
        {"schema": SCHEMA_VERSION, "type": "content_update", "title": title,
         "version": version, "body": body, "origin": origin.value},
        sort_keys=True,
    ).encode("utf-8")


def encode_content_response(req_id: str, topic: str, title: str | None, body: str | None,
                            error: str | None = None) -> bytes:
    msg: dict = {"schema": SCHEMA_VERSION, "type": "content_response",
                 "request_id": req_id, "topic": topic}
    if error is None:
        msg["title"] = title
        msg["body"] = body
        msg["origin"] = Origin.FETCHED_REMOTE.value
    else:
        msg["error"] = error
    return json.dumps(msg, sort_keys=True).encode("utf-8")


def parse_app_message(payload: bytes) -> dict:
    """Parse and validate a bundle payload; raises MalformedPayload."""
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedPayload(f"payload is not JSON: {e}") from e
    if not isinstance(msg, dict):
        raise MalformedPayload("payload is not an object")
    if msg.get("schema") != SCHEMA_VERSION:
        raise MalformedPayload(f"unsupported schema {msg.get('schema')!r}")
    mtype = msg.get("type")
    required = {
        "topic_request": ("topic", "request_id", "requester"),
        "content_update": ("title", "version", "body", "origin"),
        "content_response": ("request_id", "topic"),
    }
    if mtype not in required:
        raise MalformedPayload(f"unknown type {mtype!r}")
    for key in required[mtype]:
        if key not in msg:
            raise MalformedPayload(f"{mtype} missing field {key!r}")
    if mtype == "content_response" and "error" not in msg:
        for key in ("title", "body"):
            if key not in msg:
                raise MalformedPayload(f"content_response missing field {key!r}")
    return msg


# -- persistence helpers -------------------------------------------------------


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1), encoding="utf-8")
    os.replace(tmp, path)


class ContentService:
    """Catalog + request table + inbound-bundle dispatch for one node."""

    def __init__(
        self,
        root: str | Path,
        node_id: str,
        role: NodeRole,
        store: BundleStore,
        gateway_id: str = "",
        sync_targets: tuple[str, ...] = (),
        request_ttl: int = DEFAULT_REQUEST_TTL_MS,
        content_ttl: int = DEFAULT_CONTENT_TTL_MS,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "bodies").mkdir(exist_ok=True)
        self.node_id = node_id
        self.role = role
        self.store = store
        self.gateway_id = gateway_id
        self.sync_targets = sync_targets
        self.request_ttl = request_ttl
        self.content_ttl = content_ttl
        self.items: dict[tuple[str, int], ContentItem] = {}
        self.requests: dict[str, TopicRequest] = {}
        self.processed_bundles: set[str] = set()
        self.quarantined: set[str] = set()
        self.fetch_inbox: list[dict] = []  # urban: parsed topic_request messages
        self._load()

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        cat = self.root / "catalog.json"
        if cat.exists():
            for rec in json.loads(cat.read_text(encoding="utf-8")):
                body = (self.root / "bodies" / f"{rec['content_id']}.txt").read_text(encoding="utf-8")
                item = ContentItem(
                    content_id=rec["content_id"],
                    title=rec["title"],
                    body=body,
                    version=rec["version"],
                    origin=Origin(rec["origin"]),
                    updated_at=rec["updated_at"],
                    remote_version=rec.get("remote_version", 0),
                )
                self.items[(item.title, item.version)] = item
        req = self.root / "requests.json"
        if req.exists():
            for rec in json.loads(req.read_text(encoding="utf-8")):
                r = TopicRequest(
                    request_id=rec["request_id"],
                    topic=rec["topic"],
                    requester=rec["requester"],
                    status=RequestStatus(rec["status"]),
                    created_at=rec["created_at"],
                    resolved_at=rec.get("resolved_at"),
                    failure_reason=rec.get("failure_reason", ""),
                    bundle_id=rec.get("bundle_id", ""),
                    history=list(rec.get("history", [])),
                )
                self.requests[r.request_id] = r
        st = self.root / "state.json"
        if st.exists():
            data = json.loads(st.read_text(encoding="utf-8"))
            self.processed_bundles = set(data.get("processed_bundles", []))
            self.quarantined = set(data.get("quarantined", []))

    def _save_catalog(self) -> None:
        recs = [
            {
                "content_id": it.content_id,
                "title": it.title,
                "version": it.version,
                "origin": it.origin.value,
                "updated_at": it.updated_at,
                "remote_version": it.remote_version,
            }
            for it in sorted(self.items.values(), key=lambda i: (i.title, i.version))
        ]
        _write_json_atomic(self.root / "catalog.json", recs)

    def _save_requests(self) -> None:
        recs = [
            {
                "request_id": r.request_id,
                "topic": r.topic,
                "requester": r.requester,
                "status": r.status.value,
                "created_at": r.created_at,
                "resolved_at": r.resolved_at,
                "failure_reason": r.failure_reason,
                "bundle_id": r.bundle_id,
                "history": r.history,
            }
            for r in sorted(self.requests.values(), key=lambda r: (r.created_at, r.request_id))
        ]
        _write_json_atomic(self.root / "requests.json", recs)

    def _save_state(self) -> None:
        _write_json_atomic(
            self.root / "state.json",
            {"processed_bundles": sorted(self.processed_bundles),
             "quarantined": sorted(self.quarantined)},
        )

    # -- catalog -----------------------------------------------------------

    def latest_version(self, title: str) -> int:
        versions = [v for (t, v) in self.items if t == title]
        return max(versions) if versions else 0

    def _store_item(self, item: ContentItem) -> None:
        (self.root / "bodies" / f"{item.content_id}.txt").write_text(item.body, encoding="utf-8")
        self.items[(item.title, item.version)] = item
        self._save_catalog()

    def publish_content(self, title: str, body: str, now: int,
                        origin: Origin = Origin.LOCAL_AUTHOR) -> ContentItem:
        title = title.strip()
        if not title:
            raise EmptyTitle("title must be nonempty")
        version = self.latest_version(title) + 1
        item = ContentItem(
            content_id=content_id(title, version),
            title=title,
            body=body,
            version=version,
            origin=origin,
            updated_at=now,
        )
        self._store_item(item)
        for target in self.sync_targets:
            bundle = create_bundle(
                self.node_id, target, Kind.CONTENT_UPDATE, Priority.CONTENT,
                encode_content_update(title, version, body, origin),
                self.content_ttl, now,
            )
            self.store.put(bundle, now=now)
        return item

    def list_content(self) -> list[ContentItem]:
        """Latest version per title, sorted by title."""
        latest: dict[str, ContentItem] = {}
        for (title, version), item in self.items.items():
            cur = latest.get(title)
            if cur is None or version > cur.version:
                latest[title] = item
        return sorted(latest.values(), key=lambda i: i.title)

    def get_content(self, title: str, version: int | None = None) -> ContentItem:
        if version is None:
            version = self.latest_version(title)
        item = self.items.get((title, version))
        if item is None:
            raise NotFound(f"no content {title!r} v{version}")
        return item

    # -- requests ----------------------------------------------------------

    def open_request_for(self, topic: str) -> TopicRequest | None:
        for r in self.requests.values():
            if (
                r.topic == topic
                and r.requester == self.node_id
                and r.status not in (RequestStatus.FULFILLED, RequestStatus.FAILED)
            ):
                return r
        return None

    def request_topic(self, topic: str, now: int) -> TopicRequest:
        topic = topic.strip()
        if not topic:
            raise EmptyTopic("topic must be nonempty")
        if not self.gateway_id:
            raise ContentError("no urban gateway configured for this node")
        existing = self.open_request_for(topic)
        if existing is not None:
            return existing
        rid = request_id(topic, self.node_id, now)
        bundle = create_bundle(
            self.node_id, self.gateway_id, Kind.TOPIC_REQUEST, Priority.CONTROL,
            encode_topic_request(topic, rid, self.node_id), self.request_ttl, now,
        )
        self.store.put(bundle, now=now)
        req = TopicRequest(
            request_id=rid,
            topic=topic,
            requester=self.node_id,
            status=RequestStatus.PENDING_PICKUP,
            created_at=now,
            bundle_id=bundle.id.hex(),
            history=[RequestStatus.PENDING_PICKUP.value],
        )
        self.requests[rid] = req
        self._save_requests()
        return req

    def _advance(self, req: TopicRequest, status: RequestStatus, now: int,
                 reason: str = "") -> None:
        if _STATUS_ORDER[status] < _STATUS_ORDER[req.status]:
            return  # never move backward
        if status == req.status:
            return
        req.status = status
        req.history.append(status.value)
        if status in (RequestStatus.FULFILLED, RequestStatus.FAILED):
            req.resolved_at = now
            req.failure_reason = reason
        self._save_requests()

    def on_custody_delete(self, bundle_id_hex: str, now: int) -> None:
        """Custody of an outbound bundle left this node."""
        for r in self.requests.values():
            if r.bundle_id == bundle_id_hex and r.status == RequestStatus.PENDING_PICKUP:
                self._advance(r, RequestStatus.IN_TRANSIT, now)

    def expire_requests(self, now: int) -> list[TopicRequest]:
        """Fail open requests whose bundle TTL has lapsed."""
        failed = []
        for r in self.requests.values():
            if r.status in (RequestStatus.PENDING_PICKUP, RequestStatus.IN_TRANSIT):
                if r.created_at + self.request_ttl <= now:
                    self._advance(r, RequestStatus.FAILED, now, reason="ttl_expired")
                    failed.append(r)
        return failed

    # -- inbound dispatch ----------------------------------------------------

    def apply_incoming_bundle(self, bundle: Bundle, now: int) -> str:
        """Dispatch a Complete bundle addressed to this node. Idempotent per id.

        Returns a short effect tag (for logs and tests).
        """
        bid = bundle.id.hex()
        if bid in self.processed_bundles:
            return "duplicate"
        if bid in self.quarantined:
            return "quarantined"
        try:
            msg = parse_app_message(bundle.payload)
        except MalformedPayload as e:
            log.warning("quarantining malformed bundle %s: %s", bid[:12], e)
            self.quarantined.add(bid)
            self._save_state()
            return "quarantined"
        effect = self._dispatch(msg, now)
        self.processed_bundles.add(bid)
        self._save_state()
        return effect

    def _dispatch(self, msg: dict, now: int) -> str:
        mtype = msg["type"]
        if mtype == "topic_request":
            if self.role != NodeRole.URBAN:
                log.warning("topic_request arrived at non-urban node %s", self.node_id)
                return "ignored"
            rid = msg["request_id"]
            req = self.requests.get(rid)
            if req is None:
                req = TopicRequest(
                    request_id=rid,
                    topic=msg["topic"],
                    requester=msg["requester"],
                    status=RequestStatus.AT_GATEWAY,
                    created_at=now,
                    history=[RequestStatus.AT_GATEWAY.value],
                )
                self.requests[rid] = req
                self._save_requests()
            self.fetch_inbox.append(msg)
            return "fetch_job_enqueued"
        if mtype == "content_update":
            applied = self._upsert_remote(
                msg["title"], msg["body"], Origin(msg["origin"]),
                int(msg["version"]), now,
            )
            return "content_updated" if applied else "stale_update_skipped"
        # content_response
        rid = msg["request_id"]
        req = self.requests.get(rid)
        if "error" in msg:
            if req is not None:
                self._advance(req, RequestStatus.AT_GATEWAY, now)
                self._advance(req, RequestStatus.FAILED, now, reason=msg["error"])
            else:
                log.warning("error response for unknown request %s", rid[:12])
            return "request_failed"
        self._upsert_remote(msg["title"], msg["body"], Origin.FETCHED_REMOTE, 0, now)
        if req is None:
            log.warning("response for unknown request %s; content kept", rid[:12])
            return "content_upserted_unknown_request"
        self._advance(req, RequestStatus.AT_GATEWAY, now)
        self._advance(req, RequestStatus.FULFILLED, now)
        return "request_fulfilled"

    def _upsert_remote(self, title: str, body: str, origin: Origin,
                       remote_version: int, now: int) -> bool:
        title = title.strip()
        if not title:
            return False
        if remote_version:
            current = max(
                (it.remote_version for it in self.items.values() if it.title == title),
                default=0,
            )
            if remote_version <= current:
                return False  # stale replay of an older published version
        version = self.latest_version(title) + 1
        item = ContentItem(
            content_id=content_id(title, version),
            title=title,
            body=body,
            version=version,
            origin=origin,
            updated_at=now,
            remote_version=remote_version,
        )
        self._store_item(item)
        return True

    # -- status -------------------------------------------------------------

    def freshness_ms(self, now: int) -> int | None:
        """Age of the newest catalog item, or None for an empty catalog."""
        if not self.items:
            return None
        newest = max(it.updated_at for it in self.items.values())
        return now - newest
