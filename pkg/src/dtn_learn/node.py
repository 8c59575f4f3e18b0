"""A DTN node: store + session driver + role services glued together.

The node owns the single-writer store. Sessions emit actions; the node
applies them (persisting chunks, promoting completions, releasing custody)
and hands the frames to whatever transport is in use - the simulator's
budgeted shim or a real socket.
"""

from __future__ import annotations

import logging
from typing import Callable

from .bundle import Bundle, BundleMeta
from .content import ContentService
from .frames import Frame
from .gateway import FetchGateway
from .routing import NodeRole, RoleGraph
from .session import (
    CloseLink,
    CompleteBundle,
    DeleteAfterCustody,
    DiscardRanges,
    Event,
    LocalEntry,
    SendFrame,
    SessionState,
    StoreChunk,
    DEFAULT_CHUNK_SIZE,
)
from .store import BundleStore, RemoveReason, StorageFull

log = logging.getLogger(__name__)


class DtnNode:
    def __init__(
        self,
        node_id: str,
        role: NodeRole,
        store: BundleStore,
        graph: RoleGraph,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        content: ContentService | None = None,
        gateway: FetchGateway | None = None,
    ):
        self.node_id = node_id
        self.role = role
        self.store = store
        self.graph = graph
        self.chunk_size = chunk_size
        self.content = content
        self.gateway = gateway
        self.last_peer_seen: tuple[str, float] | None = None
        # observers (simulator metrics, daemon logging)
        self.on_bundle_complete: Callable[[Bundle], None] | None = None
        self.on_custody_delete: Callable[[BundleMeta], None] | None = None

    def new_session(self, now_ms: int) -> SessionState:
        inventory: dict[bytes, LocalEntry] = {}
        for e in self.store.entries():
            if e.meta.expired(now_ms):
                continue
            inventory[e.meta.id] = LocalEntry(
                meta=e.meta, complete=e.complete, prefix_end=e.prefix_end()
            )
        return SessionState(
            self_id=self.node_id,
            self_role=self.role,
            graph=self.graph,
            inventory=inventory,
            offer_order=self.store.offer_queue(now_ms),
            reader=self.store.read_payload,
            free_quota=self.store.free_quota(),
            chunk_size=self.chunk_size,
        )

    def feed(self, session: SessionState, event: Event, now_ms: int) -> tuple[list[Frame], bool]:
        """Run one event through the session and apply its actions.

        Returns (frames to transmit, link should close).
        """
        try:
            actions = session.step(event)
        except Exception:
            log.exception("session step failed at %s", self.node_id)
            raise
        frames: list[Frame] = []
        close = False
        for act in actions:
            if isinstance(act, SendFrame):
                frames.append(act.frame)
            elif isinstance(act, StoreChunk):
                try:
                    self.store.begin_partial(act.meta, now_ms)
                    self.store.write_chunk(act.meta.id, act.offset, act.data)
                except StorageFull:
                    log.warning("%s: store full mid-transfer, aborting link", self.node_id)
                    close = True
                    break
            elif isinstance(act, CompleteBundle):
                self._complete(act.id, now_ms)
            elif isinstance(act, DeleteAfterCustody):
                self._custody_delete(act.id, now_ms)
            elif isinstance(act, DiscardRanges):
                self.store.discard_to_prefix(act.id, act.prefix_end)
            elif isinstance(act, CloseLink):
                close = True
        if session.peer_id:
            self.last_peer_seen = (session.peer_id, now_ms / 1000.0)
        return frames, close

    def _complete(self, bid: bytes, now_ms: int) -> None:
        if not self.store.promote(bid):
            log.error("%s: promote failed for %s", self.node_id, bid.hex()[:12])
            return
        bundle = self.store.get_bundle(bid)
        if bundle.destination == self.node_id and self.content is not None:
            effect = self.content.apply_incoming_bundle(bundle, now_ms)
            log.info("%s: bundle %s -> %s", self.node_id, bid.hex()[:12], effect)
            if self.gateway is not None:
                for msg in self.content.fetch_inbox:
                    self.gateway.enqueue(
                        msg["request_id"], msg["topic"], msg["requester"], now_ms
                    )
                self.content.fetch_inbox.clear()
        if self.on_bundle_complete is not None:
            self.on_bundle_complete(bundle)

    def _custody_delete(self, bid: bytes, now_ms: int) -> None:
        entry = self.store.get(bid)
        if entry is None:
            return
        meta = entry.meta
        self.store.remove(bid, RemoveReason.CUSTODY)
        if self.content is not None:
            self.content.on_custody_delete(bid.hex(), now_ms)
        if self.on_custody_delete is not None:
            self.on_custody_delete(meta)

    def run_gateway(self, now_ms: int) -> int:
        """Process due fetch jobs; response bundles join the outbound store."""
        if self.gateway is None:
            return 0
        bundles = self.gateway.process_due(now_ms)
        for b in bundles:
            self.store.put(b, now=now_ms)
        return len(bundles)

    def housekeeping(self, now_ms: int) -> list[bytes]:
        """TTL expiry for bundles and open requests."""
        expired = self.store.expire_bundles(now_ms)
        if self.content is not None:
            self.content.expire_requests(now_ms)
        return expired
