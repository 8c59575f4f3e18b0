"""Per-contact session state machine.

One machine drives one link. It is event-driven and deterministic: feeding
the same event sequence to the same starting state (over the same store
snapshot) reproduces the same action log byte for byte. The driver (node
daemon or simulator) owns the transport and the store; the machine only
emits actions.

Exchange shape: after BEACON/HELLO discovery both sides send a MANIFEST of
their full unexpired inventory (complete and partial, with ranges), then a
WANT listing what they will take and from which offset. Chunks then flow in
both directions, alternating one chunk per side (initiator first, decided by
the smaller node id) so the trace stays serial; a side whose peer has
nothing pending streams freely. Every chunk is ACKed cumulatively. The final
ACK for a bundle is sent only after the payload digest and bundle id verify,
so a full ACK is also the custody-release signal. A side with nothing left
to send or receive says BYE; BYE/BYE ends the session cleanly. LinkDown at
any other moment aborts it, keeping all persisted ranges for the next
contact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .bundle import BundleMeta, Kind, Priority, bundle_id
from .frames import Frame, FrameType, ManifestEntry, encode_frame, frame_wire_len
from .routing import AcceptDecision, NodeRole, RoleGraph, accept_offer, custody_transfers, should_offer

BEACON_INTERVAL = 1.0
HELLO_TIMEOUT = 3.0
IDLE_TIMEOUT = 5.0
DEFAULT_CHUNK_SIZE = 64 * 1024


class Phase(IntEnum):
    IDLE = 0
    HELLO_SENT = 1
    EXCHANGING = 2
    CLOSING = 3
    DONE = 4
    ABORTED = 5


# -- events ----------------------------------------------------------------


@dataclass(frozen=True)
class LinkUp:
    now: float


@dataclass(frozen=True)
class LinkDown:
    now: float


@dataclass(frozen=True)
class FrameReceived:
    now: float
    frame: Frame


@dataclass(frozen=True)
class Tick:
    now: float


Event = LinkUp | LinkDown | FrameReceived | Tick


# -- actions ----------------------------------------------------------------


@dataclass(frozen=True)
class SendFrame:
    frame: Frame


@dataclass(frozen=True)
class StoreChunk:
    meta: BundleMeta
    offset: int
    data: bytes


@dataclass(frozen=True)
class CompleteBundle:
    id: bytes


@dataclass(frozen=True)
class DeleteAfterCustody:
    id: bytes


@dataclass(frozen=True)
class DiscardRanges:
    """Corrupt-completion recovery: drop stored ranges back to prefix_end."""

    id: bytes
    prefix_end: int


@dataclass(frozen=True)
class CloseLink:
    reason: str


Action = SendFrame | StoreChunk | CompleteBundle | DeleteAfterCustody | DiscardRanges | CloseLink


# -- local inventory view ----------------------------------------------------


@dataclass(frozen=True)
class LocalEntry:
    meta: BundleMeta
    complete: bool
    prefix_end: int


ChunkReader = Callable[[bytes, int, int], bytes]


@dataclass(frozen=True)
class TransferPlan:
    """Ordered (bundle id, start offset, total length) triples to push."""

    entries: tuple[tuple[bytes, int, int], ...]


def plan_transfer(
    local_offers: list[LocalEntry],
    peer_manifest: dict[bytes, ManifestEntry],
    routing_filter: Callable[[BundleMeta], bool],
) -> TransferPlan:
    """Sender-side push plan: offer order, minus peer completes, resuming partials."""
    out = []
    for entry in local_offers:
        if not entry.complete:
            continue
        meta = entry.meta
        if not routing_filter(meta):
            continue
        peer = peer_manifest.get(meta.id)
        start = 0
        if peer is not None:
            if peer.complete:
                continue
            if peer.ranges and peer.ranges[0][0] == 0:
                start = peer.ranges[0][1]
        if start >= meta.payload_len and meta.payload_len > 0:
            continue
        out.append((meta.id, start, meta.payload_len))
    return TransferPlan(entries=tuple(out))


@dataclass
class _Inbound:
    meta: BundleMeta
    next_offset: int
    hasher: "hashlib._Hash"
    want_start: int


@dataclass
class _Outbound:
    id: bytes
    next_offset: int
    total: int
    acked_to: int = 0
    custody_done: bool = False


@dataclass
class SessionState:
    self_id: str
    self_role: NodeRole
    graph: RoleGraph
    inventory: dict[bytes, LocalEntry]
    offer_order: list[bytes]  # complete bundles in offer-queue order
    reader: ChunkReader
    free_quota: int
    chunk_size: int = DEFAULT_CHUNK_SIZE

    phase: Phase = Phase.IDLE
    peer_id: str = ""
    peer_role: NodeRole = NodeRole.MULE
    effective_chunk: int = DEFAULT_CHUNK_SIZE

    link_up: bool = False
    hello_sent: bool = False
    manifest_sent: bool = False
    want_sent: bool = False
    got_manifest: bool = False
    got_want: bool = False
    is_initiator: bool = False
    received_any_chunk: bool = False

    out_plan: TransferPlan | None = None
    outgoing: list[_Outbound] = field(default_factory=list)
    inbound: dict[bytes, _Inbound] = field(default_factory=dict)
    completed: set[bytes] = field(default_factory=set)
    custody_deleted: set[bytes] = field(default_factory=set)
    bye_sent: bool = False

    bytes_sent: int = 0
    bytes_received: int = 0
    chunk_payload_sent: int = 0
    chunk_payload_received: int = 0
    handshake_bytes: int = 0
    resumed_ids: set[bytes] = field(default_factory=set)

    last_rx: float = 0.0
    hello_sent_at: float = 0.0
    next_beacon_at: float = 0.0
    abort_reason: str = ""

    # -- helpers -----------------------------------------------------------

    def _send(self, actions: list[Action], frame: Frame) -> None:
        n = frame_wire_len(frame)
        self.bytes_sent += n
        if frame.type == FrameType.CHUNK:
            self.chunk_payload_sent += len(frame.data)
        else:
            self.handshake_bytes += n
        actions.append(SendFrame(frame))

    def _abort(self, actions: list[Action], reason: str) -> list[Action]:
        if self.phase != Phase.ABORTED:
            self.phase = Phase.ABORTED
            self.abort_reason = reason
            actions.append(CloseLink(reason))
        return actions

    def _beacon_frame(self) -> Frame:
        return Frame(type=FrameType.BEACON, node_id=self.self_id, role=int(self.self_role))

    def _hello_frame(self) -> Frame:
        return Frame(
            type=FrameType.HELLO,
            node_id=self.self_id,
            role=int(self.self_role),
            chunk_size=self.chunk_size,
        )

    def _manifest_frame(self) -> Frame:
        # partials first (cheap for the peer to finish), then offers in order;
        # expiry is already filtered out of the inventory snapshot
        partial_ids = sorted(b for b, e in self.inventory.items() if not e.complete)
        entries = []
        budget = 900 * 1024  # stay under the 1 MiB body cap
        used = 0
        for bid in partial_ids + self.offer_order:
            e = self.inventory[bid]
            m = e.meta
            ranges: tuple[tuple[int, int], ...] = ()
            if not e.complete and e.prefix_end:
                ranges = ((0, e.prefix_end),)
            ent = ManifestEntry(
                id=m.id,
                total_len=m.payload_len,
                source=m.source,
                destination=m.destination,
                created_at=m.created_at,
                ttl=m.ttl,
                kind=int(m.kind),
                priority=int(m.priority),
                payload_digest=m.payload_digest,
                complete=e.complete,
                ranges=ranges,
            )
            cost = 120 + len(m.source) + len(m.destination) + 16 * len(ranges)
            if used + cost > budget:
                break
            used += cost
            entries.append(ent)
        return Frame(type=FrameType.MANIFEST, entries=tuple(entries))

    def _meta_of_entry(self, e: ManifestEntry) -> BundleMeta:
        return BundleMeta(
            id=e.id,
            source=e.source,
            destination=e.destination,
            created_at=e.created_at,
            ttl=e.ttl,
            priority=Priority(e.priority),
            kind=Kind(e.kind),
            payload_len=e.total_len,
            payload_digest=e.payload_digest,
        )

    def _routing_filter(self) -> Callable[[BundleMeta], bool]:
        return lambda meta: should_offer(
            meta, self.self_id, self.self_role, self.peer_id, self.peer_role, self.graph
        )

    def _peer_would_offer(self, meta: BundleMeta) -> bool:
        return should_offer(
            meta, self.peer_id, self.peer_role, self.self_id, self.self_role, self.graph
        )

    # -- the transition function --------------------------------------------

    def step(self, event: Event) -> list[Action]:
        actions: list[Action] = []
        if isinstance(event, LinkUp):
            if self.phase != Phase.IDLE:
                return self._abort(actions, "link up outside idle")
            self.link_up = True
            self.next_beacon_at = event.now + BEACON_INTERVAL
            self._send(actions, self._beacon_frame())
            return actions
        if isinstance(event, LinkDown):
            if self.phase in (Phase.DONE, Phase.ABORTED):
                return actions
            return self._abort(actions, "link down")
        if isinstance(event, Tick):
            return self._on_tick(event.now, actions)
        assert isinstance(event, FrameReceived)
        self.last_rx = event.now
        frame = event.frame
        self.bytes_received += frame_wire_len(frame)
        if frame.type == FrameType.CHUNK:
            self.chunk_payload_received += len(frame.data)
        else:
            self.handshake_bytes += frame_wire_len(frame)
        handler = {
            FrameType.BEACON: self._on_beacon,
            FrameType.HELLO: self._on_hello,
            FrameType.MANIFEST: self._on_manifest,
            FrameType.WANT: self._on_want,
            FrameType.CHUNK: self._on_chunk,
            FrameType.ACK: self._on_ack,
            FrameType.BYE: self._on_bye,
        }[frame.type]
        return handler(event.now, frame, actions)

    def _on_tick(self, now: float, actions: list[Action]) -> list[Action]:
        if self.phase == Phase.IDLE and self.link_up:
            if now >= self.next_beacon_at:
                self.next_beacon_at = now + BEACON_INTERVAL
                self._send(actions, self._beacon_frame())
        elif self.phase == Phase.HELLO_SENT:
            if now - self.hello_sent_at >= HELLO_TIMEOUT:
                return self._abort(actions, "hello timeout")
        elif self.phase in (Phase.EXCHANGING, Phase.CLOSING):
            if now - self.last_rx >= IDLE_TIMEOUT:
                return self._abort(actions, "idle timeout")
        return actions

    def _record_peer(self, frame: Frame) -> None:
        self.peer_id = frame.node_id
        self.peer_role = NodeRole(frame.role)
        self.is_initiator = self.self_id < self.peer_id

    def _on_beacon(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase == Phase.IDLE:
            self._record_peer(frame)
            self.hello_sent = True
            self.hello_sent_at = now
            self.phase = Phase.HELLO_SENT
            self._send(actions, self._hello_frame())
        # beacons in later phases are harmless repeats
        return actions

    def _on_hello(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase not in (Phase.IDLE, Phase.HELLO_SENT):
            return self._abort(actions, "unexpected HELLO")
        self._record_peer(frame)
        if frame.chunk_size:
            self.effective_chunk = min(self.chunk_size, frame.chunk_size)
        if not self.hello_sent:
            self.hello_sent = True
            self.hello_sent_at = now
            self._send(actions, self._hello_frame())
        self.phase = Phase.EXCHANGING
        self.manifest_sent = True
        self._send(actions, self._manifest_frame())
        return actions

    def _on_manifest(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase != Phase.EXCHANGING or self.got_manifest:
            return self._abort(actions, "unexpected MANIFEST")
        self.got_manifest = True
        peer_map = {e.id: e for e in frame.entries}

        # custody: the peer already holds some of our completes
        for e in frame.entries:
            if not e.complete:
                continue
            local = self.inventory.get(e.id)
            if local is None or not local.complete:
                continue
            meta = local.meta
            if meta.destination == self.self_id:
                continue
            if e.id not in self.custody_deleted and custody_transfers(
                meta, self.self_role, self.peer_id, self.peer_role, self.graph
            ):
                self.custody_deleted.add(e.id)
                actions.append(DeleteAfterCustody(e.id))

        # what we will push
        offers = [self.inventory[b] for b in self.offer_order if self.inventory[b].complete]
        self.out_plan = plan_transfer(offers, peer_map, self._routing_filter())

        # what we want from them
        wants: list[tuple[bytes, int, BundleMeta]] = []
        quota = self.free_quota
        candidates = sorted(
            (e for e in frame.entries if e.complete),
            key=lambda e: (e.priority, e.created_at, e.id),
        )
        zero_len: list[BundleMeta] = []
        for e in candidates:
            meta = self._meta_of_entry(e)
            local = self.inventory.get(e.id)
            if local is not None and local.complete:
                continue
            if e.id in self.completed:
                continue
            if not self._peer_would_offer(meta):
                continue
            already = meta.payload_len if local is not None else 0
            if accept_offer(meta, False, quota + already) != AcceptDecision.ACCEPT:
                continue
            if meta.payload_len == 0:
                # nothing to stream; completes straight from the manifest
                zero_len.append(meta)
                continue
            if local is None:
                quota -= meta.payload_len
            start = local.prefix_end if local is not None else 0
            wants.append((e.id, start, meta))
        self.want_sent = True
        self._send(
            actions,
            Frame(type=FrameType.WANT, wants=tuple((bid, start) for bid, start, _ in wants)),
        )
        for meta in zero_len:
            self.completed.add(meta.id)
            actions.append(StoreChunk(meta=meta, offset=0, data=b""))
            actions.append(CompleteBundle(meta.id))
            self._send(actions, Frame(type=FrameType.ACK, bundle_id=meta.id, acked_to=0))
        for bid, start, meta in wants:
            h = hashlib.sha256()
            if start:
                self.resumed_ids.add(bid)
                h.update(self.reader(bid, 0, start))
            self.inbound[bid] = _Inbound(meta=meta, next_offset=start, hasher=h, want_start=start)
        self._maybe_send_chunk(actions)
        self._maybe_close(actions)
        return actions

    def _on_want(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase != Phase.EXCHANGING or self.out_plan is None:
            return self._abort(actions, "unexpected WANT")
        planned = {bid: (start, total) for bid, start, total in self.out_plan.entries}
        queued = {o.id: o for o in self.outgoing}
        for bid, want_start in frame.wants:
            if bid not in planned:
                continue
            if bid in queued:
                # re-request (verification failure at the peer): rewind
                o = queued[bid]
                o.next_offset = want_start
                o.acked_to = want_start
                o.custody_done = False
                continue
            _, total = planned[bid]
            if want_start > 0:
                self.resumed_ids.add(bid)
            self.outgoing.append(
                _Outbound(id=bid, next_offset=want_start, total=total, acked_to=want_start)
            )
        rank = {bid: i for i, (bid, _, _) in enumerate(self.out_plan.entries)}
        self.outgoing.sort(key=lambda o: rank[o.id])
        self.got_want = True
        self._maybe_send_chunk(actions)
        self._maybe_close(actions)
        return actions

    def _inbound_pending(self) -> bool:
        return bool(self.inbound)

    def _out_pending(self) -> list[_Outbound]:
        return [o for o in self.outgoing if o.next_offset < o.total]

    def _unacked(self) -> list[_Outbound]:
        return [o for o in self.outgoing if o.acked_to < o.total]

    def _maybe_send_chunk(self, actions: list[Action]) -> None:
        if self.phase != Phase.EXCHANGING or not self.got_want:
            return
        # initiator opens the chunk exchange; afterwards each received chunk
        # (or, once the peer is drained, each ACK) triggers the next send
        if not (self.is_initiator or self.received_any_chunk or not self._inbound_pending()):
            return
        pending = self._out_pending()
        if not pending:
            return
        o = pending[0]
        length = min(self.effective_chunk, o.total - o.next_offset)
        data = self.reader(o.id, o.next_offset, length)
        frame = Frame(type=FrameType.CHUNK, bundle_id=o.id, offset=o.next_offset, data=data)
        o.next_offset += length
        self._send(actions, frame)

    def _on_chunk(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase != Phase.EXCHANGING:
            return self._abort(actions, "unexpected CHUNK")
        self.received_any_chunk = True
        ib = self.inbound.get(frame.bundle_id)
        if ib is None:
            return self._abort(actions, "CHUNK for bundle not wanted")
        if frame.offset + len(frame.data) <= ib.next_offset:
            return actions  # stale duplicate
        if frame.offset != ib.next_offset:
            return self._abort(actions, "CHUNK out of order")
        actions.append(StoreChunk(meta=ib.meta, offset=frame.offset, data=frame.data))
        ib.hasher.update(frame.data)
        ib.next_offset += len(frame.data)
        if ib.next_offset >= ib.meta.payload_len:
            digest = ib.hasher.digest()
            expected_id = bundle_id(ib.meta.source, ib.meta.destination, ib.meta.created_at, digest)
            if digest == ib.meta.payload_digest and expected_id == ib.meta.id:
                self.completed.add(ib.meta.id)
                del self.inbound[frame.bundle_id]
                actions.append(CompleteBundle(frame.bundle_id))
                self._send(
                    actions,
                    Frame(type=FrameType.ACK, bundle_id=frame.bundle_id, acked_to=ib.next_offset),
                )
            else:
                # payload failed verification: restart this bundle from zero
                actions.append(DiscardRanges(id=frame.bundle_id, prefix_end=0))
                ib.next_offset = 0
                ib.want_start = 0
                ib.hasher = hashlib.sha256()
                self._send(
                    actions, Frame(type=FrameType.WANT, wants=((frame.bundle_id, 0),))
                )
        else:
            self._send(
                actions,
                Frame(type=FrameType.ACK, bundle_id=frame.bundle_id, acked_to=ib.next_offset),
            )
        self._maybe_send_chunk(actions)
        self._maybe_close(actions)
        return actions

    def _on_ack(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase not in (Phase.EXCHANGING, Phase.CLOSING):
            return self._abort(actions, "unexpected ACK")
        target = next((o for o in self.outgoing if o.id == frame.bundle_id), None)
        if target is None:
            # zero-length bundles are acked straight off the manifest
            entry = self.inventory.get(frame.bundle_id)
            if (
                entry is not None
                and entry.complete
                and frame.acked_to >= entry.meta.payload_len
                and frame.bundle_id not in self.custody_deleted
            ):
                act = custody_handoff(self, frame.bundle_id)
                if act is not None:
                    actions.append(act)
            self._maybe_close(actions)
            return actions
        target.acked_to = max(target.acked_to, frame.acked_to)
        if target.acked_to >= target.total and not target.custody_done:
            target.custody_done = True
            entry = self.inventory.get(target.id)
            if entry is not None and target.id not in self.custody_deleted:
                act = custody_handoff(self, target.id)
                if act is not None:
                    actions.append(act)
        # streaming: peer has nothing pending for us, keep the pipe full
        if not self._inbound_pending():
            self._maybe_send_chunk(actions)
        self._maybe_close(actions)
        return actions

    def _on_bye(self, now: float, frame: Frame, actions: list[Action]) -> list[Action]:
        if self.phase == Phase.EXCHANGING:
            self.phase = Phase.DONE
            self._send(actions, Frame(type=FrameType.BYE))
            actions.append(CloseLink("peer done"))
            return actions
        if self.phase == Phase.CLOSING:
            self.phase = Phase.DONE
            actions.append(CloseLink("session complete"))
            return actions
        return self._abort(actions, "unexpected BYE")

    def _maybe_close(self, actions: list[Action]) -> None:
        if self.phase != Phase.EXCHANGING or self.bye_sent:
            return
        if not (self.got_manifest and self.got_want):
            return
        if self._out_pending() or self._unacked() or self._inbound_pending():
            return
        self.bye_sent = True
        self.phase = Phase.CLOSING
        self._send(actions, Frame(type=FrameType.BYE))


def session_step(state: SessionState, event: Event) -> tuple[SessionState, list[Action]]:
    """Advance the machine one event; deterministic in (state, event, store)."""
    return state, state.step(event)


def custody_handoff(state: SessionState, acked_bundle_id: bytes) -> DeleteAfterCustody | None:
    """Release our copy after a full ACK when the peer carries it onward."""
    entry = state.inventory.get(acked_bundle_id)
    if entry is None:
        return None
    if custody_transfers(entry.meta, state.self_role, state.peer_id, state.peer_role, state.graph):
        state.custody_deleted.add(acked_bundle_id)
        return DeleteAfterCustody(acked_bundle_id)
    return None
