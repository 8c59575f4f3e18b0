"""Forwarding policy over the rural - mule - urban line topology.

Pure functions over an immutable role graph: rural and urban nodes hand
everything to mules, a mule hands a bundle only to its exact destination.
Mule-to-mule contacts exchange nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

from .bundle import BundleMeta

log = logging.getLogger(__name__)


class NodeRole(IntEnum):
    RURAL = 0
    MULE = 1
    URBAN = 2


class AcceptDecision(IntEnum):
    ACCEPT = 0
    REJECT_DUPLICATE = 1
    REJECT_QUOTA = 2


@dataclass(frozen=True)
class RoleGraph:
    """Static per-run map of node id -> role."""

    roles: dict[str, NodeRole]

    def role_of(self, node_id: str) -> NodeRole | None:
        return self.roles.get(node_id)

    @classmethod
    def of(cls, pairs: dict[str, NodeRole]) -> "RoleGraph":
        return cls(roles=dict(pairs))


def should_offer(
    meta: BundleMeta,
    self_id: str,
    self_role: NodeRole,
    peer_id: str,
    peer_role: NodeRole,
    graph: RoleGraph,
) -> bool:
    """True iff this node should offer the bundle to this peer.

    Offers go to the destination itself, or one step along the line toward
    it. Bundles sourced by the peer never bounce back, and a mule only
    releases a bundle to its exact destination.
    """
    if meta.destination == self_id:
        return False  # we are the destination; consume, don't forward
    if meta.source == peer_id:
        return False  # no ping-pong
    if peer_id == meta.destination:
        return True
    dest_role = graph.role_of(meta.destination)
    if dest_role is None:
        log.warning("bundle %s has unknown destination %r; retained until TTL",
                    meta.id.hex()[:12], meta.destination)
        return False
    if self_role in (NodeRole.RURAL, NodeRole.URBAN):
        # next hop from a stationary node is always a mule
        return peer_role == NodeRole.MULE
    # self is a mule: only the exact destination qualifies (handled above),
    # and mule-to-mule exchanges are disabled by policy
    return False


def accept_offer(meta: BundleMeta, complete_locally: bool, free_quota: int) -> AcceptDecision:
    """Receiver-side gate on an offered bundle: dedup first, then quota."""
    if complete_locally:
        return AcceptDecision.REJECT_DUPLICATE
    if meta.payload_len > free_quota:
        return AcceptDecision.REJECT_QUOTA
    return AcceptDecision.ACCEPT


def custody_transfers(
    meta: BundleMeta,
    self_role: NodeRole,
    peer_id: str,
    peer_role: NodeRole,
    graph: RoleGraph,
) -> bool:
    """True iff a full ACK from this peer releases our copy (single-copy custody).

    The peer must be the destination, or the next hop toward it from our
    role (stationary nodes hand custody to mules; a mule hands custody only
    to the destination itself, which the first clause covers).
    """
    if peer_id == meta.destination:
        return True
    if graph.role_of(meta.destination) is None:
        return False
    if self_role in (NodeRole.RURAL, NodeRole.URBAN):
        return peer_role == NodeRole.MULE
    return False
