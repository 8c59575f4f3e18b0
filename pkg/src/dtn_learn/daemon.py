"""Long-running node daemon over real TCP sockets.

Stationary nodes (rural, urban) listen for mule connections and serve the
HTTP API; mules dial their configured stop addresses on a fixed period.
Discovery over TCP is in-stream: both ends send BEACON on connect and the
session machine takes it from there, identical to the simulator path.

Config is a documented key=value file; DTLN_<KEY> environment variables
override (see docs/cli.md).
"""

from __future__ import annotations

import logging
import os
import signal
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .api import ApiServer
from .content import ContentService
from .frames import FrameError, Truncated, decode_frame, encode_frame
from .gateway import CorpusSource, FetchGateway, LiveWikipediaSource
from .node import DtnNode
from .routing import NodeRole, RoleGraph
from .session import DEFAULT_CHUNK_SIZE, FrameReceived, LinkDown, LinkUp, Phase, Tick
from .store import BundleStore, DEFAULT_QUOTA

log = logging.getLogger(__name__)

ROLE_NAMES = {"rural": NodeRole.RURAL, "mule": NodeRole.MULE, "urban": NodeRole.URBAN}


class ConfigInvalid(Exception):
    pass


class BindFailure(Exception):
    pass


@dataclass
class NodeConfig:
    node_id: str
    role: NodeRole
    store_dir: str
    app_dir: str = ""
    quota_bytes: int = DEFAULT_QUOTA
    listen: str = ""  # host:port for stationary nodes
    contacts: tuple[str, ...] = ()  # mule: stop addresses to dial
    dial_period_s: float = 5.0
    api: str = ""  # host:port, empty disables
    gateway_id: str = ""
    corpus_dir: str = ""
    corpus_backend: str = "offline"  # offline | live
    chunk_size: int = DEFAULT_CHUNK_SIZE
    durability: str = "fsync"  # fsync | os
    ui_dir: str = ""
    sync_targets: tuple[str, ...] = ()
    peers: dict[str, str] = field(default_factory=dict)  # node_id -> role name

    @classmethod
    def parse(cls, path: str | Path) -> "NodeConfig":
        raw: dict[str, str] = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigInvalid(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        for key, value in os.environ.items():
            if key.startswith("DTLN_"):
                raw[key[len("DTLN_"):].lower()] = value
        return cls.from_dict(raw, base=Path(path).parent)

    @classmethod
    def from_dict(cls, raw: dict[str, str], base: Path | None = None) -> "NodeConfig":
        def resolve(p: str) -> str:
            if not p:
                return ""
            path = Path(p)
            if base is not None and not path.is_absolute():
                path = base / path
            return str(path)

        node_id = raw.get("node_id", "")
        if not node_id:
            raise ConfigInvalid("missing field: node_id")
        role_name = raw.get("role", "")
        if role_name not in ROLE_NAMES:
            raise ConfigInvalid(
                f"field role: expected rural|mule|urban, got {role_name!r}")
        role = ROLE_NAMES[role_name]
        store_dir = resolve(raw.get("store_dir", ""))
        if not store_dir:
            raise ConfigInvalid("missing field: store_dir")
        peers: dict[str, str] = {}
        for pair in raw.get("peers", "").split(","):
            pair = pair.strip()
            if not pair:
                continue
            if ":" not in pair:
                raise ConfigInvalid(f"field peers: expected id:role, got {pair!r}")
            pid, _, prole = pair.partition(":")
            if prole not in ROLE_NAMES:
                raise ConfigInvalid(f"field peers: unknown role {prole!r}")
            peers[pid.strip()] = prole.strip()
        cfg = cls(
            node_id=node_id,
            role=role,
            store_dir=store_dir,
            app_dir=resolve(raw.get("app_dir", "")) or str(Path(store_dir).parent / "app"),
            quota_bytes=int(raw.get("quota_bytes", DEFAULT_QUOTA)),
            listen=raw.get("listen", ""),
            contacts=tuple(c.strip() for c in raw.get("contacts", "").split(",") if c.strip()),
            dial_period_s=float(raw.get("dial_period_s", 5.0)),
            api=raw.get("api", ""),
            gateway_id=raw.get("gateway_id", ""),
            corpus_dir=resolve(raw.get("corpus_dir", "")),
            corpus_backend=raw.get("corpus_backend", "offline"),
            chunk_size=int(raw.get("chunk_size", DEFAULT_CHUNK_SIZE)),
            durability=raw.get("durability", "fsync"),
            ui_dir=resolve(raw.get("ui_dir", "")),
            sync_targets=tuple(s.strip() for s in raw.get("sync_targets", "").split(",") if s.strip()),
            peers=peers,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.role in (NodeRole.RURAL, NodeRole.URBAN) and not self.listen:
            raise ConfigInvalid(f"field listen: required for role {self.role.name.lower()}")
        if self.role == NodeRole.MULE and not self.contacts:
            raise ConfigInvalid("field contacts: a mule needs stop addresses to dial")
        if self.role == NodeRole.RURAL and not self.gateway_id:
            raise ConfigInvalid("field gateway_id: rural nodes need the urban gateway id")
        if self.role == NodeRole.URBAN and self.corpus_backend == "offline" and not self.corpus_dir:
            raise ConfigInvalid("field corpus_dir: required for the offline backend")
        if self.corpus_backend not in ("offline", "live"):
            raise ConfigInvalid(f"field corpus_backend: offline|live, got {self.corpus_backend!r}")
        if self.durability not in ("fsync", "os"):
            raise ConfigInvalid(f"field durability: fsync|os, got {self.durability!r}")
        if self.chunk_size < 1024 or self.chunk_size > 1 << 20:
            raise ConfigInvalid("field chunk_size: must be within 1 KiB .. 1 MiB")


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigInvalid(f"bad address {addr!r}, expected host:port")
    return host, int(port)


def build_node(cfg: NodeConfig) -> DtnNode:
    store = BundleStore(cfg.store_dir, quota=cfg.quota_bytes,
                        durable=cfg.durability == "fsync")
    graph_roles = {cfg.node_id: cfg.role}
    for pid, prole in cfg.peers.items():
        graph_roles[pid] = ROLE_NAMES[prole]
    if cfg.gateway_id:
        graph_roles.setdefault(cfg.gateway_id, NodeRole.URBAN)
    graph = RoleGraph.of(graph_roles)
    content = None
    gateway = None
    if cfg.role in (NodeRole.RURAL, NodeRole.URBAN):
        content = ContentService(
            cfg.app_dir, cfg.node_id, cfg.role, store,
            gateway_id=cfg.gateway_id, sync_targets=cfg.sync_targets,
        )
    if cfg.role == NodeRole.URBAN:
        if cfg.corpus_backend == "live":
            source = LiveWikipediaSource(enabled=True)
        else:
            source = CorpusSource(cfg.corpus_dir)
        gateway = FetchGateway(cfg.app_dir, cfg.node_id, source)
    return DtnNode(cfg.node_id, cfg.role, store, graph,
                   chunk_size=cfg.chunk_size, content=content, gateway=gateway)


def drive_socket_session(node: DtnNode, lock: threading.RLock, sock: socket.socket,
                         tick_interval: float = 0.5) -> Phase:
    """Run one contact over a connected socket; returns the final phase."""
    sock.settimeout(tick_interval)
    now_ms = int(time.time() * 1000)
    with lock:
        session = node.new_session(now_ms)
        frames, close = node.feed(session, LinkUp(time.monotonic()), now_ms)
    buf = b""
    try:
        for f in frames:
            sock.sendall(encode_frame(f))
        while not close and session.phase not in (Phase.DONE, Phase.ABORTED):
            try:
                data = sock.recv(256 * 1024)
            except socket.timeout:
                with lock:
                    frames, close = node.feed(session, Tick(time.monotonic()),
                                              int(time.time() * 1000))
                for f in frames:
                    sock.sendall(encode_frame(f))
                continue
            if not data:
                break
            buf += data
            while True:
                try:
                    frame, used = decode_frame(buf)
                except Truncated:
                    break
                except FrameError as e:
                    log.warning("%s: undecodable frame from peer: %s", node.node_id, e)
                    raise
                buf = buf[used:]
                with lock:
                    frames, close = node.feed(
                        session, FrameReceived(time.monotonic(), frame),
                        int(time.time() * 1000),
                    )
                for f in frames:
                    sock.sendall(encode_frame(f))
                if close:
                    break
    except (OSError, FrameError):
        pass
    finally:
        if session.phase not in (Phase.DONE, Phase.ABORTED):
            with lock:
                node.feed(session, LinkDown(time.monotonic()), int(time.time() * 1000))
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    return session.phase


class Daemon:
    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self.node = build_node(cfg)
        self.lock = threading.RLock()
        self.stop_event = threading.Event()
        self.listener: socket.socket | None = None
        self.api: ApiServer | None = None
        self.threads: list[threading.Thread] = []
        self.session_busy = threading.Lock()

    # -- stationary accept loop --------------------------------------------

    def _serve_contacts(self) -> None:
        assert self.listener is not None
        while not self.stop_event.is_set():
            try:
                conn, addr = self.listener.accept()
            except OSError:
                break
            if not self.session_busy.acquire(blocking=False):
                conn.close()  # one contact at a time
                continue
            try:
                log.info("%s: contact from %s", self.cfg.node_id, addr)
                drive_socket_session(self.node, self.lock, conn)
                with self.lock:
                    self.node.housekeeping(int(time.time() * 1000))
                    self.node.run_gateway(int(time.time() * 1000))
            finally:
                self.session_busy.release()

    # -- mule dial loop -------------------------------------------------------

    def _dial_loop(self) -> None:
        while not self.stop_event.is_set():
            for addr in self.cfg.contacts:
                if self.stop_event.is_set():
                    return
                host, port = parse_addr(addr)
                try:
                    sock = socket.create_connection((host, port), timeout=3.0)
                except OSError:
                    continue
                log.info("%s: dialed %s", self.cfg.node_id, addr)
                drive_socket_session(self.node, self.lock, sock)
                with self.lock:
                    self.node.housekeeping(int(time.time() * 1000))
            self.stop_event.wait(self.cfg.dial_period_s)

    # -- gateway ticker -------------------------------------------------------

    def _gateway_loop(self) -> None:
        while not self.stop_event.wait(1.0):
            with self.lock:
                self.node.run_gateway(int(time.time() * 1000))

    def start(self) -> None:
        cfg = self.cfg
        if cfg.role in (NodeRole.RURAL, NodeRole.URBAN):
            host, port = parse_addr(cfg.listen)
            try:
                self.listener = socket.create_server((host, port))
            except OSError as e:
                raise BindFailure(f"cannot listen on {cfg.listen}: {e}") from e
            t = threading.Thread(target=self._serve_contacts, name="contacts", daemon=True)
            self.threads.append(t)
        if cfg.role == NodeRole.MULE:
            t = threading.Thread(target=self._dial_loop, name="dial", daemon=True)
            self.threads.append(t)
        if cfg.role == NodeRole.URBAN:
            t = threading.Thread(target=self._gateway_loop, name="gateway", daemon=True)
            self.threads.append(t)
        if cfg.api:
            host, port = parse_addr(cfg.api)
            try:
                self.api = ApiServer(self.node, self.lock, (host, port),
                                     ui_dir=cfg.ui_dir or None)
            except OSError as e:
                raise BindFailure(f"cannot bind API on {cfg.api}: {e}") from e
            self.api.start()
        for t in self.threads:
            t.start()
        log.info("%s: %s daemon up (listen=%s api=%s)", cfg.node_id,
                 cfg.role.name.lower(), cfg.listen or "-", cfg.api or "-")

    def shutdown(self) -> None:
        self.stop_event.set()
        if self.listener is not None:
            try:
                self.listener.close()
            except OSError:
                pass
        if self.api is not None:
            self.api.stop()
        for t in self.threads:
            t.join(timeout=5.0)
        with self.lock:
            self.node.store.close()

    def run_forever(self) -> int:
        self.start()
        done = threading.Event()

        def handler(signum, frame):
            log.info("%s: signal %d, shutting down", self.cfg.node_id, signum)
            done.set()

        signal.signal(signal.SIGTERM, handler)
        signal.signal(signal.SIGINT, handler)
        done.wait()
        self.shutdown()
        return 0
