"""Multi-robot scene graph processor.

Robots periodically send their entire local scene graph. The frontend keeps
the disjoint union of the latest snapshot of every robot (no merges, no
optimization), meters bandwidth per channel, and hands immutable snapshots to
the backend.

Wire format: each message is a canonical JSON object framed by a 4-byte
big-endian length. Offline streams use one JSON object per line.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import canonical
from .alignment import LoopClosure
from .scene_graph import Layer, SceneGraph, SceneGraphError, robot_subgraph

log = logging.getLogger(__name__)

CHANNELS = ("graph", "mesh_control", "loop_closure_aux")
_HEADER = struct.Struct(">I")


class IngestError(ValueError):
    pass


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class GraphUpdate:
    robot: str
    sequence: int
    full_graph: bytes
    byte_size: int = 0

    @classmethod
    def from_graph(cls, robot: str, sequence: int, graph: SceneGraph) -> "GraphUpdate":
        full = graph.serialize()
        upd = cls(robot, sequence, full, 0)
        return cls(robot, sequence, full, len(upd.encode()))

    def to_json(self):
        return {
            "type": "update",
            "robot": self.robot,
            "sequence": int(self.sequence),
            "full_graph": json.loads(self.full_graph),
        }

    def encode(self) -> bytes:
        return canonical.dumps_bytes(self.to_json())

    @classmethod
    def from_json(cls, d) -> "GraphUpdate":
        try:
            robot = str(d["robot"])
            seq = int(d["sequence"])
            full = canonical.dumps_bytes(d["full_graph"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed update: {exc}") from None
        upd = cls(robot, seq, full, 0)
        return cls(robot, seq, full, len(upd.encode()))


@dataclass
class DiffStats:
    added_nodes: int = 0
    removed_nodes: int = 0
    updated_nodes: int = 0
    unchanged_nodes: int = 0
    added_edges: int = 0
    removed_edges: int = 0
    unchanged_edges: int = 0
    stale: bool = False

    @property
    def is_zero(self):
        return not (self.added_nodes or self.removed_nodes or self.updated_nodes
                    or self.added_edges or self.removed_edges)


@dataclass
class FrameStatus:
    initialized: bool = False
    estimate: object = None


def mesh_channel_bytes(graph: SceneGraph) -> int:
    """Serialized size of the mesh part of a graph (control vertices, their edges, dense vertices)."""
    doc = graph.to_document()
    mesh = {
        "nodes": [n for n in doc["nodes"] if n["id"].split("/")[1] == Layer.MESH_CONTROL.value],
        "edges": [
            e
            for e in doc["edges"]
            if Layer.MESH_CONTROL.value in (e["source"].split("/")[1], e["target"].split("/")[1])
        ],
        "mesh_vertices": [r["mesh_vertices"] for r in doc["robots"]],
    }
    return len(canonical.dumps_bytes(mesh))


@dataclass
class BandwidthMeter:
    totals: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)

    def add(self, robot: str, channel: str, nbytes: int):
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        per = self.totals.setdefault(robot, {c: 0 for c in CHANNELS})
        per[channel] += int(nbytes)
        self.messages.append((robot, channel, int(nbytes)))

    def total(self, robot=None, channel=None) -> int:
        return sum(
            v
            for r, per in self.totals.items()
            if robot is None or r == robot
            for c, v in per.items()
            if channel is None or c == channel
        )

    def per_message(self, robot, channel):
        return [n for r, c, n in self.messages if r == robot and c == channel]

    def snapshot(self) -> dict:
        return {r: dict(per) for r, per in sorted(self.totals.items())}


class FrontendGraph:
    """Union of each robot's latest snapshot; single writer, snapshot-isolated readers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._graph = SceneGraph()
        self.last_sequence: dict[str, int] = {}
        self.frame_status: dict[str, FrameStatus] = {}
        self.stale_updates = 0
        self.bandwidth = BandwidthMeter()
        self.loop_closures: list[LoopClosure] = []

    def ingest(self, update: GraphUpdate) -> DiffStats:
        with self._lock:
            self._record_update(update)
            last = self.last_sequence.get(update.robot)
            if last is not None and update.sequence <= last:
                self.stale_updates += 1
                log.debug("dropping stale update %s#%d (last %d)", update.robot, update.sequence, last)
                return DiffStats(stale=True)
            incoming = self._parse(update)
            stats = self._apply(update.robot, incoming)
            self.last_sequence[update.robot] = update.sequence
            self.frame_status.setdefault(update.robot, FrameStatus())
            return stats

    def add_loop_closure(self, lc: LoopClosure, nbytes: int | None = None):
        with self._lock:
            self.loop_closures.append(lc)
            size = nbytes if nbytes is not None else len(canonical.dumps_bytes(lc.to_json()))
            self.bandwidth.add(lc.target.robot, "loop_closure_aux", size)

    def record_bandwidth(self, update: GraphUpdate) -> dict:
        with self._lock:
            self._record_update(update)
            return self.bandwidth.snapshot()

    def _record_update(self, update: GraphUpdate):
        try:
            mesh = mesh_channel_bytes(SceneGraph.deserialize(update.full_graph))
        except SceneGraphError:
            mesh = 0
        size = update.byte_size or len(update.encode())
        self.bandwidth.add(update.robot, "graph", size - mesh)
        self.bandwidth.add(update.robot, "mesh_control", mesh)

    @staticmethod
    def _parse(update: GraphUpdate) -> SceneGraph:
        try:
            g = SceneGraph.deserialize(update.full_graph)
        except SceneGraphError as exc:
            raise IngestError(f"update {update.robot}#{update.sequence}: {exc}") from None
        if g.robots != [update.robot]:
            raise IngestError(f"update from {update.robot} describes robots {g.robots}")
        if g.merges:
            raise IngestError("robot snapshots may not carry merges")
        return g

    def _apply(self, robot: str, new: SceneGraph) -> DiffStats:
        g = self._graph
        stats = DiffStats()
        old_nodes = set(g.nodes(robot=robot))
        new_nodes = set(new.nodes())
        old_edges = {e for e in g.edges() if e.source.robot == robot}
        new_edges = set(new.edges())
        for e in sorted(old_edges - new_edges, key=lambda e: e.key):
            g.remove_edge(e.source, e.target)
        for n in sorted(old_nodes - new_nodes, key=lambda n: n.key):
            g.remove_node(n)
        g.set_robot_info(robot, new.robot_info(robot))
        for n in sorted(new_nodes, key=lambda n: n.key):
            if n in old_nodes:
                if g[n] == new[n]:
                    stats.unchanged_nodes += 1
                else:
                    g.set_payload(n, new[n])
                    stats.updated_nodes += 1
            else:
                g.add_node(n, new[n])
                stats.added_nodes += 1
        for e in sorted(new_edges - old_edges, key=lambda e: e.key):
            g.add_edge(e.source, e.target)
        stats.removed_nodes = len(old_nodes - new_nodes)
        stats.added_edges = len(new_edges - old_edges)
        stats.removed_edges = len(old_edges - new_edges)
        stats.unchanged_edges = len(old_edges & new_edges)
        return stats

    def snapshot(self) -> SceneGraph:
        with self._lock:
            return self._graph.copy()

    def loop_closure_snapshot(self) -> list:
        with self._lock:
            return list(self.loop_closures)

    def robot_graph(self, robot: str) -> SceneGraph:
        with self._lock:
            return robot_subgraph(self._graph, robot)


def union_of(latest: dict) -> SceneGraph:
    """From-scratch union of per-robot graphs (reference for the incremental frontend)."""
    g = SceneGraph()
    for robot in sorted(latest):
        sub = latest[robot]
        g.set_robot_info(robot, sub.robot_info(robot))
        for n in sub.nodes():
            g.add_node(n, sub[n])
        for e in sub.edges():
            g.add_edge(e.source, e.target)
    return g


# messages -----------------------------------------------------------------


def decode_message(obj):
    """Turn a wire/log JSON object into ``GraphUpdate``, ``LoopClosure`` or a plain dict."""
    if not isinstance(obj, dict):
        raise FrameError("message must be a JSON object")
    kind = obj.get("type", "update")
    if kind == "update":
        return GraphUpdate.from_json(obj)
    if kind == "loop_closure":
        try:
            return LoopClosure.from_json(obj["loop_closure"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FrameError(f"malformed loop closure: {exc}") from None
    return obj


def encode_message(msg) -> dict:
    if isinstance(msg, GraphUpdate):
        return msg.to_json()
    if isinstance(msg, LoopClosure):
        return {"type": "loop_closure", "loop_closure": msg.to_json()}
    return msg


def encode_frame(obj) -> bytes:
    body = canonical.dumps_bytes(encode_message(obj))
    return _HEADER.pack(len(body)) + body


def _read_exact(stream, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf)) if hasattr(stream, "read") else stream.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frames(stream):
    """Yield decoded messages from a length-prefixed byte stream (file object or socket)."""
    offset = 0
    while True:
        head = _read_exact(stream, 4)
        if not head:
            return
        if len(head) < 4:
            raise FrameError(f"truncated frame header at byte {offset}")
        (n,) = _HEADER.unpack(head)
        body = _read_exact(stream, n)
        if len(body) < n:
            raise FrameError(f"truncated frame body at byte {offset + 4}: expected {n}, got {len(body)}")
        try:
            obj = json.loads(body)
        except json.JSONDecodeError as exc:
            raise FrameError(f"frame at byte {offset}: {exc}") from None
        yield decode_message(obj)
        offset += 4 + n


def write_ndjson(path, messages):
    with open(path, "w", encoding="utf-8") as f:
        for m in messages:
            f.write(canonical.dumps(encode_message(m)))
            f.write("\n")


def read_ndjson(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FrameError(f"{path}:{lineno}:{exc.colno}: {exc.msg}") from None
            yield decode_message(obj)


def tcp_source(host: str, port: int, timeout: float | None = 30.0, ready: threading.Event | None = None):
    """Listen on ``host:port``, accept one sender and yield its framed messages until EOF."""
    with socket.create_server((host, port)) as srv:
        srv.settimeout(timeout)
        if ready is not None:
            ready.set()
        conn, _ = srv.accept()
        with conn:
            conn.settimeout(timeout)
            yield from read_frames(conn)


def open_source(spec: str):
    """Message iterator for ``file:path`` (NDJSON or framed) or ``tcp://host:port``."""
    if spec.startswith("tcp://"):
        hostport = spec[len("tcp://"):]
        host, _, port = hostport.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp source {spec!r}; expected tcp://host:port")
        return tcp_source(host, int(port))
    path = spec[len("file:"):] if spec.startswith("file:") else spec
    p = Path(path)
    with open(p, "rb") as f:
        first = f.read(1)
    if first in (b"{", b"\n", b" ", b""):
        return read_ndjson(p)

    def framed():
        with open(p, "rb") as f:
            yield from read_frames(f)

    return framed()
