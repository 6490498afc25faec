"""Layered scene graph with per-robot provenance and an undoable merge journal."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import canonical
from .liegroup import Pose


class SceneGraphError(Exception):
    pass


class DuplicateNodeError(SceneGraphError, KeyError):
    pass


class UnknownNodeError(SceneGraphError, KeyError):
    pass


class LayerError(SceneGraphError, ValueError):
    pass


class MergeError(SceneGraphError, ValueError):
    pass


class StaleMergeError(MergeError):
    pass


class SceneGraphFormatError(SceneGraphError, ValueError):
    """Malformed serialized graph; the message carries the offending position or path."""


class Layer(enum.Enum):
    AGENT = "agent"
    OBJECT = "object"
    PLACE = "place"
    ROOM = "room"
    MESH_CONTROL = "mesh_control"


LAYER_ORDER = {layer: i for i, layer in enumerate(Layer)}

# Inclusion edges go from rank r to rank r + 1.
LAYER_RANK = {
    Layer.MESH_CONTROL: 0,
    Layer.AGENT: 1,
    Layer.OBJECT: 1,
    Layer.PLACE: 2,
    Layer.ROOM: 3,
}


@dataclass(frozen=True)
class NodeId:
    robot: str
    layer: Layer
    index: int

    def __post_init__(self):
        if "/" in self.robot or not self.robot:
            raise ValueError(f"invalid robot id {self.robot!r}")
        if self.index < 0:
            raise ValueError("node index must be nonnegative")

    @property
    def key(self):
        return (self.robot, LAYER_ORDER[self.layer], self.index)

    def __lt__(self, other):
        return self.key < other.key

    def __str__(self):
        return f"{self.robot}/{self.layer.value}/{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        parts = str(text).split("/")
        if len(parts) != 3:
            raise ValueError(f"node id {text!r} is not '<robot>/<layer>/<index>'")
        robot, layer, index = parts
        return cls(robot, Layer(layer), int(index))


def _frozen_vec(x, n=3):
    a = np.array(x, dtype=float).reshape(n)
    a.flags.writeable = False
    return a


def _vec_json(a):
    return [float(v) for v in a]


def points_geometry(points):
    """Centroid and axis-aligned bounds of an ``(n, 3)`` point set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts.mean(axis=0), pts.min(axis=0), pts.max(axis=0)


class _Payload:
    layer: Layer

    def to_json(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and canonical.dumps(self.to_json()) == canonical.dumps(
            other.to_json()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AgentNode(_Payload):
    pose: Pose
    timestamp: float
    layer = Layer.AGENT

    def to_json(self):
        return {"pose": _vec_json(self.pose.to_array()), "timestamp": float(self.timestamp)}

    @classmethod
    def from_json(cls, d):
        return cls(Pose.from_array(d["pose"]), float(d["timestamp"]))

    def transformed(self, T: Pose):
        return replace(self, pose=T @ self.pose)


@dataclass(frozen=True, eq=False)
class ObjectNode(_Payload):
    centroid: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    semantic_label: int
    vertex_ids: tuple = ()
    layer = Layer.OBJECT

    def __post_init__(self):
        object.__setattr__(self, "centroid", _frozen_vec(self.centroid))
        object.__setattr__(self, "bbox_min", _frozen_vec(self.bbox_min))
        object.__setattr__(self, "bbox_max", _frozen_vec(self.bbox_max))
        object.__setattr__(self, "semantic_label", int(self.semantic_label))
        object.__setattr__(self, "vertex_ids", tuple(self.vertex_ids))
        if np.any(self.bbox_min > self.bbox_max):
            raise ValueError("object bbox min exceeds max")

    @classmethod
    def from_points(cls, points, semantic_label, vertex_ids=()):
        c, lo, hi = points_geometry(points)
        return cls(c, lo, hi, semantic_label, vertex_ids)

    def to_json(self):
        return {
            "centroid": _vec_json(self.centroid),
            "bbox_min": _vec_json(self.bbox_min),
            "bbox_max": _vec_json(self.bbox_max),
            "semantic_label": self.semantic_label,
            "vertex_ids": [str(v) for v in self.vertex_ids],
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            d["centroid"],
            d["bbox_min"],
            d["bbox_max"],
            int(d["semantic_label"]),
            tuple(NodeId.parse(v) for v in d["vertex_ids"]),
        )

    def transformed(self, T: Pose):
        lo, hi = self.bbox_min, self.bbox_max
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        moved = T.transform_points(corners)
        return replace(
            self,
            centroid=T.transform_points(self.centroid),
            bbox_min=moved.min(axis=0),
            bbox_max=moved.max(axis=0),
        )


@dataclass(frozen=True, eq=False)
class PlaceNode(_Payload):
    position: np.ndarray
    radius: float
    layer = Layer.PLACE

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_vec(self.position))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ValueError("place radius must be positive")

    def to_json(self):
        return {"position": _vec_json(self.position), "radius": self.radius}

    @classmethod
    def from_json(cls, d):
        return cls(d["position"], d["radius"])

    def transformed(self, T: Pose):
        return replace(self, position=T.transform_points(self.position))


@dataclass(frozen=True, eq=False)
class RoomNode(_Payload):
    position: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    layer = Layer.ROOM

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_vec(self.position))
        object.__setattr__(self, "bbox_min", _frozen_vec(self.bbox_min))
        object.__setattr__(self, "bbox_max", _frozen_vec(self.bbox_max))

    def to_json(self):
        return {
            "position": _vec_json(self.position),
            "bbox_min": _vec_json(self.bbox_min),
            "bbox_max": _vec_json(self.bbox_max),
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["position"], d["bbox_min"], d["bbox_max"])

    def transformed(self, T: Pose):
        lo, hi = self.bbox_min, self.bbox_max
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        moved = T.transform_points(corners)
        return replace(
            self,
            position=T.transform_points(self.position),
            bbox_min=moved.min(axis=0),
            bbox_max=moved.max(axis=0),
        )


@dataclass(frozen=True, eq=False)
class MeshControlNode(_Payload):
    position: np.ndarray
    layer = Layer.MESH_CONTROL

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_vec(self.position))

    def to_json(self):
        return {"position": _vec_json(self.position)}

    @classmethod
    def from_json(cls, d):
        return cls(d["position"])

    def transformed(self, T: Pose):
        return replace(self, position=T.transform_points(self.position))


PAYLOAD_TYPES = {
    Layer.AGENT: AgentNode,
    Layer.OBJECT: ObjectNode,
    Layer.PLACE: PlaceNode,
    Layer.ROOM: RoomNode,
    Layer.MESH_CONTROL: MeshControlNode,
}


@dataclass(frozen=True)
class RobotCapabilities:
    has_semantics: bool = True
    has_mesh: bool = True
    layers_provided: frozenset = frozenset(Layer)

    def __post_init__(self):
        object.__setattr__(self, "layers_provided", frozenset(Layer(x) for x in self.layers_provided))

    @classmethod
    def from_flags(cls, has_semantics=True, has_mesh=True, rooms=True):
        layers = {Layer.AGENT, Layer.PLACE}
        if has_semantics:
            layers.add(Layer.OBJECT)
        if has_mesh:
            layers.add(Layer.MESH_CONTROL)
        if rooms:
            layers.add(Layer.ROOM)
        return cls(has_semantics, has_mesh, frozenset(layers))

    def to_json(self):
        return {
            "has_semantics": bool(self.has_semantics),
            "has_mesh": bool(self.has_mesh),
            "layers": [layer.value for layer in Layer if layer in self.layers_provided],
        }

    @classmethod
    def from_json(cls, d):
        return cls(bool(d["has_semantics"]), bool(d["has_mesh"]), frozenset(Layer(x) for x in d["layers"]))


@dataclass(frozen=True)
class RobotInfo:
    capabilities: RobotCapabilities = field(default_factory=RobotCapabilities)
    frame: str = "local"  # "local" until the robot's frame is aligned to the global one
    mesh_vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if self.frame not in ("local", "global"):
            raise ValueError(f"unknown frame status {self.frame!r}")
        mv = np.array(self.mesh_vertices, dtype=float).reshape(-1, 3)
        mv.flags.writeable = False
        object.__setattr__(self, "mesh_vertices", mv)


INTRA = "intra"
INCLUSION = "inclusion"


@dataclass(frozen=True)
class Edge:
    """Intra-layer edges are undirected (source < target); inclusion edges point child -> parent."""

    kind: str
    source: NodeId
    target: NodeId

    @property
    def key(self):
        return (self.kind, self.source.key, self.target.key)

    def other(self, node: NodeId) -> NodeId:
        return self.target if node == self.source else self.source

    def to_json(self):
        return {"kind": self.kind, "source": str(self.source), "target": str(self.target)}


def make_edge(a: NodeId, b: NodeId) -> Edge:
    if a == b:
        raise LayerError(f"self-edge on {a}")
    if a.layer == b.layer:
        lo, hi = (a, b) if a < b else (b, a)
        return Edge(INTRA, lo, hi)
    if LAYER_RANK[b.layer] == LAYER_RANK[a.layer] + 1:
        return Edge(INCLUSION, a, b)
    raise LayerError(
        f"inclusion edge {a} -> {b} must point exactly one layer up "
        f"({a.layer.value} -> {b.layer.value} is not allowed)"
    )


@dataclass(frozen=True)
class MergeRecord:
    seq: int
    keep: NodeId
    absorb: NodeId
    absorbed_payload: _Payload
    keep_payload: _Payload
    removed_edges: tuple
    added_edges: tuple

    @property
    def touched(self):
        nodes = {self.keep, self.absorb}
        for e in self.removed_edges + self.added_edges:
            nodes.update((e.source, e.target))
        return nodes

    def to_json(self):
        return {
            "seq": self.seq,
            "keep": str(self.keep),
            "absorb": str(self.absorb),
            "absorbed_payload": self.absorbed_payload.to_json(),
            "keep_payload": self.keep_payload.to_json(),
            "removed_edges": [e.to_json() for e in sorted(self.removed_edges, key=lambda e: e.key)],
            "added_edges": [e.to_json() for e in sorted(self.added_edges, key=lambda e: e.key)],
        }


class SceneGraph:
    """Single-writer layered multigraph.

    Payloads are immutable, so :meth:`copy` is cheap and yields a snapshot that
    never observes later mutations of the original.
    """

    def __init__(self):
        self._robots: dict[str, RobotInfo] = {}
        self._nodes: dict[NodeId, _Payload] = {}
        self._edges: set[Edge] = set()
        self._incident: dict[NodeId, set[Edge]] = {}
        self._journal: list[MergeRecord] = []
        self._tombstones: dict[NodeId, _Payload] = {}
        self._next_seq = 0

    # robots -------------------------------------------------------------

    def add_robot(self, robot, capabilities=None, frame="local", mesh_vertices=None):
        info = RobotInfo(
            capabilities if capabilities is not None else RobotCapabilities(),
            frame,
            np.zeros((0, 3)) if mesh_vertices is None else mesh_vertices,
        )
        self._robots[robot] = info
        return info

    def set_robot_info(self, robot, info: RobotInfo):
        self._robots[robot] = info

    def robot_info(self, robot) -> RobotInfo:
        return self._robots[robot]

    @property
    def robots(self):
        return sorted(self._robots)

    def provenance(self, node: NodeId):
        """``(robot, frame status)`` of a live node."""
        if node not in self._nodes:
            raise UnknownNodeError(str(node))
        return node.robot, self._robots[node.robot].frame

    # nodes --------------------------------------------------------------

    def add_node(self, node: NodeId, payload: _Payload):
        if node in self._nodes or node in self._tombstones:
            raise DuplicateNodeError(str(node))
        if payload.layer is not node.layer:
            raise LayerError(f"{node} carries a {payload.layer.value} payload")
        info = self._robots.get(node.robot)
        if info is None:
            info = self.add_robot(node.robot)
        if node.layer not in info.capabilities.layers_provided:
            raise LayerError(f"robot {node.robot} does not provide layer {node.layer.value}")
        self._nodes[node] = payload
        self._incident[node] = set()

    def remove_node(self, node: NodeId):
        if node not in self._nodes:
            raise UnknownNodeError(str(node))
        for e in list(self._incident[node]):
            self._drop_edge(e)
        del self._incident[node]
        del self._nodes[node]

    def set_payload(self, node: NodeId, payload: _Payload):
        if node not in self._nodes:
            raise UnknownNodeError(str(node))
        if payload.layer is not node.layer:
            raise LayerError(f"{node} carries a {payload.layer.value} payload")
        self._nodes[node] = payload

    def __contains__(self, node):
        return node in self._nodes

    def __getitem__(self, node: NodeId) -> _Payload:
        try:
            return self._nodes[node]
        except KeyError:
            raise UnknownNodeError(str(node)) from None

    def __len__(self):
        return len(self._nodes)

    def nodes(self, layer: Layer | None = None, robot: str | None = None) -> list[NodeId]:
        ids = [
            n
            for n in self._nodes
            if (layer is None or n.layer is layer) and (robot is None or n.robot == robot)
        ]
        return sorted(ids, key=lambda n: n.key)

    def is_tombstoned(self, node: NodeId):
        return node in self._tombstones

    # edges --------------------------------------------------------------

    def add_edge(self, a: NodeId, b: NodeId) -> Edge:
        e = make_edge(a, b)
        for n in (a, b):
            if n not in self._nodes:
                raise UnknownNodeError(str(n))
        if e not in self._edges:
            self._edges.add(e)
            self._incident[e.source].add(e)
            self._incident[e.target].add(e)
        return e

    def remove_edge(self, a: NodeId, b: NodeId):
        e = make_edge(a, b)
        if e not in self._edges:
            raise UnknownNodeError(f"no edge {a} -- {b}")
        self._drop_edge(e)

    def _drop_edge(self, e: Edge):
        self._edges.discard(e)
        self._incident[e.source].discard(e)
        self._incident[e.target].discard(e)

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        try:
            return make_edge(a, b) in self._edges
        except LayerError:
            return False

    def edges(self, kind: str | None = None) -> list[Edge]:
        es = [e for e in self._edges if kind is None or e.kind == kind]
        return sorted(es, key=lambda e: e.key)

    def incident(self, node: NodeId) -> list[Edge]:
        return sorted(self._incident.get(node, ()), key=lambda e: e.key)

    def neighbors(self, node: NodeId) -> list[NodeId]:
        """Same-layer neighbors."""
        return sorted(
            (e.other(node) for e in self._incident.get(node, ()) if e.kind == INTRA), key=lambda n: n.key
        )

    def parents(self, node: NodeId) -> list[NodeId]:
        return sorted(
            (e.target for e in self._incident.get(node, ()) if e.kind == INCLUSION and e.source == node),
            key=lambda n: n.key,
        )

    def children(self, node: NodeId) -> list[NodeId]:
        return sorted(
            (e.source for e in self._incident.get(node, ()) if e.kind == INCLUSION and e.target == node),
            key=lambda n: n.key,
        )

    # merges -------------------------------------------------------------

    @property
    def merges(self) -> tuple:
        return tuple(self._journal)

    def merge_nodes(self, keep: NodeId, absorb: NodeId) -> MergeRecord:
        if keep == absorb:
            raise MergeError(f"cannot merge {keep} with itself")
        for n in (keep, absorb):
            if n not in self._nodes:
                raise UnknownNodeError(str(n))
        if keep.layer is not absorb.layer:
            raise MergeError(f"cross-layer merge {keep} <- {absorb}")
        if keep.robot == absorb.robot:
            raise MergeError(f"merge requires distinct robots ({keep} <- {absorb})")

        keep_payload = self._nodes[keep]
        absorbed_payload = self._nodes[absorb]
        removed = tuple(sorted(self._incident[absorb], key=lambda e: e.key))
        added = []
        for e in removed:
            self._drop_edge(e)
        for e in removed:
            if e.kind == INTRA:
                other = e.other(absorb)
                if other == keep:
                    continue
                ne = make_edge(keep, other)
            elif e.source == absorb:
                ne = make_edge(keep, e.target)
            else:
                ne = make_edge(e.source, keep)
            if ne not in self._edges:
                self._edges.add(ne)
                self._incident[ne.source].add(ne)
                self._incident[ne.target].add(ne)
                added.append(ne)
        del self._incident[absorb]
        del self._nodes[absorb]
        self._tombstones[absorb] = absorbed_payload
        self._nodes[keep] = self._merged_payload(keep_payload, absorbed_payload)

        record = MergeRecord(
            self._next_seq, keep, absorb, absorbed_payload, keep_payload, removed, tuple(added)
        )
        self._next_seq += 1
        self._journal.append(record)
        return record

    def _merged_payload(self, keep_payload, absorbed_payload):
        if not isinstance(keep_payload, ObjectNode):
            return keep_payload
        vids = list(keep_payload.vertex_ids)
        vids += [v for v in absorbed_payload.vertex_ids if v not in vids]
        pts = [self._nodes[v].position for v in vids if v in self._nodes]
        if pts and len(pts) == len(vids):
            return ObjectNode.from_points(pts, keep_payload.semantic_label, vids)
        lo = np.minimum(keep_payload.bbox_min, absorbed_payload.bbox_min)
        hi = np.maximum(keep_payload.bbox_max, absorbed_payload.bbox_max)
        nk, na = max(len(keep_payload.vertex_ids), 1), max(len(absorbed_payload.vertex_ids), 1)
        c = (nk * keep_payload.centroid + na * absorbed_payload.centroid) / (nk + na)
        return ObjectNode(np.clip(c, lo, hi), lo, hi, keep_payload.semantic_label, vids)

    def undo_merge(self, record: MergeRecord):
        if not self._journal:
            raise StaleMergeError("merge journal is empty")
        pos = next((i for i, r in enumerate(self._journal) if r.seq == record.seq), None)
        if pos is None or self._journal[pos] != record:
            raise StaleMergeError(f"merge record {record.seq} is not in the journal")
        touched = record.touched
        for later in self._journal[pos + 1 :]:
            if {later.keep, later.absorb} & touched:
                raise StaleMergeError(
                    f"merge {record.seq} is superseded by merge {later.seq}; undo that first"
                )
        for e in record.added_edges:
            self._drop_edge(e)
        del self._tombstones[record.absorb]
        self._nodes[record.absorb] = record.absorbed_payload
        self._incident[record.absorb] = set()
        for e in record.removed_edges:
            self._edges.add(e)
            self._incident[e.source].add(e)
            self._incident[e.target].add(e)
        self._nodes[record.keep] = record.keep_payload
        del self._journal[pos]

    # frames -------------------------------------------------------------

    def transform_robot(self, robot: str, T: Pose, frame: str | None = None):
        """Left-multiply every node and dense mesh vertex of ``robot`` by ``T``."""
        info = self._robots[robot]
        objects = []
        for n in [n for n in self._nodes if n.robot == robot]:
            if n.layer is Layer.OBJECT:
                objects.append(n)
            else:
                self._nodes[n] = self._nodes[n].transformed(T)
        for n in objects:
            self._nodes[n] = self.refit_object(n) or self._nodes[n].transformed(T)
        mv = T.transform_points(info.mesh_vertices) if len(info.mesh_vertices) else info.mesh_vertices
        self._robots[robot] = RobotInfo(info.capabilities, frame or info.frame, mv)

    def refit_object(self, node: NodeId):
        """Recompute an object's centroid and bbox from its mesh control vertices, if all present."""
        obj = self._nodes[node]
        pts = [self._nodes[v].position for v in obj.vertex_ids if v in self._nodes]
        if not pts or len(pts) != len(obj.vertex_ids):
            return None
        return ObjectNode.from_points(pts, obj.semantic_label, obj.vertex_ids)

    # copies & checks ----------------------------------------------------

    def copy(self) -> "SceneGraph":
        g = SceneGraph()
        g._robots = dict(self._robots)
        g._nodes = dict(self._nodes)
        g._edges = set(self._edges)
        g._incident = {n: set(es) for n, es in self._incident.items()}
        g._journal = list(self._journal)
        g._tombstones = dict(self._tombstones)
        g._next_seq = self._next_seq
        return g

    snapshot = copy

    def check_invariants(self):
        for e in self._edges:
            for n in (e.source, e.target):
                if n not in self._nodes:
                    raise SceneGraphError(f"edge {e.to_json()} references dead node {n}")
            if make_edge(e.source, e.target) != e:
                raise SceneGraphError(f"edge {e.to_json()} violates layer discipline")
        for n, payload in self._nodes.items():
            if payload.layer is not n.layer:
                raise SceneGraphError(f"{n} has a {payload.layer.value} payload")
            info = self._robots.get(n.robot)
            if info is None:
                raise SceneGraphError(f"{n} belongs to an unknown robot")
            if n.layer not in info.capabilities.layers_provided:
                raise SceneGraphError(f"{n} is outside robot {n.robot}'s layers")
            if isinstance(payload, ObjectNode):
                if np.any(payload.centroid < payload.bbox_min - 1e-9) or np.any(
                    payload.centroid > payload.bbox_max + 1e-9
                ):
                    raise SceneGraphError(f"{n} centroid outside its bbox")
        for robot in self._robots:
            agents = self.nodes(Layer.AGENT, robot)
            stamps = [self._nodes[a].timestamp for a in agents]
            if any(b <= a for a, b in zip(stamps, stamps[1:])):
                raise SceneGraphError(f"robot {robot} agent timestamps not strictly increasing")
        live = set(self._nodes)
        for r in reversed(self._journal):
            if r.absorb in live or r.absorb not in self._tombstones:
                raise SceneGraphError(f"merge {r.seq} journal does not match node set")
            live.add(r.absorb)

    # serialization ------------------------------------------------------

    def to_document(self) -> dict:
        robots = []
        for rid in sorted(self._robots):
            info = self._robots[rid]
            robots.append(
                {
                    "id": rid,
                    "capabilities": info.capabilities.to_json(),
                    "frame": info.frame,
                    "mesh_vertices": [_vec_json(v) for v in info.mesh_vertices],
                }
            )
        return {
            "robots": robots,
            "layers": [layer.value for layer in Layer],
            "nodes": [{"id": str(n), "payload": self._nodes[n].to_json()} for n in self.nodes()],
            "edges": [e.to_json() for e in self.edges()],
            "merges": [r.to_json() for r in self._journal],
        }

    def serialize(self) -> bytes:
        return canonical.dumps_bytes(self.to_document())

    @classmethod
    def deserialize(cls, data) -> "SceneGraph":
        if isinstance(data, (bytes, bytearray)):
            try:
                data = data.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise SceneGraphFormatError(f"invalid UTF-8 at byte {exc.start}") from None
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SceneGraphFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_document(doc)

    @classmethod
    def from_document(cls, doc) -> "SceneGraph":
        path = "$"
        try:
            if not isinstance(doc, dict):
                raise TypeError("document must be an object")
            g = cls()
            for i, r in enumerate(doc["robots"]):
                path = f"$.robots[{i}]"
                g.add_robot(
                    str(r["id"]),
                    RobotCapabilities.from_json(r["capabilities"]),
                    r.get("frame", "local"),
                    np.array(r.get("mesh_vertices", []), dtype=float).reshape(-1, 3),
                )
            for i, nd in enumerate(doc["nodes"]):
                path = f"$.nodes[{i}]"
                nid = NodeId.parse(nd["id"])
                g.add_node(nid, PAYLOAD_TYPES[nid.layer].from_json(nd["payload"]))
            for i, ed in enumerate(doc["edges"]):
                path = f"$.edges[{i}]"
                e = g.add_edge(NodeId.parse(ed["source"]), NodeId.parse(ed["target"]))
                if e.kind != ed["kind"]:
                    raise ValueError(f"edge kind {ed['kind']!r} does not match layers")
            for i, md in enumerate(doc.get("merges", [])):
                path = f"$.merges[{i}]"
                keep, absorb = NodeId.parse(md["keep"]), NodeId.parse(md["absorb"])

                def edges(key):
                    return tuple(
                        make_edge(NodeId.parse(e["source"]), NodeId.parse(e["target"])) for e in md[key]
                    )

                rec = MergeRecord(
                    int(md["seq"]),
                    keep,
                    absorb,
                    PAYLOAD_TYPES[absorb.layer].from_json(md["absorbed_payload"]),
                    PAYLOAD_TYPES[keep.layer].from_json(md["keep_payload"]),
                    edges("removed_edges"),
                    edges("added_edges"),
                )
                g._journal.append(rec)
                g._tombstones[absorb] = rec.absorbed_payload
                g._next_seq = max(g._next_seq, rec.seq + 1)
            path = "$"
            g.check_invariants()
        except SceneGraphFormatError:
            raise
        except (KeyError, TypeError, ValueError, SceneGraphError) as exc:
            raise SceneGraphFormatError(f"{path}: {type(exc).__name__}: {exc}") from None
        return g

    def __eq__(self, other):
        return isinstance(other, SceneGraph) and self.serialize() == other.serialize()

    __hash__ = None

    def __repr__(self):
        counts = ", ".join(f"{layer.value}={len(self.nodes(layer))}" for layer in Layer)
        return f"SceneGraph(robots={self.robots}, {counts}, edges={len(self._edges)})"


def robot_subgraph(g: SceneGraph, robot: str) -> SceneGraph:
    """Nodes, edges and robot record of one robot (no merges)."""
    out = SceneGraph()
    info = g.robot_info(robot)
    out.set_robot_info(robot, info)
    for n in g.nodes(robot=robot):
        out.add_node(n, g[n])
    for e in g.edges():
        if e.source.robot == robot and e.target.robot == robot:
            out.add_edge(e.source, e.target)
    return out
