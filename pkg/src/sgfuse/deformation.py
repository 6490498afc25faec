"""Embedded deformation graph over agents, places, mesh control vertices and candidate objects.

Every participating node becomes a pose unknown (agents keep their pose, the
others start at ``(I, position)``). Relative-pose edges tie them together;
loop closures and merge candidates are robust, everything else is trusted.
After optimization the dense mesh is re-interpolated from the control frames
and node attributes are written back into the scene graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import liegroup as lg
from .gnc import GncConfig, PoseBetween, RobustProblem, solve_gnc
from .liegroup import Pose
from .reconciliation import Status
from .scene_graph import INCLUSION, INTRA, Layer, NodeId, RobotInfo, SceneGraph

log = logging.getLogger(__name__)

EDGE_TYPES = ("odometry", "loop_closure", "rigidity", "merge_factor", "place_agent", "place_object")
ROBUST_TYPES = frozenset({"loop_closure", "merge_factor"})


def _diag6(v):
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.full(3, v[0]), np.full(3, v[1])]) if v.size == 2 else v.reshape(6)


@dataclass(frozen=True)
class OmegaTable:
    """Diagonal information per edge type, as ``(rotation, translation)`` or 6 entries."""

    odometry: tuple = (1e2, 1e2)
    loop_closure: tuple = (1e2, 1e2)
    rigidity: tuple = (1e3, 1e3)
    merge_factor: tuple = (1e1, 1e1)

    def __post_init__(self):
        for name in ("odometry", "loop_closure", "rigidity", "merge_factor"):
            if np.any(_diag6(getattr(self, name)) <= 0):
                raise ValueError(f"{name} information must be positive")

    def diag(self, edge_type: str) -> np.ndarray:
        if edge_type in ("place_agent", "place_object"):
            edge_type = "rigidity"
        return _diag6(getattr(self, edge_type))


@dataclass(frozen=True)
class DeformEdge:
    type: str
    i: int
    j: int
    measurement: Pose
    omega: np.ndarray
    ref: int | None = None
    """Index into the loop-closure or candidate list for robust edges."""

    @property
    def robust(self) -> bool:
        return self.type in ROBUST_TYPES


@dataclass
class DeformationGraph:
    ids: list
    values: list
    edges: list
    anchors: list
    skipped: list = field(default_factory=list)

    def index(self) -> dict:
        return {n: i for i, n in enumerate(self.ids)}

    def edges_of(self, edge_type):
        return [e for e in self.edges if e.type == edge_type]

    def counts(self) -> dict:
        return {t: len(self.edges_of(t)) for t in EDGE_TYPES}

    def problem(self) -> RobustProblem:
        if not self.edges:
            return RobustProblem(self.values, [], self.anchors)
        keys = np.array([(e.i, e.j) for e in self.edges])
        meas = lg.stack([e.measurement for e in self.edges])
        L = np.stack([np.diag(np.sqrt(e.omega)) for e in self.edges])
        robust = np.array([e.robust for e in self.edges])
        return RobustProblem(self.values, [PoseBetween(keys, meas, L, robust)], self.anchors)

    def to_edgelist(self) -> str:
        def fmt(xs):
            return " ".join(format(float(x), ".17g") for x in xs)

        lines = [f"FRAME {n} {fmt(v.to_array())}" for n, v in zip(self.ids, self.values)]
        for e in self.edges:
            lines.append(
                f"EDGE {e.type} {self.ids[e.i]} {self.ids[e.j]} {fmt(e.measurement.to_array())} {fmt(e.omega)}"
            )
        return "\n".join(lines) + "\n"


def parse_edgelist(text: str):
    """Read a ``FRAME``/``EDGE`` dump back into ``(frames dict, edge tuples)``."""
    frames, edges = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "FRAME" and len(parts) == 9:
                frames[parts[1]] = Pose.from_array([float(x) for x in parts[2:]])
            elif parts[0] == "EDGE" and len(parts) == 17:
                edges.append((parts[1], parts[2], parts[3], Pose.from_array([float(x) for x in parts[4:11]]),
                              np.array([float(x) for x in parts[11:]])))
            else:
                raise ValueError(f"unrecognized record {parts[0]!r} with {len(parts)} fields")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return frames, edges


def node_frame(graph: SceneGraph, n: NodeId) -> Pose:
    p = graph[n]
    if n.layer is Layer.AGENT:
        return p.pose
    if n.layer is Layer.OBJECT:
        return Pose.from_translation(p.centroid)
    return Pose.from_translation(p.position)


def _relative(values, i, j) -> Pose:
    return values[i].inverse() @ values[j]


def _components(n, pairs):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    return [find(i) for i in range(n)]


def build(graph: SceneGraph, loop_closures=(), candidates=(), omega: OmegaTable | None = None,
          robots=None) -> DeformationGraph:
    """Deformation graph over the given robots (default: all with a global frame).

    ``candidates`` already marked invalid contribute no factor; the others get
    one robust merge factor each, in order.
    """
    omega = omega or OmegaTable()
    if robots is None:
        robots = [r for r in graph.robots if graph.robot_info(r).frame == "global"]
    robots = set(robots)
    skipped = sorted(set(graph.robots) - robots)

    cand_objects = set()
    for c in candidates:
        if c.status is not Status.INVALID and c.kind is Layer.OBJECT:
            cand_objects.update((c.a, c.b))

    ids = [
        n
        for n in graph.nodes()
        if n.robot in robots
        and (n.layer in (Layer.AGENT, Layer.PLACE, Layer.MESH_CONTROL) or n in cand_objects)
    ]
    idx = {n: i for i, n in enumerate(ids)}
    values = [node_frame(graph, n) for n in ids]
    edges: list[DeformEdge] = []

    def trusted(t, a, b):
        i, j = idx[a], idx[b]
        edges.append(DeformEdge(t, i, j, _relative(values, i, j), omega.diag(t)))

    for r in sorted(robots):
        agents = graph.nodes(Layer.AGENT, r)
        for a, b in zip(agents, agents[1:]):
            trusted("odometry", a, b)
    for e in graph.edges(INTRA):
        if e.source in idx and e.target in idx and e.source.layer in (Layer.PLACE, Layer.MESH_CONTROL):
            trusted("rigidity", e.source, e.target)
    # each mesh control vertex is tied to its robot's nearest place
    for r in sorted(robots):
        places = [n for n in graph.nodes(Layer.PLACE, r) if n in idx]
        meshes = [n for n in graph.nodes(Layer.MESH_CONTROL, r) if n in idx]
        if places and meshes:
            tree = cKDTree(np.array([graph[p].position for p in places]))
            _, nearest = tree.query(np.array([graph[m].position for m in meshes]))
            for m, k in zip(meshes, nearest):
                trusted("rigidity", places[int(k)], m)
    for o in sorted(cand_objects & set(idx)):
        for v in graph[o].vertex_ids:
            if v in idx:
                trusted("rigidity", o, v)
    for e in graph.edges(INCLUSION):
        if e.source in idx and e.target in idx and e.target.layer is Layer.PLACE:
            if e.source.layer is Layer.AGENT:
                trusted("place_agent", e.target, e.source)
            elif e.source.layer is Layer.OBJECT:
                trusted("place_object", e.target, e.source)

    for k, lc in enumerate(loop_closures):
        if lc.source in idx and lc.target in idx:
            edges.append(DeformEdge("loop_closure", idx[lc.source], idx[lc.target], lc.measurement,
                                    omega.diag("loop_closure"), k))
    for k, c in enumerate(candidates):
        if c.status is Status.INVALID or c.a not in idx or c.b not in idx:
            continue
        i, j = idx[c.a], idx[c.b]
        if c.kind is Layer.OBJECT:
            E = values[i].inverse() @ c.relative_transform @ values[j]
        else:
            E = Pose.identity()
        edges.append(DeformEdge("merge_factor", i, j, E, omega.diag("merge_factor"), k))

    # drop frames no edge touches, then remap
    used = sorted({e.i for e in edges} | {e.j for e in edges})
    remap = {old: new for new, old in enumerate(used)}
    ids = [ids[i] for i in used]
    values = [values[i] for i in used]
    edges = [DeformEdge(e.type, remap[e.i], remap[e.j], e.measurement, e.omega, e.ref) for e in edges]

    anchors = []
    comp = _components(len(ids), [(e.i, e.j) for e in edges])
    for root in sorted(set(comp)):
        members = [i for i in range(len(ids)) if comp[i] == root]
        agents = [i for i in members if ids[i].layer is Layer.AGENT]
        anchors.append(min(agents, key=lambda i: ids[i]) if agents else min(members, key=lambda i: ids[i]))
    return DeformationGraph(ids, values, edges, sorted(anchors), skipped)


@dataclass
class DeformationResult:
    values: list
    weights: np.ndarray
    robust_mask: np.ndarray
    loop_closure_inliers: dict
    candidate_inliers: dict
    objective_before: float
    objective_after: float
    converged: bool
    iterations: int

    def candidate_mask(self, n_candidates) -> np.ndarray:
        return np.array([self.candidate_inliers.get(k, False) for k in range(n_candidates)])


def optimize(dg: DeformationGraph, gnc_config: GncConfig | None = None) -> DeformationResult:
    """Robust optimization starting from the graph's current values."""
    if not dg.edges:
        return DeformationResult(list(dg.values), np.zeros(0), np.zeros(0, bool), {}, {}, 0.0, 0.0, True, 0)
    problem = dg.problem()
    res = solve_gnc(problem, gnc_config)
    before = problem.cost(res.weights)
    after = problem.cost(res.weights, values=res.values)
    lc_in, cand_in = {}, {}
    for e, ok in zip(dg.edges, res.inlier_mask):
        if e.type == "loop_closure":
            lc_in[e.ref] = bool(ok)
        elif e.type == "merge_factor":
            cand_in[e.ref] = bool(ok)
    return DeformationResult(
        res.values, res.weights, res.inlier_mask[problem.robust], lc_in, cand_in,
        before, after, res.converged, res.iterations,
    )


@dataclass(frozen=True)
class MeshBinding:
    control: np.ndarray
    """(n, b) indices into the control-point list."""
    weights: np.ndarray
    """(n, b) nonnegative weights summing to 1 per row; rows of an unbound vertex are all zero."""

    @property
    def bound(self) -> np.ndarray:
        return self.weights.sum(axis=1) > 0


def compute_bindings(control_positions, vertices, b: int = 4) -> MeshBinding:
    """Bind each vertex to its ``b`` nearest control points by normalized inverse distance."""
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    C = np.asarray(control_positions, dtype=float).reshape(-1, 3)
    if len(C) == 0 or len(V) == 0:
        return MeshBinding(np.zeros((len(V), 0), dtype=np.int64), np.zeros((len(V), 0)))
    k = min(b, len(C))
    d, j = cKDTree(C).query(V, k=k)
    d = d.reshape(len(V), k)
    j = j.reshape(len(V), k)
    with np.errstate(divide="ignore"):
        w = 1.0 / d
    exact = d == 0
    hit = exact.any(axis=1)
    w[hit] = exact[hit].astype(float)
    w /= w.sum(axis=1, keepdims=True)
    return MeshBinding(j.astype(np.int64), w)


def interpolate_mesh(rest, solved, binding: MeshBinding, vertices) -> np.ndarray:
    """Blend control-frame motions onto bound vertices.

    ``rest`` and ``solved`` are matching lists of control frames before and
    after optimization. Unbound vertices are returned unmoved.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if len(V) == 0 or binding.weights.shape[1] == 0:
        return V.copy()
    R0 = lg.stack(list(rest))
    R1 = lg.stack(list(solved))
    Rj = R1[:, :3, :3] @ np.swapaxes(R0[:, :3, :3], -1, -2)
    g = R0[:, :3, 3]
    t = R1[:, :3, 3] - g
    ctrl = binding.control
    # blended as a displacement so that unmoved controls leave vertices bit-identical
    Dj = Rj - np.eye(3)
    shift = np.einsum("nbij,nbj->nbi", Dj[ctrl], V[:, None, :] - g[ctrl]) + t[ctrl]
    out = V + np.einsum("nb,nbi->ni", binding.weights, shift)
    unbound = ~binding.bound
    out[unbound] = V[unbound]
    return out


def robot_bindings(graph: SceneGraph, robot: str, b: int = 4):
    """Control ids and binding of a robot's dense mesh to its own control vertices."""
    controls = graph.nodes(Layer.MESH_CONTROL, robot)
    pos = np.array([graph[c].position for c in controls]).reshape(-1, 3)
    return controls, compute_bindings(pos, graph.robot_info(robot).mesh_vertices, b)


def write_back(graph: SceneGraph, dg: DeformationGraph, values, bindings=None) -> dict:
    """Store solved frames in the graph, re-interpolate dense meshes and refit objects.

    ``bindings`` maps robot to ``(control ids, MeshBinding)``; missing robots
    are bound on the fly from the current (pre-update) control positions.
    Returns the number of unbound dense vertices per robot.
    """
    solved = dict(zip(dg.ids, values))
    rest = dict(zip(dg.ids, dg.values))
    robots = sorted({n.robot for n in dg.ids})
    bindings = dict(bindings or {})
    for r in robots:
        if r not in bindings:
            bindings[r] = robot_bindings(graph, r)
    unbound = {}
    for r in robots:
        info = graph.robot_info(r)
        controls, binding = bindings[r]
        keep = [k for k, c in enumerate(controls) if c in solved]
        if len(info.mesh_vertices) and keep:
            pos = {c: Pose.from_translation(graph[c].position) for c in controls}
            r0 = [pos[c] for c in controls]
            r1 = [solved[c] if c in solved else pos[c] for c in controls]
            mv = interpolate_mesh(r0, r1, binding, info.mesh_vertices)
            graph.set_robot_info(r, RobotInfo(info.capabilities, info.frame, mv))
        unbound[r] = int((~binding.bound).sum()) if len(info.mesh_vertices) else 0
        if unbound[r]:
            log.warning("robot %s: %d dense vertices unbound and left in place", r, unbound[r])

    for n, T in solved.items():
        p = graph[n]
        if n.layer is Layer.AGENT:
            graph.set_payload(n, type(p)(T, p.timestamp))
        elif n.layer in (Layer.PLACE, Layer.MESH_CONTROL):
            graph.set_payload(n, p.transformed(T @ rest[n].inverse()))
    for n in graph.nodes(Layer.OBJECT):
        if n.robot not in robots:
            continue
        refit = graph.refit_object(n)
        if refit is not None:
            graph.set_payload(n, refit)
        elif n in solved:
            graph.set_payload(n, graph[n].transformed(solved[n] @ rest[n].inverse()))
    return unbound


def weighted_objective(dg: DeformationGraph, weights, values=None) -> float:
    return dg.problem().cost(weights, values=values)

