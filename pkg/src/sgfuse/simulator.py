"""Deterministic multi-robot simulator.

Robots follow waypoint polylines through a world of places, labelled box
objects and rooms. Each robot integrates noisy odometry starting from its own
true start pose (its local frame), records what it sees at first sight through
its drifting pose estimate, and periodically emits its whole local scene graph.
A loop-closure oracle pairs nearby poses, adds measurement noise to inliers and
replaces a chosen fraction with uniformly random outlier poses.

Every random draw comes from a child stream of one seed, which the
``SGFUSE_SEED`` environment variable overrides.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .alignment import AlignmentConfig, LoopClosure
from .deformation import OmegaTable
from .frontend import GraphUpdate
from .gnc import GncConfig
from .liegroup import Pose
from .reconciliation import ReconciliationConfig
from .scene_graph import (
    AgentNode,
    Layer,
    MeshControlNode,
    NodeId,
    ObjectNode,
    PlaceNode,
    RobotCapabilities,
    RoomNode,
    SceneGraph,
)

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """Invalid scenario document; the message starts with the offending field path."""


# configuration ------------------------------------------------------------


def _vec3(x, path):
    a = np.asarray(x, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ScenarioError(f"{path}: expected 3 finite numbers")
    return a


def _num(d, key, path, default=None, lo=None, hi=None, lo_open=False, integer=False):
    if key not in d:
        if default is None:
            raise ScenarioError(f"{path}.{key}: required")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{path}.{key}: expected a number")
    if integer and int(v) != v:
        raise ScenarioError(f"{path}.{key}: expected an integer")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ScenarioError(f"{path}.{key}: must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and v > hi:
        raise ScenarioError(f"{path}.{key}: must be <= {hi}")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class ObjectSpec:
    label: int
    center: np.ndarray
    extent: np.ndarray

    @property
    def corners(self) -> np.ndarray:
        h = self.extent / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + signs * h

    @property
    def dense(self) -> np.ndarray:
        """Face centres and edge midpoints of the box."""
        h = self.extent / 2
        pts = []
        for axis in range(3):
            for s in (-1, 1):
                off = np.zeros(3)
                off[axis] = s * h[axis]
                pts.append(self.center + off)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            for s1 in (-1, 1):
                for s2 in (-1, 1):
                    off = np.zeros(3)
                    off[others[0]] = s1 * h[others[0]]
                    off[others[1]] = s2 * h[others[1]]
                    pts.append(self.center + off)
        return np.array(pts)


# the 12 box edges as corner index pairs (corners differ in exactly one sign)
BOX_EDGES = [(i, j) for i, j in combinations(range(8), 2) if bin(i ^ j).count("1") == 1]


@dataclass(frozen=True)
class RoomSpec:
    bbox_min: np.ndarray
    bbox_max: np.ndarray


@dataclass(frozen=True)
class WorldSpec:
    box_min: np.ndarray
    box_max: np.ndarray
    places: np.ndarray
    place_radii: np.ndarray
    place_adjacency: float
    objects: tuple
    rooms: tuple


@dataclass(frozen=True)
class RobotSpec:
    id: str
    waypoints: np.ndarray
    step: float = 1.0
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    snapshot_period: int = 10
    observation_radius: float = 3.0
    capabilities: RobotCapabilities = field(default_factory=RobotCapabilities)


@dataclass(frozen=True)
class LoopClosureSpec:
    detection_radius: float = 2.0
    inter_per_pair: int = 10
    intra_per_robot: int = 0
    intra_min_gap: int = 10
    outlier_rate: float = 0.0
    outlier_sampling: str = "bernoulli"
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    world: WorldSpec
    robots: tuple
    loop_closures: LoopClosureSpec
    gnc: GncConfig
    alignment: AlignmentConfig
    reconciliation: ReconciliationConfig
    omega: OmegaTable
    backend_period: int = 0
    """Ticks between backend iterations; 0 runs the backend only after the last tick."""
    object_threshold: float = 1.0
    document: dict = field(default=None, compare=False, repr=False)

    @property
    def effective_seed(self) -> int:
        env = os.environ.get("SGFUSE_SEED")
        if env is not None and env.strip():
            try:
                return int(env)
            except ValueError:
                raise ScenarioError(f"SGFUSE_SEED: expected an integer, got {env!r}") from None
        return self.seed

    @classmethod
    def from_json(cls, doc) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ScenarioError("$: scenario must be a JSON object")
        try:
            return _parse_scenario(doc)
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"$: {type(exc).__name__}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_json(doc)


def _parse_scenario(doc) -> ScenarioConfig:
    w = doc.get("world")
    if not isinstance(w, dict):
        raise ScenarioError("$.world: required object")
    box_min = _vec3(w.get("box_min"), "$.world.box_min")
    box_max = _vec3(w.get("box_max"), "$.world.box_max")
    if np.any(box_min >= box_max):
        raise ScenarioError("$.world: box_min must be below box_max")
    places, radii = [], []
    for i, p in enumerate(w.get("places", [])):
        path = f"$.world.places[{i}]"
        places.append(_vec3(p.get("position"), path + ".position"))
        radii.append(_num(p, "radius", path, lo=0, lo_open=True))
    objects = []
    for i, o in enumerate(w.get("objects", [])):
        path = f"$.world.objects[{i}]"
        ext = _vec3(o.get("extent"), path + ".extent")
        if np.any(ext <= 0):
            raise ScenarioError(f"{path}.extent: must be positive")
        objects.append(ObjectSpec(_num(o, "label", path, integer=True), _vec3(o.get("center"), path + ".center"), ext))
    rooms = []
    for i, r in enumerate(w.get("rooms", [])):
        path = f"$.world.rooms[{i}]"
        lo, hi = _vec3(r.get("min"), path + ".min"), _vec3(r.get("max"), path + ".max")
        if np.any(lo > hi):
            raise ScenarioError(f"{path}: min must not exceed max")
        rooms.append(RoomSpec(lo, hi))
    world = WorldSpec(
        box_min, box_max,
        np.array(places).reshape(-1, 3), np.array(radii, dtype=float),
        _num(w, "place_adjacency", "$.world", default=1.5, lo=0, lo_open=True),
        tuple(objects), tuple(rooms),
    )

    robots = []
    seen = set()
    if not doc.get("robots"):
        raise ScenarioError("$.robots: at least one robot required")
    for i, r in enumerate(doc["robots"]):
        path = f"$.robots[{i}]"
        rid = r.get("id")
        if not isinstance(rid, str) or not rid or "/" in rid:
            raise ScenarioError(f"{path}.id: non-empty string without '/' required")
        if rid in seen:
            raise ScenarioError(f"{path}.id: duplicate robot id {rid!r}")
        seen.add(rid)
        wps = np.asarray(r.get("waypoints"), dtype=float)
        if wps.ndim != 2 or wps.shape[1] != 3 or len(wps) < 2:
            raise ScenarioError(f"{path}.waypoints: need at least two 3D points")
        caps = r.get("capabilities", {})
        robots.append(
            RobotSpec(
                rid,
                wps,
                _num(r, "step", path, default=1.0, lo=0, lo_open=True),
                _num(r.get("odometry_noise", {}), "sigma_rot", path + ".odometry_noise", default=0.0, lo=0),
                _num(r.get("odometry_noise", {}), "sigma_trans", path + ".odometry_noise", default=0.0, lo=0),
                _num(r, "snapshot_period", path, default=10, lo=1, integer=True),
                _num(r, "observation_radius", path, default=3.0, lo=0, lo_open=True),
                RobotCapabilities.from_flags(
                    bool(caps.get("has_semantics", True)), bool(caps.get("has_mesh", True)), bool(caps.get("rooms", True))
                ),
            )
        )

    lcd = doc.get("loop_closures", {})
    lpath = "$.loop_closures"
    sampling = lcd.get("outlier_sampling", "bernoulli")
    if sampling not in ("bernoulli", "stratified"):
        raise ScenarioError(f"{lpath}.outlier_sampling: expected 'bernoulli' or 'stratified'")
    rate = _num(lcd, "outlier_rate", lpath, default=0.0, lo=0)
    if rate >= 1:
        raise ScenarioError(f"{lpath}.outlier_rate: must lie in [0, 1)")
    lcs = LoopClosureSpec(
        _num(lcd, "detection_radius", lpath, default=2.0, lo=0, lo_open=True),
        _num(lcd, "inter_per_pair", lpath, default=10, lo=0, integer=True),
        _num(lcd, "intra_per_robot", lpath, default=0, lo=0, integer=True),
        _num(lcd, "intra_min_gap", lpath, default=10, lo=1, integer=True),
        rate,
        sampling,
        _num(lcd, "sigma_rot", lpath, default=0.0, lo=0),
        _num(lcd, "sigma_trans", lpath, default=0.0, lo=0),
    )

    solver = doc.get("solver", {})
    try:
        gnc = GncConfig(**solver.get("gnc", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"$.solver.gnc: {exc}") from None
    try:
        al = solver.get("alignment", {})
        if "covariance" in al:
            al = dict(al, covariance=tuple(np.asarray(al["covariance"], dtype=float).ravel().tolist()))
            if len(al["covariance"]) == 36:
                al["covariance"] = tuple(map(tuple, np.reshape(al["covariance"], (6, 6))))
        alignment = AlignmentConfig(**al)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"$.solver.alignment: {exc}") from None
    try:
        recon = ReconciliationConfig(**solver.get("reconciliation", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"$.solver.reconciliation: {exc}") from None
    try:
        omega = OmegaTable(**{k: tuple(v) for k, v in solver.get("omega", {}).items()})
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"$.solver.omega: {exc}") from None

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError("$.seed: expected a nonnegative integer")
    return ScenarioConfig(
        str(doc.get("name", "scenario")),
        seed,
        world,
        tuple(robots),
        lcs,
        gnc,
        alignment,
        recon,
        omega,
        _num(doc.get("backend", {}), "period", "$.backend", default=0, lo=0, integer=True),
        _num(doc.get("evaluation", {}), "object_threshold", "$.evaluation", default=1.0, lo=0, lo_open=True),
        doc,
    )


# trajectories -------------------------------------------------------------


def sample_polyline(waypoints, step):
    """Points every ``step`` metres along a polyline, ending at its last vertex, with headings."""
    wps = np.asarray(waypoints, dtype=float)
    seg = np.diff(wps, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    n = int(np.floor(total / step + 1e-9))
    s = np.arange(n + 1) * step
    if total - s[-1] > 1e-9:
        s = np.append(s, total)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(lengths[k] > 0, (s - cum[k]) / np.where(lengths[k] > 0, lengths[k], 1), 0.0)
    pos = wps[k] + frac[:, None] * seg[k]
    yaw = np.arctan2(seg[k, 1], seg[k, 0])
    return pos, yaw


def true_poses(spec: RobotSpec) -> list:
    pos, yaw = sample_polyline(spec.waypoints, spec.step)
    return [Pose.from_rotvec([0.0, 0.0, y], p) for p, y in zip(pos, yaw)]


# ground truth -------------------------------------------------------------


@dataclass
class GroundTruth:
    root: str
    starts: dict
    trajectories: dict
    """robot -> (timestamps (n,), world poses list)"""
    objects: list
    """world ObjectSpec list"""
    places: np.ndarray
    node_truth: dict = field(default_factory=dict)
    """NodeId -> index of the world place or object it observed"""
    loop_closure_outlier: list = field(default_factory=list)

    def to_frame(self, robot=None) -> Pose:
        """World-to-frame transform of a robot's local frame (default: the root)."""
        return self.starts[robot or self.root].inverse()

    def relative_frame(self, a, b) -> Pose:
        return self.starts[a].inverse() @ self.starts[b]

    def to_json(self):
        return {
            "root": self.root,
            "robots": [
                {
                    "id": r,
                    "start": [float(x) for x in self.starts[r].to_array()],
                    "trajectory": [
                        [float(t)] + [float(x) for x in p.to_array()] for t, p in zip(*self.trajectories[r])
                    ],
                }
                for r in sorted(self.starts)
            ],
            "objects": [
                {"label": o.label, "centroid": [float(x) for x in o.center], "extent": [float(x) for x in o.extent]}
                for o in self.objects
            ],
            "places": [[float(x) for x in p] for p in self.places],
            "loop_closure_outlier": [bool(x) for x in self.loop_closure_outlier],
        }

    @classmethod
    def from_json(cls, d) -> "GroundTruth":
        starts, trajs = {}, {}
        for r in d["robots"]:
            starts[r["id"]] = Pose.from_array(r["start"])
            rows = np.asarray(r["trajectory"], dtype=float).reshape(-1, 8)
            trajs[r["id"]] = (rows[:, 0], [Pose.from_array(x) for x in rows[:, 1:]])
        objects = [
            ObjectSpec(int(o["label"]), np.asarray(o["centroid"], float), np.asarray(o.get("extent", [1, 1, 1]), float))
            for o in d["objects"]
        ]
        return cls(d["root"], starts, trajs, objects, np.asarray(d["places"], float).reshape(-1, 3), {},
                   list(d.get("loop_closure_outlier", [])))


# simulation ---------------------------------------------------------------


@dataclass
class Event:
    tick: int
    kind: str
    payload: object = None


@dataclass
class SimulationResult:
    scenario: ScenarioConfig
    events: list
    ground_truth: GroundTruth
    graphs: dict
    """final local graph per robot"""
    loop_closures: list
    n_ticks: int

    def updates(self):
        return [e.payload for e in self.events if e.kind == "update"]

    def backend_ticks(self):
        return [e.tick for e in self.events if e.kind == "tick" and e.payload]


class _RobotState:
    def __init__(self, spec: RobotSpec, truth: list, estimates: list):
        self.spec = spec
        self.truth = truth
        self.est = estimates
        self.graph = SceneGraph()
        self.graph.add_robot(spec.id, spec.capabilities)
        self.counters = {layer: 0 for layer in Layer}
        self.seen_places: dict[int, NodeId] = {}
        self.place_tick: dict[int, int] = {}
        # places first seen this many ticks ago or less form the active window
        self.window = int(np.ceil(2 * spec.observation_radius / spec.step))
        self.seen_objects: set = set()
        self.seen_rooms: dict[int, NodeId] = {}
        self.dense: list = []
        self.sequence = 0

    def next_id(self, layer) -> NodeId:
        nid = NodeId(self.spec.id, layer, self.counters[layer])
        self.counters[layer] += 1
        return nid


def _odometry(rng, truth, sigma_rot, sigma_trans):
    """Dead-reckoned poses in the robot's local frame (identity at the start)."""
    est = [Pose.identity()]
    for a, b in zip(truth, truth[1:]):
        delta = a.inverse() @ b
        d = float(np.linalg.norm(delta.t))
        noise = np.concatenate([rng.normal(0, sigma_rot * d, 3), rng.normal(0, sigma_trans * d, 3)])
        est.append(est[-1] @ delta @ Pose.exp(noise) if d > 0 else est[-1] @ delta)
    return est


def _random_outlier(rng, world: WorldSpec) -> Pose:
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.uniform(world.box_min, world.box_max))


def _outlier_flags(rng, n, rate, sampling):
    if sampling == "stratified":
        k = int(round(rate * n))
        flags = np.zeros(n, bool)
        flags[rng.permutation(n)[:k]] = True
        return flags
    return rng.random(n) < rate


def _lc_pairs(rng, pos_a, pos_b, radius, count, same=False, min_gap=0):
    if count == 0 or len(pos_a) == 0 or len(pos_b) == 0:
        return []
    pairs = cKDTree(pos_a).query_ball_tree(cKDTree(pos_b), radius)
    cand = sorted((i, j) for i, js in enumerate(pairs) for j in js if not same or j - i >= min_gap)
    if len(cand) > count:
        pick = np.sort(rng.choice(len(cand), size=count, replace=False))
        cand = [cand[k] for k in pick]
    return cand


def simulate(scenario: ScenarioConfig, seed: int | None = None) -> SimulationResult:
    seed = scenario.effective_seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    odo_seq, pair_seq, noise_seq, outlier_seq = ss.spawn(4)
    world = scenario.world
    robots = sorted(scenario.robots, key=lambda r: r.id)

    states = {}
    for spec, child in zip(robots, odo_seq.spawn(len(robots))):
        truth = true_poses(spec)
        est = _odometry(np.random.default_rng(child), truth, spec.sigma_rot, spec.sigma_trans)
        states[spec.id] = _RobotState(spec, truth, est)
    n_ticks = max(len(s.truth) for s in states.values())

    # loop closures are drawn up front from the full trajectories
    lcspec = scenario.loop_closures
    pair_rng = np.random.default_rng(pair_seq)
    noise_rng = np.random.default_rng(noise_seq)
    out_rng = np.random.default_rng(outlier_seq)
    pos = {r: np.array([p.t for p in s.truth]) for r, s in states.items()}
    groups = []
    for a, b in combinations([s.id for s in robots], 2):
        groups.append((a, b, _lc_pairs(pair_rng, pos[a], pos[b], lcspec.detection_radius, lcspec.inter_per_pair)))
    for s in robots:
        r = s.id
        groups.append(
            (r, r, _lc_pairs(pair_rng, pos[r], pos[r], lcspec.detection_radius, lcspec.intra_per_robot,
                             same=True, min_gap=lcspec.intra_min_gap))
        )
    scheduled = []
    for a, b, pairs in groups:
        if a != b and len(pairs) < lcspec.inter_per_pair:
            log.warning("pair %s-%s: only %d loop-closure opportunities", a, b, len(pairs))
        flags = _outlier_flags(out_rng, len(pairs), lcspec.outlier_rate, lcspec.outlier_sampling)
        for (i, j), bad in zip(pairs, flags):
            if bad:
                meas = _random_outlier(out_rng, world)
            else:
                rel = states[a].truth[i].inverse() @ states[b].truth[j]
                noise = np.concatenate(
                    [noise_rng.normal(0, lcspec.sigma_rot, 3), noise_rng.normal(0, lcspec.sigma_trans, 3)]
                )
                meas = rel @ Pose.exp(noise)
            lc = LoopClosure(NodeId(a, Layer.AGENT, i), NodeId(b, Layer.AGENT, j), meas)
            # quantize through the wire encoding so live runs and replays see identical values
            lc = LoopClosure.from_json(lc.to_json())
            scheduled.append((max(i, j), lc, bool(bad)))
    scheduled.sort(key=lambda x: (x[0], x[1].source.key, x[1].target.key))

    place_tree = cKDTree(world.places) if len(world.places) else None
    place_pairs = place_tree.query_pairs(world.place_adjacency) if place_tree is not None else set()
    place_adj: dict[int, list] = {}
    for i, j in sorted(place_pairs):
        place_adj.setdefault(i, []).append(j)
        place_adj.setdefault(j, []).append(i)

    gt = GroundTruth(
        robots[0].id,
        {r: s.truth[0] for r, s in states.items()},
        {r: (np.arange(len(s.truth), dtype=float), list(s.truth)) for r, s in states.items()},
        list(world.objects),
        world.places.copy(),
    )

    events: list[Event] = []
    lcs_out: list[LoopClosure] = []
    k_lc = 0
    period = scenario.backend_period
    for tick in range(n_ticks):
        for spec in robots:
            st = states[spec.id]
            if tick < len(st.truth):
                _step(st, tick, world, place_tree, place_adj, gt)
        while k_lc < len(scheduled) and scheduled[k_lc][0] == tick:
            _, lc, bad = scheduled[k_lc]
            lcs_out.append(lc)
            gt.loop_closure_outlier.append(bad)
            events.append(Event(tick, "loop_closure", lc))
            k_lc += 1
        last = tick == n_ticks - 1
        for spec in robots:
            st = states[spec.id]
            final_own = tick == len(st.truth) - 1
            if tick < len(st.truth) and (tick % spec.snapshot_period == spec.snapshot_period - 1 or final_own):
                st.sequence += 1
                events.append(Event(tick, "update", GraphUpdate.from_graph(spec.id, st.sequence, st.graph)))
        run_backend = last or (period > 0 and tick % period == period - 1)
        events.append(Event(tick, "tick", run_backend))
    return SimulationResult(scenario, events, gt, {r: s.graph for r, s in states.items()}, lcs_out, n_ticks)


def _step(st: _RobotState, tick, world: WorldSpec, place_tree, place_adj, gt: GroundTruth):
    spec, g = st.spec, st.graph
    X, Xh = st.truth[tick], st.est[tick]
    to_local = Xh @ X.inverse()  # world point -> robot's estimated local frame
    caps = spec.capabilities.layers_provided
    here = X.t

    agent = st.next_id(Layer.AGENT)
    g.add_node(agent, AgentNode(Xh, float(tick)))
    if agent.index > 0:
        g.add_edge(NodeId(spec.id, Layer.AGENT, agent.index - 1), agent)

    # places
    new_places = []
    active = []
    if place_tree is not None:
        for k in sorted(place_tree.query_ball_point(here, spec.observation_radius)):
            if k not in st.seen_places:
                nid = st.next_id(Layer.PLACE)
                g.add_node(nid, PlaceNode(to_local.transform_points(world.places[k]), world.place_radii[k]))
                st.seen_places[k] = nid
                st.place_tick[k] = tick
                gt.node_truth[nid] = k
                new_places.append(k)
        # structure is only linked inside the active window; older places carry
        # drift relative to the current pose and are left to loop closures
        active = sorted(k for k, t0 in st.place_tick.items() if tick - t0 <= st.window)
        for k in new_places:
            for j in place_adj.get(k, ()):
                if j in active and not g.has_edge(st.seen_places[k], st.seen_places[j]):
                    g.add_edge(st.seen_places[k], st.seen_places[j])
        if active:
            d = np.linalg.norm(world.places[active] - here, axis=1)
            g.add_edge(agent, st.seen_places[active[int(np.argmin(d))]])

    # rooms
    if Layer.ROOM in caps:
        for k, room in enumerate(world.rooms):
            if k not in st.seen_rooms and np.all(here >= room.bbox_min) and np.all(here <= room.bbox_max):
                corners = np.array([[x, y, z] for x in (room.bbox_min[0], room.bbox_max[0])
                                    for y in (room.bbox_min[1], room.bbox_max[1])
                                    for z in (room.bbox_min[2], room.bbox_max[2])])
                c = to_local.transform_points(corners)
                nid = st.next_id(Layer.ROOM)
                g.add_node(nid, RoomNode(c.mean(axis=0), c.min(axis=0), c.max(axis=0)))
                st.seen_rooms[k] = nid
        for k, nid in st.seen_rooms.items():
            room = world.rooms[k]
            for p, pid in st.seen_places.items():
                pw = world.places[p]
                if np.all(pw >= room.bbox_min) and np.all(pw <= room.bbox_max) and not g.has_edge(pid, nid):
                    g.add_edge(pid, nid)

    # objects and their mesh
    for k in range(len(world.objects)):
        obj = world.objects[k]
        if k in st.seen_objects or np.linalg.norm(obj.center - here) > spec.observation_radius:
            continue
        st.seen_objects.add(k)
        corners = to_local.transform_points(obj.corners)
        vids = ()
        if Layer.MESH_CONTROL in caps:
            vids = tuple(st.next_id(Layer.MESH_CONTROL) for _ in range(8))
            for v, c in zip(vids, corners):
                g.add_node(v, MeshControlNode(c))
            for i, j in BOX_EDGES:
                g.add_edge(vids[i], vids[j])
            st.dense.append(to_local.transform_points(obj.dense))
            info = g.robot_info(spec.id)
            g.add_robot(spec.id, info.capabilities, info.frame, np.concatenate(st.dense))
        if Layer.OBJECT in caps:
            nid = st.next_id(Layer.OBJECT)
            g.add_node(nid, ObjectNode.from_points(corners, obj.label, vids))
            gt.node_truth[nid] = k
            if active:
                d = np.linalg.norm(world.places[active] - obj.center, axis=1)
                g.add_edge(nid, st.seen_places[active[int(np.argmin(d))]])


def estimated_odometry(result: SimulationResult, robot: str) -> list:
    """Odometric agent poses of a robot in its local frame, in tick order."""
    g = result.graphs[robot]
    return [g[n].pose for n in g.nodes(Layer.AGENT)]

