"""Merge proposals for duplicate places and objects, object ICP, and the apply-or-undo rule."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .liegroup import Pose
from .scene_graph import Layer, NodeId, SceneGraph

log = logging.getLogger(__name__)


class Status(enum.Enum):
    PROPOSED = "proposed"
    VALID = "valid"
    INVALID = "invalid"


@dataclass(frozen=True)
class ReconciliationConfig:
    place_distance_max: float = 0.01
    place_radius_diff_max: float = 0.01
    undo_ratio_threshold: float = 0.5
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-9
    icp_max_correspondence_distance: float = 0.25
    icp_max_points: int = 1000

    def __post_init__(self):
        for name in ("place_distance_max", "place_radius_diff_max", "icp_tolerance",
                     "icp_max_correspondence_distance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.undo_ratio_threshold <= 1:
            raise ValueError("undo_ratio_threshold must lie in (0, 1]")
        if self.icp_max_iterations < 1 or self.icp_max_points < 3:
            raise ValueError("icp_max_iterations must be >= 1 and icp_max_points >= 3")


@dataclass(frozen=True)
class MergeCandidate:
    a: NodeId
    b: NodeId
    relative_transform: Pose = field(default_factory=Pose.identity)
    """For objects, the rigid motion carrying b's vertices onto a's (global frame)."""
    status: Status = Status.PROPOSED

    def __post_init__(self):
        if self.a.layer is not self.b.layer:
            raise ValueError("merge candidates must share a layer")
        if self.a.robot == self.b.robot:
            raise ValueError("merge candidates must come from different robots")
        if not self.a < self.b:
            raise ValueError("candidate endpoints must be ordered a < b")

    @property
    def kind(self) -> Layer:
        return self.a.layer

    def to_json(self):
        return {
            "a": str(self.a),
            "b": str(self.b),
            "kind": self.kind.value,
            "relative_transform": [float(x) for x in self.relative_transform.to_array()],
            "status": self.status.value,
        }


class ICPError(ValueError):
    """Too few points or correspondences for a rigid fit."""


def _initialized_robots(graph: SceneGraph, initialized=None):
    if initialized is not None:
        return set(initialized)
    return {r for r in graph.robots if graph.robot_info(r).frame == "global"}


def _ordered(n1: NodeId, n2: NodeId):
    return (n1, n2) if n1 < n2 else (n2, n1)


def place_pairs_bruteforce(graph: SceneGraph, cfg: ReconciliationConfig, initialized=None):
    """O(n^2) reference scan over cross-robot place pairs."""
    ok = _initialized_robots(graph, initialized)
    places = [n for n in graph.nodes(Layer.PLACE) if n.robot in ok]
    out = []
    for i, p in enumerate(places):
        for q in places[i + 1 :]:
            if p.robot == q.robot:
                continue
            pp, pq = graph[p], graph[q]
            if (np.linalg.norm(pp.position - pq.position) <= cfg.place_distance_max
                    and abs(pp.radius - pq.radius) <= cfg.place_radius_diff_max):
                out.append(_ordered(p, q))
    return sorted(out, key=lambda ab: (ab[0].key, ab[1].key))


def propose_place_merges(graph: SceneGraph, cfg: ReconciliationConfig | None = None,
                         initialized=None) -> list[MergeCandidate]:
    """Cross-robot place pairs within distance and radius tolerances, via a uniform hash grid."""
    cfg = cfg or ReconciliationConfig()
    ok = _initialized_robots(graph, initialized)
    places = [n for n in graph.nodes(Layer.PLACE) if n.robot in ok]
    cell = cfg.place_distance_max
    grid: dict[tuple, list] = {}
    keys = {}
    for n in places:
        k = tuple(np.floor(graph[n].position / cell).astype(np.int64))
        keys[n] = k
        grid.setdefault(k, []).append(n)
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    pairs = set()
    for n in places:
        p = graph[n]
        kx, ky, kz = keys[n]
        for dx, dy, dz in offsets:
            for m in grid.get((kx + dx, ky + dy, kz + dz), ()):
                if m.robot == n.robot or not n < m:
                    continue
                q = graph[m]
                if (np.linalg.norm(p.position - q.position) <= cfg.place_distance_max
                        and abs(p.radius - q.radius) <= cfg.place_radius_diff_max):
                    pairs.add((n, m))
    return [MergeCandidate(a, b) for a, b in sorted(pairs, key=lambda ab: (ab[0].key, ab[1].key))]


def object_vertices(graph: SceneGraph, node: NodeId) -> np.ndarray:
    """Positions of the mesh control vertices supporting an object (those still present)."""
    obj = graph[node]
    pts = [graph[v].position for v in obj.vertex_ids if v in graph]
    return np.array(pts, dtype=float).reshape(-1, 3)


def boxes_overlap(a, b) -> bool:
    return bool(np.all(a.bbox_min <= b.bbox_max) and np.all(b.bbox_min <= a.bbox_max))


def propose_object_merges(graph: SceneGraph, cfg: ReconciliationConfig | None = None,
                          initialized=None) -> list[MergeCandidate]:
    """Cross-robot object pairs with equal labels and intersecting boxes, registered by ICP.

    Pairs whose ICP fails are returned already marked invalid.
    """
    cfg = cfg or ReconciliationConfig()
    ok = _initialized_robots(graph, initialized)
    objs = [n for n in graph.nodes(Layer.OBJECT) if n.robot in ok]
    out = []
    for i, a in enumerate(objs):
        pa = graph[a]
        for b in objs[i + 1 :]:
            if a.robot == b.robot:
                continue
            pb = graph[b]
            if pa.semantic_label != pb.semantic_label or not boxes_overlap(pa, pb):
                continue
            a_, b_ = _ordered(a, b)
            try:
                T = icp_object_transform(object_vertices(graph, a_), object_vertices(graph, b_), cfg)
                out.append(MergeCandidate(a_, b_, T))
            except ICPError as exc:
                log.debug("object candidate %s/%s invalid: %s", a_, b_, exc)
                out.append(MergeCandidate(a_, b_, Pose.identity(), Status.INVALID))
    return sorted(out, key=lambda c: (c.a.key, c.b.key))


def farthest_point_sample(points, k: int) -> np.ndarray:
    """Indices of ``k`` points chosen greedily by farthest distance, starting at index 0."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n <= k:
        return np.arange(n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    d = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.linalg.norm(points - points[chosen[i]], axis=1))
    return np.sort(chosen)


def kabsch(src, dst) -> Pose:
    """Least-squares rigid transform ``T`` minimizing ``sum |T src_i - dst_i|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def mutual_nearest(src, dst, max_dist):
    """Index pairs ``(i, j)`` where ``src[i]`` and ``dst[j]`` are each other's nearest neighbour."""
    t_dst, t_src = cKDTree(dst), cKDTree(src)
    d, j = t_dst.query(src)
    _, back = t_src.query(dst[j])
    i = np.arange(len(src))
    keep = (back == i) & (d <= max_dist)
    return i[keep], j[keep]


def icp_object_transform(vertices_a, vertices_b, cfg: ReconciliationConfig | None = None) -> Pose:
    """Point-to-point ICP returning the transform that maps ``vertices_b`` onto ``vertices_a``."""
    cfg = cfg or ReconciliationConfig()
    A = np.asarray(vertices_a, dtype=float).reshape(-1, 3)
    B = np.asarray(vertices_b, dtype=float).reshape(-1, 3)
    if len(A) < 3 or len(B) < 3:
        raise ICPError(f"need at least 3 vertices per side, got {len(A)} and {len(B)}")
    A = A[farthest_point_sample(A, cfg.icp_max_points)]
    B = B[farthest_point_sample(B, cfg.icp_max_points)]
    T = Pose.from_translation(A.mean(axis=0) - B.mean(axis=0))
    for _ in range(cfg.icp_max_iterations):
        moved = T.transform_points(B)
        ib, ia = mutual_nearest(moved, A, cfg.icp_max_correspondence_distance)
        if len(ib) < 3:
            raise ICPError(f"only {len(ib)} mutual correspondences")
        step = kabsch(moved[ib], A[ia])
        T = step @ T
        if np.linalg.norm(step.log()) < cfg.icp_tolerance:
            break
    return T


@dataclass
class ApplyReport:
    proposed: int
    valid: int
    invalid: int
    applied: int
    undone: int
    ratio: float
    candidates: list
    records: list

    def to_row(self) -> dict:
        return {
            "merges_proposed": self.proposed,
            "merges_valid": self.valid,
            "merges_applied": self.applied,
            "merges_undone": self.undone,
            "merge_ratio": self.ratio,
        }


def validate_and_apply(graph: SceneGraph, candidates, inlier_mask,
                       cfg: ReconciliationConfig | None = None) -> ApplyReport:
    """Mark candidates by the optimizer's inlier decisions and apply all valid merges or none.

    Candidates already marked invalid stay invalid whatever their mask entry
    and do not count as proposed. Merges are applied when ``valid / proposed >= undo_ratio_threshold``; below
    it every speculatively applied merge is undone, newest first, leaving the
    graph exactly as it was.
    """
    cfg = cfg or ReconciliationConfig()
    candidates = list(candidates)
    mask = np.asarray(inlier_mask, dtype=bool).reshape(-1)
    if len(mask) != len(candidates):
        raise ValueError(f"{len(mask)} mask entries for {len(candidates)} candidates")
    marked = [
        replace(c, status=Status.VALID if ok and c.status is not Status.INVALID else Status.INVALID)
        for c, ok in zip(candidates, mask)
    ]
    # candidates that failed registration never reached the optimizer
    proposed = sum(c.status is not Status.INVALID for c in candidates)
    valid = sum(c.status is Status.VALID for c in marked)
    ratio = valid / proposed if proposed else 1.0

    records = []
    rep: dict[NodeId, NodeId] = {}

    def find(n):
        while n in rep:
            n = rep[n]
        return n

    for c in marked:
        if c.status is not Status.VALID:
            continue
        ka, kb = find(c.a), find(c.b)
        if ka == kb or ka.robot == kb.robot or ka not in graph or kb not in graph:
            continue
        keep, absorb = _ordered(ka, kb)
        records.append(graph.merge_nodes(keep, absorb))
        rep[absorb] = keep

    undone = 0
    if ratio < cfg.undo_ratio_threshold:
        for r in reversed(records):
            graph.undo_merge(r)
        undone = len(records)
        log.info("merge ratio %.3f below %.3f: undid %d merges", ratio, cfg.undo_ratio_threshold, undone)
        records = []
    return ApplyReport(proposed, valid, len(marked) - valid, len(records), undone, ratio, marked, records)
