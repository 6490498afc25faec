"""Initial alignment of robot reference frames from inter-robot loop closures.

Each inter-robot loop closure yields one sample of the relative frame between
the two robots; samples are fused by robust pose averaging, the resulting
pairwise estimates are chained along a spanning tree of the robot dependence
graph, and the cached frames are only recomputed when the optimized graph
disagrees with them by more than a translation threshold.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .gnc import GncConfig, PosePrior, RobustProblem, solve_gnc, sqrt_information
from .liegroup import Pose, check_covariance
from .scene_graph import Layer, NodeId, SceneGraph

log = logging.getLogger(__name__)


def _default_lc_covariance():
    return np.diag([1e-4] * 3 + [1e-2] * 3)


@dataclass(frozen=True, eq=False)
class LoopClosure:
    """Relative pose of agent node ``target`` expressed in agent node ``source``."""

    source: NodeId
    target: NodeId
    measurement: Pose
    covariance: np.ndarray = field(default_factory=_default_lc_covariance)

    def __post_init__(self):
        if self.source.layer is not Layer.AGENT or self.target.layer is not Layer.AGENT:
            raise ValueError("loop closures connect agent nodes")
        cov = check_covariance(self.covariance).copy()
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)

    @property
    def intra_robot(self) -> bool:
        return self.source.robot == self.target.robot

    @property
    def robots(self):
        return self.source.robot, self.target.robot

    def reversed(self) -> "LoopClosure":
        Ad = self.measurement.adjoint()
        cov = Ad @ self.covariance @ Ad.T
        return LoopClosure(self.target, self.source, self.measurement.inverse(), 0.5 * (cov + cov.T))

    def to_json(self):
        return {
            "from": str(self.source),
            "to": str(self.target),
            "measurement": [float(x) for x in self.measurement.to_array()],
            "covariance": [[float(x) for x in row] for row in self.covariance],
            "intra_robot": self.intra_robot,
        }

    @classmethod
    def from_json(cls, d):
        lc = cls(
            NodeId.parse(d["from"]),
            NodeId.parse(d["to"]),
            Pose.from_array(d["measurement"]),
            np.array(d["covariance"], dtype=float),
        )
        if "intra_robot" in d and bool(d["intra_robot"]) != lc.intra_robot:
            raise ValueError("intra_robot flag disagrees with the endpoint robots")
        return lc


@dataclass(frozen=True)
class AlignmentConfig:
    k_min_inliers: int = 5
    realign_translation_threshold: float = 10.0
    covariance: tuple = (0.05**2,) * 3 + (0.5**2,) * 3
    """Pose-averaging covariance, either the 6 diagonal entries or a full 6x6 matrix."""

    def __post_init__(self):
        if self.k_min_inliers < 1:
            raise ValueError("k_min_inliers must be at least 1")
        if not self.realign_translation_threshold > 0:
            raise ValueError("realign_translation_threshold must be positive")
        check_covariance(self.sigma)

    @property
    def sigma(self) -> np.ndarray:
        c = np.asarray(self.covariance, dtype=float)
        return np.diag(c) if c.ndim == 1 else c


@dataclass(frozen=True)
class FrameEstimate:
    pair: tuple
    estimate: Pose
    inlier_count: int
    samples_used: int
    inlier_mask: tuple = ()

    def __post_init__(self):
        if self.inlier_count > self.samples_used:
            raise ValueError("inlier_count exceeds samples_used")

    def passes(self, cfg: AlignmentConfig) -> bool:
        return self.inlier_count >= cfg.k_min_inliers


def frame_sample(lc: LoopClosure, pose_a: Pose, pose_b: Pose) -> Pose:
    """Noisy estimate of robot B's frame in robot A's frame from one loop closure.

    ``pose_a`` and ``pose_b`` are the odometric poses of ``lc.source`` and
    ``lc.target`` in their own robots' local frames.
    """
    if lc.intra_robot:
        raise ValueError("frame samples need an inter-robot loop closure")
    return pose_a @ lc.measurement @ pose_b.inverse()


def medoid_index(poses) -> int:
    """Index of the pose with minimal summed chordal distance to all others."""
    M = lg.stack(list(poses))
    d = lg.chordal_distance(M[:, None], M[None, :])
    return int(np.argmin(d.sum(axis=1)))


def robust_pose_average(samples, cfg: AlignmentConfig | None = None, gnc_config: GncConfig | None = None,
                        pair=None) -> FrameEstimate:
    """Truncated-least-squares average of pose samples, solved by GNC from the medoid."""
    cfg = cfg or AlignmentConfig()
    samples = list(samples)
    if not samples:
        raise ValueError("robust_pose_average needs at least one sample")
    init = samples[medoid_index(samples)]
    L = sqrt_information(cfg.sigma)
    problem = RobustProblem(
        [init],
        [PosePrior(np.zeros(len(samples), dtype=int), lg.stack(samples), L, robust=True)],
    )
    result = solve_gnc(problem, gnc_config)
    mask = tuple(bool(x) for x in result.inlier_mask)
    return FrameEstimate(pair, result.values[0], int(sum(mask)), len(samples), mask)


@dataclass
class DependenceGraph:
    """Robots as vertices; edge ``(A, B)`` with ``A < B`` holds loop closures oriented A -> B."""

    robots: list
    edges: dict

    def pairs(self):
        return sorted(self.edges)


def dependence_graph(loop_closures, robots=None) -> DependenceGraph:
    edges: dict[tuple, list] = {}
    seen = set(robots or ())
    for lc in loop_closures:
        if lc.intra_robot:
            continue
        a, b = lc.robots
        seen.update((a, b))
        if a > b:
            lc = lc.reversed()
            a, b = b, a
        edges.setdefault((a, b), []).append(lc)
    return DependenceGraph(sorted(seen), edges)


def spanning_tree(dg: DependenceGraph, estimates=None) -> list:
    """Kruskal over dependence edges, highest inlier count first, ties by robot ids."""
    estimates = estimates or {}
    parent = {r: r for r in dg.robots}

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    def weight(pair):
        est = estimates.get(pair)
        return est.inlier_count if est is not None else 0

    tree = []
    for pair in sorted(dg.edges, key=lambda p: (-weight(p), p)):
        ra, rb = find(pair[0]), find(pair[1])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            tree.append(pair)
    return tree


def chain_to_global(tree, estimates, robots, cfg: AlignmentConfig | None = None, known=None):
    """Compose pairwise estimates along the tree from the root (lowest robot id).

    Edges whose estimate fails the inlier gate are cut; robots beyond them are
    absent from the result. ``known`` seeds the walk with already-fixed frames.
    Returns ``(frames, parents)``.
    """
    cfg = cfg or AlignmentConfig()
    robots = sorted(robots)
    if not robots:
        return {}, {}
    frames = dict(known) if known else {robots[0]: Pose.identity()}
    parents = {r: None for r in frames}
    adj: dict[str, list] = {}
    for a, b in tree:
        est = estimates.get((a, b))
        if est is None or not est.passes(cfg):
            continue
        adj.setdefault(a, []).append((b, est.estimate))
        adj.setdefault(b, []).append((a, est.estimate.inverse()))
    queue = deque(sorted(frames))
    while queue:
        r = queue.popleft()
        for nb, rel in sorted(adj.get(r, ()), key=lambda x: x[0]):
            if nb not in frames:
                frames[nb] = frames[r] @ rel
                parents[nb] = r
                queue.append(nb)
    return frames, parents


def needs_realign(initial, optimized_relative: Pose, cfg: AlignmentConfig | None = None) -> bool:
    """True iff the relative translations differ by more than the threshold (rotation ignored)."""
    cfg = cfg or AlignmentConfig()
    est = initial.estimate if isinstance(initial, FrameEstimate) else initial
    return float(np.linalg.norm(est.t - optimized_relative.t)) > cfg.realign_translation_threshold


def agent_poses(graph: SceneGraph) -> dict:
    return {n: graph[n].pose for n in graph.nodes(Layer.AGENT)}


def pair_samples(dg: DependenceGraph, poses: dict) -> dict:
    """Frame samples per robot pair, skipping loop closures whose nodes are unknown."""
    out = {}
    for pair, lcs in dg.edges.items():
        samples = [
            frame_sample(lc, poses[lc.source], poses[lc.target])
            for lc in lcs
            if lc.source in poses and lc.target in poses
        ]
        if samples:
            out[pair] = samples
    return out


class FrameAligner:
    """Caches robot frames once initialized; recomputes only invalidated robots."""

    def __init__(self, cfg: AlignmentConfig | None = None, gnc_config: GncConfig | None = None):
        self.cfg = cfg or AlignmentConfig()
        self.gnc_config = gnc_config
        self.frames: dict[str, Pose] = {}
        self.parents: dict[str, str | None] = {}
        self.edge_estimates: dict[tuple, FrameEstimate] = {}
        self.estimates: dict[tuple, FrameEstimate] = {}
        self.tree: list = []
        self.realignments = 0

    def initialized(self, robot) -> bool:
        return robot in self.frames

    def update(self, snapshot: SceneGraph, loop_closures) -> dict:
        robots = snapshot.robots
        if not robots:
            return {}
        root = robots[0]
        if root not in self.frames:
            self.frames = {root: Pose.identity()}
            self.parents = {root: None}
        if all(r in self.frames for r in robots):
            return dict(self.frames)
        dg = dependence_graph(loop_closures, robots)
        samples = pair_samples(dg, agent_poses(snapshot))
        self.estimates = {
            pair: robust_pose_average(s, self.cfg, self.gnc_config, pair) for pair, s in samples.items()
        }
        dg.edges = {p: v for p, v in dg.edges.items() if p in samples}
        self.tree = spanning_tree(dg, self.estimates)
        frames, parents = chain_to_global(self.tree, self.estimates, robots, self.cfg, known=self.frames)
        for r in sorted(frames):
            if r not in self.frames:
                p = parents[r]
                pair = (min(p, r), max(p, r))
                self.frames[r] = frames[r]
                self.parents[r] = p
                self.edge_estimates[r] = self.estimates[pair]
                log.info("robot %s initialized via %s (%d inliers)", r, p, self.estimates[pair].inlier_count)
        return dict(self.frames)

    def relative_initial(self, robot):
        """Initial relative frame of ``robot`` with respect to its tree parent."""
        p = self.parents.get(robot)
        if p is None:
            return None
        return self.frames[p].inverse() @ self.frames[robot]

    def check_realign(self, optimized_frames: dict) -> list:
        """Invalidate robots whose optimized relative frame drifted past the threshold."""
        fired = []
        for r in sorted(self.frames):
            p = self.parents.get(r)
            if p is None or r not in optimized_frames or p not in optimized_frames:
                continue
            opt_rel = optimized_frames[p].inverse() @ optimized_frames[r]
            if needs_realign(self.relative_initial(r), opt_rel, self.cfg):
                fired.append(r)
        for r in fired:
            self.invalidate(r)
        self.realignments += len(fired)
        return fired

    def invalidate(self, robot):
        drop = {robot}
        changed = True
        while changed:
            changed = False
            for r, p in self.parents.items():
                if p in drop and r not in drop:
                    drop.add(r)
                    changed = True
        for r in drop:
            self.frames.pop(r, None)
            self.parents.pop(r, None)
            self.edge_estimates.pop(r, None)
