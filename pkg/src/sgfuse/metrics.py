"""Trajectory, object and place accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .liegroup import Pose
from .reconciliation import kabsch
from .scene_graph import Layer, SceneGraph


class MetricError(ValueError):
    pass


def associate(est_t, gt_t, tol=1e-6):
    """Index pairs of equal timestamps (within ``tol``) between two sorted time arrays."""
    est_t = np.asarray(est_t, dtype=float)
    gt_t = np.asarray(gt_t, dtype=float)
    if len(gt_t) == 0 or len(est_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(gt_t, est_t), 0, len(gt_t) - 1)
    jm = np.clip(j - 1, 0, len(gt_t) - 1)
    j = np.where(np.abs(gt_t[jm] - est_t) < np.abs(gt_t[j] - est_t), jm, j)
    ok = np.abs(gt_t[j] - est_t) <= tol
    return np.nonzero(ok)[0], j[ok]


def evaluate_ate(est_t, est_xyz, gt_t, gt_xyz, align=False) -> float:
    """Translational RMSE over timestamp-matched poses, optionally after a rigid fit."""
    i, j = associate(est_t, gt_t)
    if len(i) == 0:
        raise MetricError("no overlapping timestamps")
    e = np.asarray(est_xyz, dtype=float)[i]
    g = np.asarray(gt_xyz, dtype=float)[j]
    if align:
        e = kabsch(e, g).transform_points(e)
    return float(np.sqrt(np.mean(np.sum((e - g) ** 2, axis=1))))


@dataclass
class Reference:
    """Trajectories, objects and places expressed in one evaluation frame."""

    trajectories: dict
    """robot -> (timestamps (n,), positions (n, 3))"""
    objects: list
    """(label, centroid) pairs"""
    places: np.ndarray

    @classmethod
    def from_graph(cls, g: SceneGraph, robots=None):
        robots = g.robots if robots is None else robots
        trajs = {}
        for r in robots:
            agents = g.nodes(Layer.AGENT, r)
            if agents:
                trajs[r] = (
                    np.array([g[a].timestamp for a in agents]),
                    np.array([g[a].pose.t for a in agents]),
                )
        objects = [(g[o].semantic_label, g[o].centroid) for o in g.nodes(Layer.OBJECT) if o.robot in robots]
        places = np.array([g[p].position for p in g.nodes(Layer.PLACE) if p.robot in robots]).reshape(-1, 3)
        return cls(trajs, objects, places)

    @classmethod
    def from_ground_truth(cls, gt, frame: Pose | None = None):
        """Ground truth mapped into ``frame`` (default: the root robot's true start frame)."""
        T = gt.to_frame() if frame is None else frame
        trajs = {
            r: (np.asarray(ts, float), T.transform_points(np.array([p.t for p in poses])))
            for r, (ts, poses) in gt.trajectories.items()
        }
        objects = [(o.label, T.transform_points(o.center)) for o in gt.objects]
        places = T.transform_points(gt.places) if len(gt.places) else np.zeros((0, 3))
        return cls(trajs, objects, places)


def multi_robot_ate(est: Reference, gt: Reference, root: str, robots=None) -> dict:
    """Per-robot and pooled RMSE after one rigid alignment fitted on the root robot only."""
    robots = sorted(est.trajectories) if robots is None else sorted(robots)
    if root not in est.trajectories or root not in gt.trajectories:
        raise MetricError(f"root robot {root!r} missing")
    i, j = associate(est.trajectories[root][0], gt.trajectories[root][0])
    if len(i) == 0:
        raise MetricError("root robot has no overlapping timestamps")
    A = kabsch(est.trajectories[root][1][i], gt.trajectories[root][1][j])
    out, sq, n = {}, 0.0, 0
    for r in robots:
        if r not in est.trajectories or r not in gt.trajectories:
            continue
        ii, jj = associate(est.trajectories[r][0], gt.trajectories[r][0])
        if len(ii) == 0:
            continue
        d = A.transform_points(est.trajectories[r][1][ii]) - gt.trajectories[r][1][jj]
        s = np.sum(d**2, axis=1)
        out[r] = float(np.sqrt(np.mean(s)))
        sq += float(s.sum())
        n += len(s)
    out["all"] = float(np.sqrt(sq / n)) if n else math.nan
    return out


@dataclass
class ObjectScores:
    found: float
    correct: float
    flag: str = ""
    """Empty, or names the undefined percentage reported as 0."""


def evaluate_objects(est, gt, threshold: float) -> ObjectScores:
    """%Found and %Correct with same-label matching within ``threshold`` metres.

    ``est`` and ``gt`` are lists of ``(label, centroid)``. A percentage over an
    empty set is reported as 0 and named in ``flag``.
    """
    if not threshold > 0:
        raise MetricError("threshold must be positive")

    def within(src, dst):
        hits = 0
        by_label: dict[int, list] = {}
        for lab, c in dst:
            by_label.setdefault(int(lab), []).append(np.asarray(c, float))
        for lab, c in src:
            cands = by_label.get(int(lab))
            if cands and np.min(np.linalg.norm(np.array(cands) - np.asarray(c, float), axis=1)) <= threshold:
                hits += 1
        return hits

    flags = []
    if gt:
        found = 100.0 * within(gt, est) / len(gt)
    else:
        found = 0.0
        flags.append("found")
    if est:
        correct = 100.0 * within(est, gt) / len(est)
    else:
        correct = 0.0
        flags.append("correct")
    return ObjectScores(found, correct, ",".join(flags))


@dataclass
class PlaceErrors:
    mean: float
    median: float
    max: float
    count: int


def evaluate_places(est_positions, gt_positions) -> PlaceErrors:
    """Distance from each estimated place to the nearest ground-truth place."""
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if len(est) == 0:
        return PlaceErrors(0.0, 0.0, 0.0, 0)
    if len(gt) == 0:
        raise MetricError("no ground-truth places")
    d, _ = cKDTree(gt).query(est)
    return PlaceErrors(float(d.mean()), float(np.median(d)), float(d.max()), len(d))


def frame_errors(estimated: Pose, true: Pose):
    """Translation (m) and rotation (deg) difference between two frames."""
    d = true.inverse() @ estimated
    return float(np.linalg.norm(estimated.t - true.t)), float(np.degrees(d.rotation_angle()))
