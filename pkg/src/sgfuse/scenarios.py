"""Scenario documents for the standard test worlds.

Each builder returns a JSON-compatible dict accepted by
:meth:`ScenarioConfig.from_json`, so the same worlds can be written to disk
and run from the command line.
"""

from __future__ import annotations

import numpy as np


def _robot(rid, waypoints, *, step=0.5, sigma_rot=0.0, sigma_trans=0.0, period=10, radius=3.0,
           semantics=True, mesh=True, rooms=True):
    return {
        "id": rid,
        "waypoints": [[float(x) for x in p] for p in waypoints],
        "step": step,
        "odometry_noise": {"sigma_rot": sigma_rot, "sigma_trans": sigma_trans},
        "snapshot_period": period,
        "observation_radius": radius,
        "capabilities": {"has_semantics": semantics, "has_mesh": mesh, "rooms": rooms},
    }


def _grid_places(nx, ny, spacing, z=1.0, radius=0.5, origin=(0.0, 0.0)):
    return [
        {"position": [origin[0] + i * spacing, origin[1] + j * spacing, z], "radius": radius}
        for j in range(ny)
        for i in range(nx)
    ]


def _scenario(name, seed, world, robots, loop_closures, backend_period=0, solver=None, threshold=1.0):
    return {
        "name": name,
        "seed": seed,
        "world": world,
        "robots": robots,
        "loop_closures": loop_closures,
        "solver": solver or {},
        "backend": {"period": backend_period},
        "evaluation": {"object_threshold": threshold},
    }


def _lawnmower(x0, x1, rows, z=0.0, reverse=False):
    pts = []
    for k, y in enumerate(rows):
        xs = (x0, x1) if k % 2 == 0 else (x1, x0)
        pts += [[xs[0], y, z], [xs[1], y, z]]
    return pts[::-1] if reverse else pts


def shared_objects(seed=0, n_objects=20, backend_period=0, semantics_b=True, **lc):
    """Two robots sweep the same 18 x 8 m area containing 50 places and ``n_objects`` boxes.

    Noise defaults to zero, so every duplicate place and object coincides once
    the frames are aligned.
    """
    rng = np.random.default_rng(1000 + seed)
    places = _grid_places(10, 5, 2.0)
    # objects on a jittered lattice between the places, well apart from each other
    slots = [(1.0 + 2.0 * i, 1.0 + 2.0 * j) for j in range(4) for i in range(9)]
    pick = sorted(rng.choice(len(slots), size=n_objects, replace=False))
    objects = []
    for k, s in enumerate(pick):
        x, y = slots[s]
        objects.append(
            {
                "label": int(k % 5),
                "center": [x + float(rng.uniform(-0.2, 0.2)), y + float(rng.uniform(-0.2, 0.2)), 0.6],
                "extent": [float(v) for v in rng.uniform(0.3, 0.6, 3)],
            }
        )
    world = {
        "box_min": [-5.0, -5.0, -1.0],
        "box_max": [23.0, 13.0, 4.0],
        "places": places,
        "place_adjacency": 2.01,
        "objects": objects,
        "rooms": [{"min": [-1.0, -1.0, 0.0], "max": [9.0, 9.0, 3.0]},
                  {"min": [9.0, -1.0, 0.0], "max": [19.0, 9.0, 3.0]}],
    }
    rows = [0.0, 4.0, 8.0]
    robots = [
        _robot("a", _lawnmower(-1.0, 19.0, rows)),
        _robot("b", _lawnmower(-1.0, 19.0, rows, reverse=True), semantics=semantics_b),
    ]
    lcs = {"detection_radius": 1.0, "inter_per_pair": 10, "outlier_rate": 0.0}
    lcs.update(lc)
    return _scenario("shared_objects", seed, world, robots, lcs, backend_period)


def heterogeneous(seed=0, **kw):
    """Shared-object world where robot ``b`` reconstructs geometry only (no object layer)."""
    doc = shared_objects(seed, semantics_b=False, **kw)
    doc["name"] = "heterogeneous"
    return doc


def square_loop(seed=0, side=10.0, laps=2, odometry_noise=0.01, rotation_noise=0.01,
                outlier_rate=0.0, inter_per_pair=20, intra_per_robot=20, lc_sigma_trans=0.02,
                lc_sigma_rot=0.002):
    """Two robots drive ``laps`` laps of the same square from opposite corners."""
    corners = [[0.0, 0.0, 0.0], [side, 0.0, 0.0], [side, side, 0.0], [0.0, side, 0.0]]
    path_a = [corners[k % 4] for k in range(4 * laps + 1)]
    path_b = [corners[(k + 2) % 4] for k in range(4 * laps + 1)]
    places = [
        {"position": [x, y, 1.0], "radius": 0.5}
        for x, y in sorted({(float(x), float(y)) for s in np.arange(0.0, side + 1e-9, 2.5)
                            for x, y in ((s, 0.0), (side, s), (s, side), (0.0, s))})
    ]
    world = {
        "box_min": [-5.0, -5.0, -1.0],
        "box_max": [side + 5.0, side + 5.0, 3.0],
        "places": places,
        "place_adjacency": 2.6,
        "objects": [],
        "rooms": [],
    }
    robots = [
        _robot(r, p, sigma_rot=rotation_noise, sigma_trans=odometry_noise, mesh=False, semantics=False)
        for r, p in (("a", path_a), ("b", path_b))
    ]
    lcs = {
        "detection_radius": 1.0,
        "inter_per_pair": inter_per_pair,
        "intra_per_robot": intra_per_robot,
        "intra_min_gap": 20,
        "outlier_rate": outlier_rate,
        "sigma_trans": lc_sigma_trans,
        "sigma_rot": lc_sigma_rot,
    }
    return _scenario("square_loop", seed, world, robots, lcs)


def three_robot_alignment(seed=0, inter_per_pair=30, outlier_rate=0.8, sigma_trans=0.05, sigma_rot=0.002,
                          sampling="stratified"):
    """Three robots crossing a shared corridor; alignment-only world without places or objects."""
    world = {
        "box_min": [-10.0, -10.0, -1.0],
        "box_max": [30.0, 30.0, 3.0],
        "places": [],
        "objects": [],
        "rooms": [],
    }
    robots = [
        _robot("a", [[0.0, 0.0, 0.0], [20.0, 0.0, 0.0], [20.0, 1.0, 0.0], [0.0, 1.0, 0.0]], period=50),
        _robot("b", [[20.0, 0.5, 0.0], [0.0, 0.5, 0.0], [0.0, 1.5, 0.0], [20.0, 1.5, 0.0]], period=50),
        _robot("c", [[10.0, -0.5, 0.0], [0.0, -0.5, 0.0], [0.0, 0.8, 0.0], [20.0, 0.8, 0.0]], period=50),
    ]
    lcs = {
        "detection_radius": 1.5,
        "inter_per_pair": inter_per_pair,
        "outlier_rate": outlier_rate,
        "outlier_sampling": sampling,
        "sigma_trans": sigma_trans,
        "sigma_rot": sigma_rot,
    }
    return _scenario("three_robot_alignment", seed, world, robots, lcs)
