import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgfuse.liegroup import Pose
from sgfuse.reconciliation import (
    ICPError,
    MergeCandidate,
    ReconciliationConfig,
    Status,
    boxes_overlap,
    farthest_point_sample,
    icp_object_transform,
    kabsch,
    mutual_nearest,
    place_pairs_bruteforce,
    propose_object_merges,
    propose_place_merges,
    validate_and_apply,
)
from sgfuse.scene_graph import Layer, MeshControlNode, NodeId, ObjectNode, PlaceNode, SceneGraph


def pid(r, i):
    return NodeId(r, Layer.PLACE, i)


def oid(r, i):
    return NodeId(r, Layer.OBJECT, i)


def global_graph(robots=("a", "b")):
    g = SceneGraph()
    for r in robots:
        g.add_robot(r, frame="global")
    return g


def add_object(g, robot, index, points, label):
    ids = []
    base = len(g.nodes(Layer.MESH_CONTROL, robot))
    for k, p in enumerate(points):
        v = NodeId(robot, Layer.MESH_CONTROL, base + k)
        g.add_node(v, MeshControlNode(p))
        ids.append(v)
    g.add_node(oid(robot, index), ObjectNode.from_points(points, label, ids))
    return oid(robot, index)


def box_points(center, extent, rng=None, n_extra=0):
    c, e = np.asarray(center, float), np.asarray(extent, float) / 2
    pts = [c + e * (2 * np.array(s) - 1) for s in np.ndindex(2, 2, 2)]
    if rng is not None and n_extra:
        pts += list(c + rng.uniform(-1, 1, (n_extra, 3)) * e)
    return np.array(pts)


# configuration -------------------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = ReconciliationConfig()
    assert (cfg.place_distance_max, cfg.place_radius_diff_max, cfg.undo_ratio_threshold) == (0.01, 0.01, 0.5)
    with pytest.raises(ValueError):
        ReconciliationConfig(place_distance_max=0)
    with pytest.raises(ValueError):
        ReconciliationConfig(undo_ratio_threshold=1.5)


def test_candidate_invariants():
    with pytest.raises(ValueError):
        MergeCandidate(pid("a", 0), pid("a", 1))
    with pytest.raises(ValueError):
        MergeCandidate(pid("a", 0), oid("b", 0))
    with pytest.raises(ValueError):
        MergeCandidate(pid("b", 0), pid("a", 0))
    assert MergeCandidate(pid("a", 0), pid("b", 0)).kind is Layer.PLACE


# places ------------------------------------------------------------------------------------


def test_coincident_places_one_candidate():
    g = global_graph()
    g.add_node(pid("a", 0), PlaceNode([1, 2, 3], 0.5))
    g.add_node(pid("b", 0), PlaceNode([1, 2, 3], 0.5))
    (c,) = propose_place_merges(g)
    assert (c.a, c.b) == (pid("a", 0), pid("b", 0))
    assert c.relative_transform == Pose.identity()


def test_places_too_far_or_radius_mismatch():
    g = global_graph()
    g.add_node(pid("a", 0), PlaceNode([0, 0, 0], 0.5))
    g.add_node(pid("b", 0), PlaceNode([0.02, 0, 0], 0.5))
    g.add_node(pid("a", 1), PlaceNode([5, 0, 0], 0.5))
    g.add_node(pid("b", 1), PlaceNode([5, 0, 0], 0.52))
    assert propose_place_merges(g) == []


def test_same_robot_places_never_paired():
    g = global_graph()
    g.add_node(pid("a", 0), PlaceNode([0, 0, 0], 0.5))
    g.add_node(pid("a", 1), PlaceNode([0, 0, 0], 0.5))
    assert propose_place_merges(g) == []


@given(st.integers(0, 2**31))
def test_hash_grid_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    g = global_graph(("a", "b", "c"))
    base = rng.uniform(0, 0.2, (60, 3))
    for i in range(100):
        r = "abc"[int(rng.integers(3))]
        p = base[int(rng.integers(60))] + rng.normal(0, 0.006, 3)
        g.add_node(pid(r, i), PlaceNode(p, 0.5 + float(rng.uniform(0, 0.015))))
    fast = [(c.a, c.b) for c in propose_place_merges(g)]
    assert fast == place_pairs_bruteforce(g, ReconciliationConfig())
    assert len(fast) > 0


def test_uninitialized_robot_excluded():
    g = global_graph()
    g.add_robot("c")  # local frame
    for r in "abc":
        g.add_node(pid(r, 0), PlaceNode([0, 0, 0], 0.5))
    cands = propose_place_merges(g)
    assert [(c.a.robot, c.b.robot) for c in cands] == [("a", "b")]


def test_proposal_deterministic_and_relabel_symmetric(rng):
    g = global_graph()
    h = global_graph(("b", "a"))
    for i in range(30):
        p = rng.uniform(0, 0.05, 3)
        for graph, (r1, r2) in ((g, ("a", "b")), (h, ("b", "a"))):
            graph.add_node(pid(r1, i), PlaceNode(p, 0.5))
            graph.add_node(pid(r2, i), PlaceNode(p + 0.001, 0.5))
    a1 = [(c.a, c.b) for c in propose_place_merges(g)]
    assert a1 == [(c.a, c.b) for c in propose_place_merges(g.copy())]
    swap = {"a": "b", "b": "a"}
    relabeled = {tuple(sorted((NodeId(swap[x.robot], x.layer, x.index) for x in ab), key=lambda n: n.key))
                 for ab in ((c.a, c.b) for c in propose_place_merges(h))}
    assert relabeled == set(a1)


# objects --------------------------------------------------------------------------------------


def test_identical_objects_identity_transform(rng):
    g = global_graph()
    pts = box_points([1, 1, 1], [0.5, 0.4, 0.3], rng, 30)
    add_object(g, "a", 0, pts, 2)
    add_object(g, "b", 0, pts, 2)
    (c,) = propose_object_merges(g)
    assert c.status is Status.PROPOSED
    assert c.relative_transform.allclose(Pose.identity(), atol=1e-9)


def test_label_gate(rng):
    g = global_graph()
    pts = box_points([1, 1, 1], [0.5, 0.4, 0.3])
    add_object(g, "a", 0, pts, 3)
    add_object(g, "b", 0, pts, 4)
    assert propose_object_merges(g) == []


def test_disjoint_boxes_no_candidate():
    g = global_graph()
    add_object(g, "a", 0, box_points([0, 0, 0], [0.5] * 3), 1)
    add_object(g, "b", 0, box_points([2, 0, 0], [0.5] * 3), 1)
    assert propose_object_merges(g) == []
    assert not boxes_overlap(g[oid("a", 0)], g[oid("b", 0)])


def test_shifted_duplicate_recovers_offset(rng):
    g = global_graph()
    pts = box_points([1, 1, 1], [0.6, 0.5, 0.4], rng, 40)
    add_object(g, "a", 0, pts, 1)
    add_object(g, "b", 0, pts + [0.1, 0, 0], 1)
    (c,) = propose_object_merges(g)
    oracle = kabsch(pts + [0.1, 0, 0], pts)
    assert np.allclose(c.relative_transform.t, [-0.1, 0, 0], atol=1e-6)
    assert c.relative_transform.allclose(oracle, atol=1e-6)


def test_icp_failure_marks_candidate_invalid():
    g = global_graph()
    add_object(g, "a", 0, box_points([0, 0, 0], [0.5] * 3)[:2], 1)
    add_object(g, "b", 0, box_points([0, 0, 0], [0.5] * 3), 1)
    (c,) = propose_object_merges(g)
    assert c.status is Status.INVALID


# ICP ----------------------------------------------------------------------------------------


def test_kabsch_against_svd_free_oracle(rng):
    # quaternion (Horn) closed form as an independent route
    for _ in range(10):
        src = rng.normal(size=(30, 3))
        T = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
        dst = T.transform_points(src)
        cs, cd = src.mean(0), dst.mean(0)
        S = (src - cs).T @ (dst - cd)
        N = np.array([
            [S[0, 0] + S[1, 1] + S[2, 2], S[1, 2] - S[2, 1], S[2, 0] - S[0, 2], S[0, 1] - S[1, 0]],
            [S[1, 2] - S[2, 1], S[0, 0] - S[1, 1] - S[2, 2], S[0, 1] + S[1, 0], S[2, 0] + S[0, 2]],
            [S[2, 0] - S[0, 2], S[0, 1] + S[1, 0], -S[0, 0] + S[1, 1] - S[2, 2], S[1, 2] + S[2, 1]],
            [S[0, 1] - S[1, 0], S[2, 0] + S[0, 2], S[1, 2] + S[2, 1], -S[0, 0] - S[1, 1] + S[2, 2]],
        ])
        w, V = np.linalg.eigh(N)
        q = V[:, -1]
        horn = Pose.from_array([*q, 0, 0, 0])
        horn = Pose(horn.R, cd - horn.R @ cs)
        assert kabsch(src, dst).allclose(horn, atol=1e-9)
        assert kabsch(src, dst).allclose(T, atol=1e-9)


def test_icp_identical_sets(rng):
    pts = rng.uniform(-0.5, 0.5, (100, 3))
    assert icp_object_transform(pts, pts).allclose(Pose.identity(), atol=1e-9)


def test_icp_recovers_rigid_motion(rng):
    a = rng.uniform(-0.5, 0.5, (150, 3)) * [1.0, 0.6, 0.3]
    T = Pose.from_rotvec([0.05, -0.08, 0.12], [0.3, -0.2, 0.1])
    b = T.transform_points(a)
    got = icp_object_transform(a, b)
    assert got.allclose(T.inverse(), atol=1e-6)


def test_icp_noise_monte_carlo():
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-0.5, 0.5, (200, 3)) * [1.0, 0.7, 0.4]
        T = Pose.from_rotvec(rng.normal(0, 0.05, 3), rng.uniform(-0.05, 0.05, 3))
        b = T.transform_points(a) + rng.normal(0, 0.01, (200, 3))
        got = icp_object_transform(a, b)
        errs.append(np.linalg.norm(got.t - T.inverse().t))
    assert max(errs) < 0.01


def test_icp_needs_three_points():
    with pytest.raises(ICPError):
        icp_object_transform(np.zeros((2, 3)), np.ones((5, 3)))


def test_mutual_nearest_respects_distance():
    src = np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5]], float)
    dst = np.array([[0.1, 0, 0], [1.05, 0, 0], [9, 9, 9]], float)
    i, j = mutual_nearest(src, dst, 0.25)
    assert i.tolist() == [0, 1] and j.tolist() == [0, 1]


def test_farthest_point_sample_spreads(rng):
    pts = np.vstack([rng.normal(0, 0.01, (500, 3)), [[10, 0, 0]], [[-10, 0, 0]]])
    idx = farthest_point_sample(pts, 3)
    assert {500, 501} <= set(idx.tolist())
    assert len(farthest_point_sample(pts, 1000)) == len(pts)


# validate and apply ---------------------------------------------------------------------------


def ten_pairs():
    g = global_graph()
    cands = []
    for i in range(10):
        g.add_node(pid("a", i), PlaceNode([i, 0, 0], 0.5))
        g.add_node(pid("b", i), PlaceNode([i, 0, 0], 0.5))
        if i:
            g.add_edge(pid("a", i - 1), pid("a", i))
            g.add_edge(pid("b", i - 1), pid("b", i))
        cands.append(MergeCandidate(pid("a", i), pid("b", i)))
    return g, cands


@pytest.mark.parametrize("n_in, applied", [(10, 10), (5, 5), (4, 0), (0, 0)])
def test_ratio_rule(n_in, applied):
    g, cands = ten_pairs()
    before = g.serialize()
    mask = np.arange(10) < n_in
    rep = validate_and_apply(g, cands, mask)
    assert rep.applied == applied
    assert rep.ratio == n_in / 10
    assert len(g.nodes(Layer.PLACE)) == 20 - applied
    if applied == 0:
        assert g.serialize() == before
        assert rep.undone == n_in
    assert [c.status for c in rep.candidates] == [Status.VALID if m else Status.INVALID for m in mask]


def test_pre_invalid_candidates_excluded_from_ratio():
    g, cands = ten_pairs()
    cands[0] = MergeCandidate(cands[0].a, cands[0].b, status=Status.INVALID)
    rep = validate_and_apply(g, cands, np.ones(10, bool))
    assert rep.proposed == 9 and rep.valid == 9 and rep.applied == 9
    assert rep.candidates[0].status is Status.INVALID


def test_chained_candidates_merge_into_lowest_id():
    g = global_graph(("a", "b", "c"))
    for r in "abc":
        g.add_node(pid(r, 0), PlaceNode([0, 0, 0], 0.5))
    cands = [MergeCandidate(pid("a", 0), pid("b", 0)), MergeCandidate(pid("b", 0), pid("c", 0)),
             MergeCandidate(pid("a", 0), pid("c", 0))]
    rep = validate_and_apply(g, cands, [True, True, True])
    assert g.nodes(Layer.PLACE) == [pid("a", 0)]
    assert rep.applied == 2


def test_mask_length_checked():
    g, cands = ten_pairs()
    with pytest.raises(ValueError):
        validate_and_apply(g, cands, np.ones(3, bool))


def test_report_row_keys():
    g, cands = ten_pairs()
    row = validate_and_apply(g, cands, np.ones(10, bool)).to_row()
    assert row == {"merges_proposed": 10, "merges_valid": 10, "merges_applied": 10,
                   "merges_undone": 0, "merge_ratio": 1.0}
