import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import pose_tls_subset_optimum
from sgfuse import liegroup as lg
from sgfuse import scenarios
from sgfuse.alignment import (
    AlignmentConfig,
    DependenceGraph,
    FrameAligner,
    FrameEstimate,
    LoopClosure,
    agent_poses,
    chain_to_global,
    dependence_graph,
    frame_sample,
    medoid_index,
    needs_realign,
    pair_samples,
    robust_pose_average,
    spanning_tree,
)
from sgfuse.frontend import FrontendGraph
from sgfuse.gnc import GncConfig, sqrt_information
from sgfuse.liegroup import Pose
from sgfuse.scene_graph import Layer, NodeId
from sgfuse.simulator import ScenarioConfig, simulate


def agent(r, i):
    return NodeId(r, Layer.AGENT, i)


def random_pose(rng, scale=5.0):
    return Pose.from_rotvec(rng.normal(size=3), rng.uniform(-scale, scale, 3))


def simulated(seed=0, **kw):
    sc = ScenarioConfig.from_json(scenarios.three_robot_alignment(seed, **kw))
    res = simulate(sc)
    fg = FrontendGraph()
    for u in res.updates():
        fg.ingest(u)
    return sc, res, fg.snapshot()


# loop closures ----------------------------------------------------------------------------


def test_loop_closure_validation_and_json():
    with pytest.raises(ValueError):
        LoopClosure(NodeId("a", Layer.PLACE, 0), agent("b", 0), Pose.identity())
    lc = LoopClosure(agent("a", 3), agent("b", 1), Pose.from_rotvec([0, 0, 1], [1, 2, 3]))
    back = LoopClosure.from_json(lc.to_json())
    assert back.to_json() == lc.to_json()
    assert not lc.intra_robot and LoopClosure(agent("a", 0), agent("a", 5), Pose.identity()).intra_robot
    bad = lc.to_json()
    bad["intra_robot"] = True
    with pytest.raises(ValueError):
        LoopClosure.from_json(bad)


def test_reversed_loop_closure_inverts_measurement(rng):
    A = rng.normal(size=(6, 6))
    lc = LoopClosure(agent("a", 0), agent("b", 0), random_pose(rng), A @ A.T + np.eye(6))
    r = lc.reversed()
    assert (r.measurement @ lc.measurement).allclose(Pose.identity())
    assert r.source == lc.target
    assert np.allclose(r.reversed().covariance, lc.covariance)


# frame samples ------------------------------------------------------------------------------


def test_frame_sample_identity_odometry(rng):
    T = random_pose(rng)
    lc = LoopClosure(agent("a", 0), agent("b", 0), T)
    assert frame_sample(lc, Pose.identity(), Pose.identity()).allclose(T)


def test_frame_sample_recovers_true_frame(rng):
    # world poses of both robot frames and of the two observing agents
    W_A, W_B = random_pose(rng), random_pose(rng)
    W_ai, W_bj = random_pose(rng), random_pose(rng)
    pose_a = W_A.inverse() @ W_ai
    pose_b = W_B.inverse() @ W_bj
    lc = LoopClosure(agent("a", 0), agent("b", 0), W_ai.inverse() @ W_bj)
    assert frame_sample(lc, pose_a, pose_b).allclose(W_A.inverse() @ W_B, atol=1e-9)


def test_frame_sample_rejects_intra():
    lc = LoopClosure(agent("a", 0), agent("a", 4), Pose.identity())
    with pytest.raises(ValueError):
        frame_sample(lc, Pose.identity(), Pose.identity())


def test_noiseless_simulation_gives_identical_samples():
    sc, res, snap = simulated(outlier_rate=0.0, sigma_trans=0.0, sigma_rot=0.0, inter_per_pair=10)
    samples = pair_samples(dependence_graph(res.loop_closures, snap.robots), agent_poses(snap))
    for pair, s in samples.items():
        assert len(s) == 10
        truth = res.ground_truth.relative_frame(*pair)
        for x in s:
            assert x.allclose(truth, atol=1e-9)


# robust pose averaging ------------------------------------------------------------------------


def test_average_of_equal_samples(rng):
    T = random_pose(rng)
    est = robust_pose_average([T] * 6)
    assert est.estimate.allclose(T, atol=1e-12)
    assert est.inlier_count == 6 == est.samples_used


def test_seven_plus_three_outliers_matches_subset_oracle(rng):
    cfg = AlignmentConfig()
    for trial in range(3):
        T = random_pose(rng)
        good = [T.boxplus(np.r_[rng.normal(0, 0.01, 3) * 0.2, rng.normal(0, 0.01, 3)]) for _ in range(7)]
        bad = [random_pose(rng, 20.0) for _ in range(3)]
        samples = good + bad
        est = robust_pose_average(samples, cfg)
        assert est.inlier_count == 7
        assert np.linalg.norm(est.estimate.t - T.t) < 0.05
        assert np.degrees((T.inverse() @ est.estimate).rotation_angle()) < 1.0
        mask, _ = pose_tls_subset_optimum(samples, sqrt_information(cfg.sigma), GncConfig().threshold(6))
        assert np.array_equal(np.array(est.inlier_mask), mask)


def test_four_tight_samples_fail_gate(rng):
    T = random_pose(rng)
    est = robust_pose_average([T.boxplus(0.001 * rng.normal(size=6)) for _ in range(4)])
    assert est.inlier_count == 4
    assert not est.passes(AlignmentConfig())
    assert est.passes(AlignmentConfig(k_min_inliers=4))


def test_medoid_picks_central_sample():
    poses = [Pose.from_translation([x, 0, 0]) for x in (0.0, 1.0, 1.1, 1.2, 50.0)]
    assert medoid_index(poses) == 2


@given(st.integers(0, 2**31))
def test_average_is_left_equivariant(seed):
    rng = np.random.default_rng(seed)
    G = random_pose(rng)
    X = random_pose(rng)
    poses_a = [random_pose(rng) for _ in range(5)]
    poses_b = [random_pose(rng) for _ in range(5)]
    # noiseless measurements consistent with frame X of B in A
    lcs = [LoopClosure(agent("a", i), agent("b", i), pa.inverse() @ X @ pb)
           for i, (pa, pb) in enumerate(zip(poses_a, poses_b))]
    s1 = [frame_sample(lc, pa, pb) for lc, pa, pb in zip(lcs, poses_a, poses_b)]
    s2 = [frame_sample(lc, G @ pa, pb) for lc, pa, pb in zip(lcs, poses_a, poses_b)]
    for x, y in zip(s1, s2):
        assert (G @ x).allclose(y, atol=1e-9)
    e1 = robust_pose_average(s1).estimate
    e2 = robust_pose_average(s2).estimate
    assert (G @ e1).allclose(e2, atol=1e-9)


def test_duplicate_inlier_never_lowers_inlier_count(rng):
    T = random_pose(rng)
    samples = [T.boxplus(0.002 * rng.normal(size=6)) for _ in range(6)] + [random_pose(rng, 20) for _ in range(3)]
    base = robust_pose_average(samples)
    k = base.inlier_mask.index(True)
    more = robust_pose_average(samples + [samples[k]])
    assert more.inlier_count >= base.inlier_count


# dependence graph and spanning tree --------------------------------------------------------------


def est(pair, n):
    return FrameEstimate(pair, Pose.identity(), n, n)


def test_two_robot_tree():
    dg = DependenceGraph(["a", "b"], {("a", "b"): []})
    assert spanning_tree(dg, {("a", "b"): est(("a", "b"), 6)}) == [("a", "b")]


def test_triangle_keeps_heaviest_edges():
    pairs = {("a", "b"): 9, ("b", "c"): 7, ("a", "c"): 3}
    dg = DependenceGraph(["a", "b", "c"], {p: [] for p in pairs})
    tree = spanning_tree(dg, {p: est(p, n) for p, n in pairs.items()})
    assert sorted(tree) == [("a", "b"), ("b", "c")]


def test_tie_break_by_robot_ids():
    pairs = {("a", "b"): 5, ("b", "c"): 5, ("a", "c"): 5}
    dg = DependenceGraph(["a", "b", "c"], {p: [] for p in pairs})
    assert spanning_tree(dg, {p: est(p, n) for p, n in pairs.items()}) == [("a", "b"), ("a", "c")]


def test_disconnected_robot_left_out():
    dg = DependenceGraph(["a", "b", "c"], {("a", "b"): []})
    tree = spanning_tree(dg, {("a", "b"): est(("a", "b"), 8)})
    frames, _ = chain_to_global(tree, {("a", "b"): est(("a", "b"), 8)}, ["a", "b", "c"])
    assert set(frames) == {"a", "b"}


def test_dependence_graph_orients_pairs():
    lcs = [LoopClosure(agent("b", 0), agent("a", 2), Pose.from_translation([1, 0, 0])),
           LoopClosure(agent("a", 0), agent("a", 9), Pose.identity())]
    dg = dependence_graph(lcs)
    assert dg.pairs() == [("a", "b")]
    (lc,) = dg.edges[("a", "b")]
    assert lc.source == agent("a", 2) and np.allclose(lc.measurement.t, [-1, 0, 0])


# chaining -------------------------------------------------------------------------------------


def test_single_robot_chain():
    frames, _ = chain_to_global([], {}, ["a"])
    assert frames == {"a": Pose.identity()}


def test_chain_composes_along_path(rng):
    Xab, Xbc = random_pose(rng), random_pose(rng)
    ests = {("a", "b"): FrameEstimate(("a", "b"), Xab, 6, 6), ("b", "c"): FrameEstimate(("b", "c"), Xbc, 6, 6)}
    frames, parents = chain_to_global([("a", "b"), ("b", "c")], ests, ["a", "b", "c"])
    assert frames["c"].allclose(Xab @ Xbc)
    assert parents == {"a": None, "b": "a", "c": "b"}


def test_gated_edge_cuts_subtree(rng):
    ests = {("a", "b"): FrameEstimate(("a", "b"), random_pose(rng), 4, 10),
            ("b", "c"): FrameEstimate(("b", "c"), random_pose(rng), 9, 10)}
    frames, _ = chain_to_global([("a", "b"), ("b", "c")], ests, ["a", "b", "c"])
    assert set(frames) == {"a"}


def test_three_robot_world_frames():
    sc, res, snap = simulated(outlier_rate=0.0, sigma_trans=0.0, sigma_rot=0.0)
    frames = FrameAligner(sc.alignment, sc.gnc).update(snap, res.loop_closures)
    assert set(frames) == {"a", "b", "c"}
    for r in "bc":
        assert np.linalg.norm(frames[r].t - res.ground_truth.relative_frame("a", r).t) < 0.05
    # chaining reproduces each measurement through the frame-sample relation
    poses = agent_poses(snap)
    for lc in res.loop_closures:
        if lc.intra_robot:
            continue
        a, b = lc.robots
        rel = frames[a].inverse() @ frames[b]
        pred = poses[lc.source].inverse() @ rel @ poses[lc.target]
        assert pred.allclose(lc.measurement, atol=1e-6)


# re-alignment --------------------------------------------------------------------------------


def test_needs_realign_rule():
    cfg = AlignmentConfig()
    T = Pose.from_translation([1, 2, 3])
    assert not needs_realign(FrameEstimate(("a", "b"), T, 5, 5), T, cfg)
    assert needs_realign(T, Pose.from_translation([11.5, 2, 3]), cfg)
    flipped = Pose.from_rotvec([0, 0, np.pi], [10.9, 2, 3])
    assert not needs_realign(T, flipped, cfg)


def test_aligner_caches_and_invalidates():
    sc, res, snap = simulated(outlier_rate=0.0, sigma_trans=0.0, sigma_rot=0.0)
    al = FrameAligner(sc.alignment, sc.gnc)
    first = al.update(snap, res.loop_closures)
    # cached: loop closures are not consulted again once every robot is initialized
    assert al.update(snap, []) == first
    far = {r: first[r] for r in first}
    far["b"] = first["b"] @ Pose.from_translation([20.0, 0, 0])
    fired = al.check_realign(far)
    assert "b" in fired and "b" not in al.frames
    assert al.realignments == len(fired)
    again = al.update(snap, res.loop_closures)
    assert again["b"].allclose(first["b"], atol=1e-9)


def test_lc_covariance_must_be_spd():
    with pytest.raises(ValueError):
        LoopClosure(agent("a", 0), agent("b", 0), Pose.identity(), -np.eye(6))
    assert lg.mahalanobis_sq(np.zeros(6), LoopClosure(agent("a", 0), agent("b", 0), Pose.identity()).covariance) == 0
