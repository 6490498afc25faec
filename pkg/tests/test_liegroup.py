import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from sgfuse import liegroup as lg
from sgfuse.liegroup import Pose


def rz(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def twist_matrix(v):
    """4x4 Lie algebra element of a rotation-first twist."""
    X = np.zeros((4, 4))
    X[:3, :3] = [[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]]
    X[:3, 3] = v[3:]
    return X


finite = st.floats(-1.0, 1.0, allow_nan=False)
small_twists = arrays(np.float64, 6, elements=st.floats(-0.55, 0.55, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v) < 1.0
)
twists = arrays(np.float64, 6, elements=st.floats(-3.0, 3.0, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v[:3]) < np.pi - 1e-3
)


@st.composite
def poses(draw):
    v = draw(arrays(np.float64, 6, elements=st.floats(-4.0, 4.0, allow_nan=False)))
    return Pose.exp(v)


# compose ---------------------------------------------------------------------


def test_compose_identity():
    assert Pose.identity() @ Pose.identity() == Pose.identity()


def test_compose_hand_product():
    a = np.eye(4)
    a[:3, :3] = rz(90)
    a[:3, 3] = [1, 0, 0]
    b = np.eye(4)
    b[:3, :3] = rz(90)
    expected = np.eye(4)
    expected[:3, :3] = rz(180)
    expected[:3, 3] = [1, 0, 0]
    got = Pose(rz(90), [1, 0, 0]) @ Pose(rz(90))
    assert np.allclose(got.matrix, expected, atol=1e-12)
    assert np.allclose(a @ b, expected, atol=1e-12)


@given(poses())
def test_compose_inverse_is_identity(x):
    assert (x @ x.inverse()).allclose(Pose.identity(), atol=1e-9)
    assert (x.inverse() @ x).allclose(Pose.identity(), atol=1e-9)


@given(poses(), poses(), poses())
def test_compose_associative(x, y, z):
    assert ((x @ y) @ z).allclose(x @ (y @ z), atol=1e-9)


@given(poses(), poses())
def test_compose_applies_right_then_left(a, b):
    p = np.array([0.3, -1.2, 2.0])
    assert np.allclose((a @ b) @ p, a @ (b @ p), atol=1e-9)


# exp / log -------------------------------------------------------------------


def test_exp_zero_is_identity():
    assert Pose.exp(np.zeros(6)) == Pose.identity()


def test_exp_rz90():
    assert np.allclose(Pose.exp([0, 0, np.pi / 2, 0, 0, 0]).R, rz(90), atol=1e-12)


@given(twists)
def test_exp_matches_matrix_exponential(v):
    assert np.allclose(lg.exp(v), scipy.linalg.expm(twist_matrix(v)), atol=1e-9)


@given(twists)
def test_log_exp_roundtrip(v):
    assert np.allclose(lg.log(lg.exp(v)), v, atol=1e-9)


@given(poses())
def test_exp_log_roundtrip(x):
    assert Pose.exp(x.log()).allclose(x, atol=1e-9)


@given(twists)
def test_log_matches_matrix_logarithm(v):
    L = np.real(scipy.linalg.logm(lg.exp(v)))
    assert np.allclose(lg.log(lg.exp(v)), [L[2, 1], L[0, 2], L[1, 0], *L[:3, 3]], atol=1e-7)


@pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-9, 1e-8, 1e-6, 1e-3, 1e-2, 0.1, 1.0, 3.0])
def test_small_angle_branches_continuous(theta):
    axis = np.array([0.3, -0.5, 0.81])
    axis /= np.linalg.norm(axis)
    v = np.r_[theta * axis, 0.4, -0.2, 1.1]
    assert np.allclose(lg.exp(v), scipy.linalg.expm(twist_matrix(v)), atol=1e-12)
    assert np.allclose(lg.log(lg.exp(v)), v, atol=1e-10)


def test_rotation_matches_scipy_rotvec(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        assert np.allclose(lg.so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


def test_log_near_pi_uses_principal_branch():
    for axis in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.0]) / np.sqrt(2)):
        for sign in (1.0, -1.0):
            w = lg.so3_log(lg.so3_exp(sign * np.pi * axis))
            assert np.isclose(np.linalg.norm(w), np.pi, atol=1e-9)
            assert np.allclose(lg.so3_exp(w), lg.so3_exp(np.pi * axis), atol=1e-9)
            # first nonzero component positive
            assert w[np.flatnonzero(np.abs(w) > 1e-9)[0]] > 0


def test_log_just_below_pi(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        w = (np.pi - 1e-5) * axis
        assert np.allclose(lg.so3_log(lg.so3_exp(w)), w, atol=1e-6)


# boxminus ----------------------------------------------------------------------


def test_boxminus_self_is_zero(rng):
    x = Pose.exp(rng.normal(size=6))
    assert np.allclose(x.boxminus(x), 0.0, atol=1e-12)


def test_boxminus_pure_translation():
    assert np.allclose(Pose.identity().boxminus(Pose.from_translation([1, 0, 0])), [0, 0, 0, 1, 0, 0])


def test_boxminus_rz30_rz60():
    got = Pose(rz(30)).boxminus(Pose(rz(60)))
    assert np.allclose(got, [0, 0, np.pi / 6, 0, 0, 0], atol=1e-12)


@given(poses(), small_twists)
def test_boxminus_inverts_boxplus(x, v):
    assert np.allclose(x.boxminus(x.boxplus(v)), v, atol=1e-8)


# adjoint -----------------------------------------------------------------------


@given(poses(), small_twists)
def test_adjoint_moves_perturbation(x, v):
    left = Pose.exp(x.adjoint() @ v) @ x
    assert left.allclose(x @ Pose.exp(v), atol=1e-9)


# mahalanobis --------------------------------------------------------------------


def test_mahalanobis_examples():
    assert lg.mahalanobis_sq(np.zeros(6), np.eye(6)) == 0.0
    assert np.isclose(lg.mahalanobis_sq([0, 0, 0, 3, 0, 0], np.eye(6)), 9.0)
    assert np.isclose(lg.mahalanobis_sq([0, 0, 0, 1, 0, 0], np.diag([1, 1, 1, 4, 1, 1])), 0.25)


def test_covariance_validation():
    with pytest.raises(ValueError):
        lg.check_covariance(np.diag([1, 1, 1, 1, 1, -1.0]))
    with pytest.raises(ValueError):
        bad = np.eye(6)
        bad[0, 1] = 1e-6
        lg.check_covariance(bad)
    with pytest.raises(ValueError):
        lg.check_covariance(np.eye(5))


@given(poses(), arrays(np.float64, 6, elements=finite))
def test_mahalanobis_adjoint_invariance(x, v):
    rng = np.random.default_rng(abs(hash(v.tobytes())) % 2**32)
    A = rng.normal(size=(6, 6))
    sigma = A @ A.T + 0.5 * np.eye(6)
    Ad = x.adjoint()
    a = lg.mahalanobis_sq(v, sigma)
    b = lg.mahalanobis_sq(Ad @ v, Ad @ sigma @ Ad.T)
    assert np.isclose(a, b, rtol=1e-9, atol=1e-9)


# serialization ----------------------------------------------------------------


@given(poses())
def test_quaternion_canonical_and_unit(x):
    q = x.quaternion()
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9
    assert q[0] >= 0
    assert Pose.from_array(x.to_array()).allclose(x, atol=1e-9)


@given(poses())
def test_array_roundtrip_is_fixed_point(x):
    y = Pose.from_array(x.to_array())
    assert np.array_equal(Pose.from_array(y.to_array()).to_array(), y.to_array())


def test_from_array_normalizes_and_rejects_zero():
    p = Pose.from_array([2.0, 0, 0, 0, 1, 2, 3])
    assert np.allclose(p.R, np.eye(3)) and np.allclose(p.t, [1, 2, 3])
    assert Pose.from_array([-1.0, 0, 0, 0, 0, 0, 0]).quaternion()[0] == 1.0
    with pytest.raises(ValueError):
        Pose.from_array([0, 0, 0, 0, 0, 0, 0])


@given(poses(), poses())
def test_rotation_stays_orthonormal(x, y):
    R = (x @ y.inverse() @ x).R
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_batched_maps_match_single(rng):
    V = rng.normal(size=(7, 6))
    T = lg.exp(V)
    for v, t in zip(V, T):
        assert np.allclose(t, lg.exp(v))
    assert np.allclose(lg.inverse(T) @ T, np.eye(4), atol=1e-12)
