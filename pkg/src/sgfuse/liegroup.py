"""SE(3) arithmetic on 4x4 homogeneous matrices.

Conventions used throughout the package:

* Twists are 6-vectors ordered rotation first, ``(wx, wy, wz, vx, vy, vz)``.
* Perturbations act on the right: ``X (+) v = X @ exp(v)``.
* ``boxminus(X, Y) = log(X^-1 Y)``.

Every map has a batched form operating on the trailing axes, so ``exp`` accepts
``(..., 6)`` twists and returns ``(..., 4, 4)`` matrices. The :class:`Pose`
class wraps a single matrix with value semantics.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8
# Below this angle the Jacobian coefficients switch to their Taylor series.
_SERIES_ANGLE = 1e-2
# Within this distance of pi the rotation axis is recovered from the symmetric part.
_NEAR_PI = 1e-3


def hat(w):
    """Skew-symmetric matrix of ``(..., 3)`` vectors."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(W):
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


def _coeffs(theta):
    """Return ``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3`` with series fallbacks."""
    t2 = theta * theta
    small = theta < _SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(
        small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / safe**3
    )
    return a, b, c


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def _canonical_axis(axis):
    # tie-break for the pi ambiguity: first nonzero component positive
    for k in range(3):
        if abs(axis[k]) > 1e-12:
            return axis if axis[k] > 0 else -axis
    return axis


def _log_near_pi(R, theta):
    cos_t = np.cos(theta)
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300) * (1.0 - cos_t))
    axis /= np.linalg.norm(axis)
    s = vee(R - R.T)  # equals 2 sin(theta) * axis
    if np.linalg.norm(s) > 1e-10:
        axis = axis if axis @ s >= 0 else -axis
    else:
        axis = _canonical_axis(axis)
    return theta * axis


def so3_log(R):
    """Principal logarithm. At exactly pi the axis sign follows the canonical tie-break."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_t)
    s = vee(R - np.swapaxes(R, -1, -2))
    small = theta < SMALL_ANGLE
    safe_sin = np.where(small, 1.0, np.sin(theta))
    scale = np.where(small, 0.5, 0.5 * theta / np.where(np.abs(safe_sin) < 1e-300, 1.0, safe_sin))
    w = scale[..., None] * s
    near = np.pi - theta < _NEAR_PI
    if np.any(near):
        w = np.array(w, copy=True)
        flat_R = R.reshape(-1, 3, 3)
        flat_w = w.reshape(-1, 3)
        flat_t = np.broadcast_to(theta, near.shape).reshape(-1)
        for i in np.flatnonzero(near.reshape(-1)):
            flat_w[i] = _log_near_pi(flat_R[i], flat_t[i])
        w = flat_w.reshape(w.shape)
    return w


def left_jacobian_so3(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def left_jacobian_so3_inv(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    small = theta < _SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    # 1/t^2 - cot(t/2) / (2t); stable up to and including t = pi
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / safe**2 - 1.0 / (2.0 * safe * np.tan(0.5 * safe)),
    )
    W = hat(w)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


def exp(v):
    """Exponential map from ``(..., 6)`` twists to ``(..., 4, 4)`` transforms."""
    v = np.asarray(v, dtype=float)
    w, rho = v[..., :3], v[..., 3:]
    out = np.zeros(v.shape[:-1] + (4, 4))
    out[..., :3, :3] = so3_exp(w)
    out[..., :3, 3] = np.einsum("...ij,...j->...i", left_jacobian_so3(w), rho)
    out[..., 3, 3] = 1.0
    return out


def log(T):
    T = np.asarray(T, dtype=float)
    w = so3_log(T[..., :3, :3])
    rho = np.einsum("...ij,...j->...i", left_jacobian_so3_inv(w), T[..., :3, 3])
    return np.concatenate([w, rho], axis=-1)


def inverse(T):
    T = np.asarray(T, dtype=float)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out = np.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def compose(a, b):
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def boxminus(x, y):
    """Tangent-space difference ``log(x^-1 y)``."""
    return log(inverse(x) @ np.asarray(y, dtype=float))


def boxplus(x, v):
    return np.asarray(x, dtype=float) @ exp(v)


def adjoint(T):
    """6x6 adjoint for rotation-first twists: ``T exp(v) = exp(Ad_T v) T``."""
    T = np.asarray(T, dtype=float)
    R, t = T[..., :3, :3], T[..., :3, 3]
    out = np.zeros(T.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def _q_block(w, rho):
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    small = theta < _SERIES_ANGLE
    s = np.where(small, 1.0, theta)
    c1 = np.where(small, 1 / 6 - t2 / 120 + t2**2 / 5040, (s - np.sin(s)) / s**3)
    c2 = np.where(
        small, 1 / 24 - t2 / 720 + t2**2 / 40320, (s * s + 2 * np.cos(s) - 2) / (2 * s**4)
    )
    c3 = np.where(
        small,
        1 / 120 - t2 / 2520 + t2**2 / 120960,
        (2 * s - 3 * np.sin(s) + s * np.cos(s)) / (2 * s**5),
    )
    W, P = hat(w), hat(rho)
    WP, PW = W @ P, P @ W
    WPW = WP @ W
    c1, c2, c3 = (c[..., None, None] for c in (c1, c2, c3))
    return (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (W @ WP + PW @ W - 3 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )


def left_jacobian(v):
    v = np.asarray(v, dtype=float)
    w, rho = v[..., :3], v[..., 3:]
    J = left_jacobian_so3(w)
    out = np.zeros(v.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_block(w, rho)
    return out


def right_jacobian(v):
    return left_jacobian(-np.asarray(v, dtype=float))


def right_jacobian_inv(v):
    """Inverse right Jacobian: ``log(exp(v) exp(d)) ~= v + Jr^-1(v) d``."""
    v = -np.asarray(v, dtype=float)
    w, rho = v[..., :3], v[..., 3:]
    Jinv = left_jacobian_so3_inv(w)
    out = np.zeros(v.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., 3:, :3] = -Jinv @ _q_block(w, rho) @ Jinv
    return out


def check_covariance(sigma, dim=6):
    """Validate an SPD covariance and return it as a float array."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12):
        raise ValueError("covariance is not symmetric")
    if np.min(np.linalg.eigvalsh(sigma)) <= 0.0:
        raise ValueError("covariance is not positive definite")
    return sigma


def mahalanobis_sq(v, sigma):
    """``v^T sigma^-1 v`` for one or many residual vectors."""
    v = np.asarray(v, dtype=float)
    x = np.linalg.solve(np.asarray(sigma, dtype=float), v[..., None])[..., 0]
    return np.einsum("...i,...i->...", v, x)


def chordal_distance(a, b):
    """Frobenius distance between 3x4 blocks of two transforms."""
    d = np.asarray(a, dtype=float)[..., :3, :] - np.asarray(b, dtype=float)[..., :3, :]
    return np.sqrt(np.einsum("...ij,...ij->...", d, d))


def _canonical_quaternion(q):
    nz = np.flatnonzero(q)
    if len(nz) and q[nz[0]] < 0:
        q = -q
    return q


class Pose:
    """Immutable rigid transform.

    ``Pose(R, t)`` maps points from the child frame into the parent frame,
    ``p_parent = R @ p_child + t``.
    """

    __slots__ = ("_m", "_q")

    def __init__(self, rotation=None, translation=None):
        m = np.eye(4)
        if rotation is not None:
            m[:3, :3] = rotation
        if translation is not None:
            m[:3, 3] = translation
        m.flags.writeable = False
        self._m = m
        # quaternion this pose was parsed from; keeps serialization a fixed point
        self._q = None

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def exp(cls, v):
        return cls.from_matrix(exp(v))

    @classmethod
    def from_translation(cls, t):
        return cls(None, t)

    @classmethod
    def from_rotvec(cls, w, t=None):
        return cls(so3_exp(w), t)

    @classmethod
    def from_array(cls, values):
        """Build from seven numbers ``(qw, qx, qy, qz, tx, ty, tz)``."""
        qw, qx, qy, qz, tx, ty, tz = (float(x) for x in values)
        q = np.array([qw, qx, qy, qz])
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("degenerate quaternion")
        if abs(n - 1.0) > 1e-15:
            q = q / n
        q = _canonical_quaternion(q)
        pose = cls(Rotation.from_quat(q[[1, 2, 3, 0]]).as_matrix(), (tx, ty, tz))
        q.flags.writeable = False
        pose._q = q
        return pose

    @property
    def matrix(self):
        return self._m

    @property
    def R(self):
        return self._m[:3, :3]

    @property
    def t(self):
        return self._m[:3, 3]

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose.from_matrix(self._m @ other._m)
        pts = np.asarray(other, dtype=float)
        return pts @ self.R.T + self.t

    def transform_points(self, pts):
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def inverse(self):
        return Pose.from_matrix(inverse(self._m))

    def log(self):
        return log(self._m)

    def boxplus(self, v):
        return Pose.from_matrix(self._m @ exp(v))

    def boxminus(self, other):
        """``log(self^-1 other)``."""
        return boxminus(self._m, other._m)

    def adjoint(self):
        return adjoint(self._m)

    def quaternion(self):
        """Unit quaternion ``(qw, qx, qy, qz)`` with ``qw >= 0``."""
        if self._q is not None:
            return self._q.copy()
        qx, qy, qz, qw = Rotation.from_matrix(self.R).as_quat()
        q = np.array([qw, qx, qy, qz])
        return _canonical_quaternion(q / np.linalg.norm(q))

    def to_array(self):
        return np.concatenate([self.quaternion(), self.t])

    def rotation_angle(self):
        return float(np.linalg.norm(so3_log(self.R)))

    def allclose(self, other, atol=1e-9):
        return bool(np.allclose(self._m, other._m, rtol=0.0, atol=atol))

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self._m, other._m)

    def __hash__(self):
        return hash(self._m.tobytes())

    def __repr__(self):
        q = self.quaternion()
        return (
            f"Pose(q=[{q[0]:.6g}, {q[1]:.6g}, {q[2]:.6g}, {q[3]:.6g}], "
            f"t=[{self.t[0]:.6g}, {self.t[1]:.6g}, {self.t[2]:.6g}])"
        )


def stack(poses):
    return np.stack([p.matrix for p in poses]) if poses else np.zeros((0, 4, 4))
