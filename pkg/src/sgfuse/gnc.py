"""Graduated non-convexity with a truncated least squares cost.

A :class:`RobustProblem` is a set of variables (``Pose`` or 1-D numpy vectors)
and vectorized factor groups. Each factor has a fixed square-root information
matrix and is either robust (subject to TLS weighting) or always trusted.

``solve_weighted`` is the inner Gauss-Newton solver; ``solve_gnc`` anneals the
TLS surrogate around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.stats import chi2

from . import liegroup as lg
from .liegroup import Pose

_DENSE_LIMIT = 240
_LAMBDA0 = 1e-6
_LAMBDA_MAX = 1e10


class RankDeficientError(np.linalg.LinAlgError):
    """Normal equations have no information on some free variables."""

    def __init__(self, variables):
        self.variables = sorted(int(v) for v in variables)
        super().__init__(f"no information on variables {self.variables}")


@dataclass
class GncConfig:
    inlier_threshold: float | None = None
    """Largest whitened residual norm accepted as inlier; ``None`` uses the chi-square quantile."""
    mu_update_factor: float = 1.4
    max_outer_iterations: int = 100
    max_inner_iterations: int = 20
    inner_tolerance: float = 1e-8
    weight_tolerance: float = 1e-3
    chi2_quantile: float = 0.99

    def __post_init__(self):
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not self.mu_update_factor > 1:
            raise ValueError("mu_update_factor must exceed 1")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ValueError("iteration caps must be positive")
        if not 0 < self.chi2_quantile < 1:
            raise ValueError("chi2_quantile must lie in (0, 1)")

    def threshold(self, dim: int) -> float:
        if self.inlier_threshold is not None:
            return float(self.inlier_threshold)
        return float(np.sqrt(chi2.ppf(self.chi2_quantile, dim)))


def sqrt_information(covariance=None, information=None):
    """Upper factor ``L`` with ``L^T L = covariance^-1``."""
    if information is None:
        information = np.linalg.inv(np.asarray(covariance, dtype=float))
    info = np.asarray(information, dtype=float)
    return np.linalg.cholesky(0.5 * (info + info.T)).T


def _batch_sqrt_info(sqrt_info, m, dim):
    L = np.asarray(sqrt_info, dtype=float)
    if L.ndim == 1:
        L = np.diag(L)
    if L.ndim == 2:
        L = np.broadcast_to(L, (m, dim, dim))
    if L.shape != (m, dim, dim):
        raise ValueError(f"sqrt_info shape {L.shape} does not match {m} residuals of dim {dim}")
    return np.ascontiguousarray(L)


class _State:
    """Solver-internal variable storage: stacked pose matrices plus vector list."""

    def __init__(self, values, is_pose):
        self.is_pose = is_pose
        self.T = np.tile(np.eye(4), (len(values), 1, 1))
        self.x = [None] * len(values)
        for i, v in enumerate(values):
            if is_pose[i]:
                self.T[i] = v.matrix
            else:
                self.x[i] = np.array(v, dtype=float).reshape(-1)

    def copy(self):
        s = _State.__new__(_State)
        s.is_pose = self.is_pose
        s.T = self.T.copy()
        s.x = [None if v is None else v.copy() for v in self.x]
        return s

    def values(self):
        return [
            Pose.from_matrix(self.T[i]) if self.is_pose[i] else self.x[i].copy()
            for i in range(len(self.x))
        ]


class FactorGroup:
    """Vectorized set of same-shaped factors."""

    arity = 1
    dim = 6
    pose_slots = (True,)

    def __init__(self, keys, sqrt_info, robust):
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1, self.arity)
        m = len(self.keys)
        self.sqrt_info = _batch_sqrt_info(sqrt_info, m, self.dim)
        self.robust = np.broadcast_to(np.asarray(robust, dtype=bool), (m,)).copy()

    def __len__(self):
        return len(self.keys)

    def slot_dims(self):
        return (self.dim,) * self.arity

    def error(self, state) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, state):
        raise NotImplementedError


class PoseBetween(FactorGroup):
    """Relative pose factors ``r = log(E^-1 Ti^-1 Tj)``."""

    arity = 2
    pose_slots = (True, True)

    def __init__(self, keys, measured, sqrt_info, robust=False):
        super().__init__(keys, sqrt_info, robust)
        self.measured_inv = lg.inverse(np.asarray(measured, dtype=float).reshape(-1, 4, 4))

    def _relative(self, state):
        Ti = state.T[self.keys[:, 0]]
        Tj = state.T[self.keys[:, 1]]
        M = lg.inverse(Ti) @ Tj
        return M, self.measured_inv @ M

    def error(self, state):
        return lg.log(self._relative(state)[1])

    def linearize(self, state):
        M, Z = self._relative(state)
        r = lg.log(Z)
        Jr_inv = lg.right_jacobian_inv(r)
        Ji = -Jr_inv @ lg.adjoint(lg.inverse(M))
        return r, [Ji, Jr_inv]


class PosePrior(FactorGroup):
    """Unary pose factors ``r = log(E^-1 Ti)``."""

    def __init__(self, keys, measured, sqrt_info, robust=False):
        super().__init__(keys, sqrt_info, robust)
        self.measured_inv = lg.inverse(np.asarray(measured, dtype=float).reshape(-1, 4, 4))

    def error(self, state):
        return lg.log(self.measured_inv @ state.T[self.keys[:, 0]])

    def linearize(self, state):
        r = self.error(state)
        return r, [lg.right_jacobian_inv(r)]


class VectorPrior(FactorGroup):
    """Unary Euclidean factors ``r = x_i - m``."""

    pose_slots = (False,)

    def __init__(self, keys, measured, sqrt_info, robust=False):
        measured = np.asarray(measured, dtype=float)
        measured = measured.reshape(len(measured), -1)
        self.dim = measured.shape[1]
        super().__init__(keys, sqrt_info, robust)
        self.measured = measured

    def error(self, state):
        x = np.stack([state.x[k] for k in self.keys[:, 0]])
        return x - self.measured

    def linearize(self, state):
        J = np.broadcast_to(np.eye(self.dim), (len(self), self.dim, self.dim))
        return self.error(state), [J]


class VectorBetween(FactorGroup):
    """Binary Euclidean factors ``r = x_j - x_i - m``."""

    arity = 2
    pose_slots = (False, False)

    def __init__(self, keys, measured, sqrt_info, robust=False):
        measured = np.asarray(measured, dtype=float)
        measured = measured.reshape(len(measured), -1)
        self.dim = measured.shape[1]
        super().__init__(keys, sqrt_info, robust)
        self.measured = measured

    def error(self, state):
        xi = np.stack([state.x[k] for k in self.keys[:, 0]])
        xj = np.stack([state.x[k] for k in self.keys[:, 1]])
        return xj - xi - self.measured

    def linearize(self, state):
        eye = np.broadcast_to(np.eye(self.dim), (len(self), self.dim, self.dim))
        return self.error(state), [-eye, eye]


class RobustProblem:
    """Variables, factor groups and the set of variables held fixed (gauge anchors)."""

    def __init__(self, values, groups, fixed=()):
        self.values = list(values)
        self.groups = [g for g in groups if len(g)]
        self.fixed = frozenset(int(f) for f in fixed)
        self.is_pose = [isinstance(v, Pose) for v in self.values]
        self.tangent_dims = [
            6 if p else int(np.asarray(v).size) for v, p in zip(self.values, self.is_pose)
        ]
        n = len(self.values)
        for g in self.groups:
            if g.keys.size and (g.keys.min() < 0 or g.keys.max() >= n):
                raise ValueError("factor references a nonexistent variable")
            for s in range(g.arity):
                for k in np.unique(g.keys[:, s]):
                    if self.is_pose[k] != g.pose_slots[s]:
                        raise ValueError(f"variable {k} has the wrong kind for {type(g).__name__}")
                    if not self.is_pose[k] and self.tangent_dims[k] != g.dim:
                        raise ValueError(f"variable {k} dimension does not match its factor")
        self.offsets = np.full(n, -1, dtype=np.int64)
        off = 0
        for i in range(n):
            if i not in self.fixed:
                self.offsets[i] = off
                off += self.tangent_dims[i]
        self.n_dims = off
        self.robust = (
            np.concatenate([g.robust for g in self.groups]) if self.groups else np.zeros(0, bool)
        )
        self.factor_dims = (
            np.concatenate([np.full(len(g), g.dim) for g in self.groups])
            if self.groups
            else np.zeros(0, int)
        )

    @property
    def n_factors(self):
        return len(self.robust)

    def _state(self, values=None):
        return _State(self.values if values is None else values, self.is_pose)

    def squared_errors(self, values=None, state=None) -> np.ndarray:
        """Whitened squared residual norm of every factor."""
        state = state if state is not None else self._state(values)
        out = []
        for g in self.groups:
            e = np.einsum("mij,mj->mi", g.sqrt_info, g.error(state))
            out.append(np.einsum("mi,mi->m", e, e))
        return np.concatenate(out) if out else np.zeros(0)

    def cost(self, weights, values=None, state=None) -> float:
        return float(np.dot(weights, self.squared_errors(values, state)))

    def _retract(self, state, delta, active):
        new = state.copy()
        poses = [i for i in active if self.is_pose[i]]
        if poses:
            idx = np.array(poses)
            d = np.stack([delta[self.offsets[i] : self.offsets[i] + 6] for i in poses])
            new.T[idx] = state.T[idx] @ lg.exp(d)
        for i in active:
            if not self.is_pose[i]:
                o = self.offsets[i]
                new.x[i] = state.x[i] + delta[o : o + self.tangent_dims[i]]
        return new

    def _normal_equations(self, state, weights):
        rows, cols, data = [], [], []
        grad = np.zeros(self.n_dims)
        start = 0
        cost = 0.0
        for g in self.groups:
            w = weights[start : start + len(g)]
            start += len(g)
            r, jacs = g.linearize(state)
            e = np.einsum("mij,mj->mi", g.sqrt_info, r)
            cost += float(np.dot(w, np.einsum("mi,mi->m", e, e)))
            Jw = [np.einsum("mij,mjk->mik", g.sqrt_info, J) for J in jacs]
            offs = [self.offsets[g.keys[:, s]] for s in range(g.arity)]
            for s in range(g.arity):
                ds = Jw[s].shape[2]
                free_s = offs[s] >= 0
                if not free_s.any():
                    continue
                gs = np.einsum("m,mik,mi->mk", w, Jw[s], e)
                idx = offs[s][free_s, None] + np.arange(ds)
                np.add.at(grad, idx.ravel(), gs[free_s].ravel())
                for t in range(g.arity):
                    dt = Jw[t].shape[2]
                    free = free_s & (offs[t] >= 0)
                    if not free.any():
                        continue
                    blk = np.einsum("m,mik,mil->mkl", w[free], Jw[s][free], Jw[t][free])
                    ri = offs[s][free, None, None] + np.arange(ds)[None, :, None]
                    ci = offs[t][free, None, None] + np.arange(dt)[None, None, :]
                    rows.append(np.broadcast_to(ri, blk.shape).ravel())
                    cols.append(np.broadcast_to(ci, blk.shape).ravel())
                    data.append(blk.ravel())
        if self.n_dims <= _DENSE_LIMIT:
            H = np.zeros((self.n_dims, self.n_dims))
            if data:
                np.add.at(H, (np.concatenate(rows), np.concatenate(cols)), np.concatenate(data))
        elif data:
            H = scipy.sparse.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n_dims, self.n_dims),
            ).tocsc()
        else:
            H = scipy.sparse.csc_matrix((self.n_dims, self.n_dims))
        return H, grad, cost

    def zero_information(self, H, tol=0.0):
        diag = H.diagonal()
        out = []
        for i in range(len(self.values)):
            o = self.offsets[i]
            if o >= 0 and np.all(np.abs(diag[o : o + self.tangent_dims[i]]) <= tol):
                out.append(i)
        return out


def _pin_diagonal(H, idx):
    if isinstance(H, np.ndarray):
        H = H.copy()
        H[idx, idx] = 1.0
        return H
    H = H.tolil()
    for k in idx:
        H[k, k] = 1.0
    return H.tocsc()


def _solve_linear(H, rhs, lam):
    n = H.shape[0]
    if n <= _DENSE_LIMIT:
        A = H.copy() if isinstance(H, np.ndarray) else H.toarray()
        if lam:
            A[np.diag_indices(n)] += lam
        try:
            c = scipy.linalg.cho_factor(A, check_finite=True)
        except np.linalg.LinAlgError:
            return None
        x = scipy.linalg.cho_solve(c, rhs)
    else:
        A = H + lam * scipy.sparse.identity(n, format="csc") if lam else H
        try:
            x = scipy.sparse.linalg.splu(A.tocsc(), permc_spec="COLAMD").solve(rhs)
        except RuntimeError:
            return None
    if not np.all(np.isfinite(x)):
        return None
    return x


@dataclass
class WeightedSolution:
    values: list
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    held: list = field(default_factory=list)
    state: object = None


def solve_weighted(problem: RobustProblem, weights, config: GncConfig | None = None, values=None,
                   hold_uninformed=False, _state=None) -> WeightedSolution:
    """Gauss-Newton on the manifold minimizing ``sum_i w_i |r_i|^2``.

    Steps that fail to factor or that raise the cost are retried with
    Levenberg damping starting at 1e-6 and growing tenfold. Free variables
    that receive no information raise :class:`RankDeficientError` unless
    ``hold_uninformed`` is set, in which case they are left unchanged.
    """
    config = config or GncConfig()
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (problem.n_factors,):
        raise ValueError("one weight per factor required")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("weights must lie in [0, 1]")
    state = _state.copy() if _state is not None else problem._state(values)
    initial_cost = None
    cost = None
    held: list[int] = []
    converged = False
    it = 0
    for it in range(1, config.max_inner_iterations + 1):
        H, g, cost = problem._normal_equations(state, weights)
        if initial_cost is None:
            initial_cost = cost
            held = problem.zero_information(H)
            if held and not hold_uninformed:
                raise RankDeficientError(held)
        if held:
            # pin uninformed variables with a unit diagonal so the system is solvable
            H = _pin_diagonal(H, [problem.offsets[i] + k for i in held
                                  for k in range(problem.tangent_dims[i])])
        if problem.n_dims == 0:
            converged = True
            break
        lam = 0.0
        accepted = False
        while True:
            delta = _solve_linear(H, -g, lam)
            if delta is not None:
                for i in held:
                    o = problem.offsets[i]
                    delta[o : o + problem.tangent_dims[i]] = 0.0
                step = float(np.linalg.norm(delta))
                if step < config.inner_tolerance:
                    converged = True
                    if step > 0:
                        cand = problem._retract(state, delta, _active(problem))
                        if problem.cost(weights, state=cand) <= cost:
                            state = cand
                    break
                cand = problem._retract(state, delta, _active(problem))
                new_cost = problem.cost(weights, state=cand)
                if new_cost <= cost:
                    state = cand
                    accepted = True
                    break
            lam = _LAMBDA0 if lam == 0.0 else lam * 10.0
            if lam > _LAMBDA_MAX:
                converged = True
                break
        if converged or not accepted:
            break
    final_cost = problem.cost(weights, state=state)
    if initial_cost is None:
        initial_cost = final_cost
    return WeightedSolution(state.values(), it, initial_cost, final_cost, converged, held, state)


def _active(problem):
    return [i for i in range(len(problem.values)) if problem.offsets[i] >= 0]


def tls_weights(ratio_sq, mu):
    """Closed-form TLS weight update for normalized squared residuals ``r^2 / eps^2``."""
    s = np.asarray(ratio_sq, dtype=float)
    w = np.empty_like(s)
    lo = mu / (mu + 1.0)
    hi = (mu + 1.0) / mu
    inner = s <= lo
    outer = s >= hi
    mid = ~(inner | outer)
    w[inner] = 1.0
    w[outer] = 0.0
    w[mid] = np.sqrt(mu * (mu + 1.0) / s[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def tls_cost(ratio_sq):
    return np.minimum(np.asarray(ratio_sq, dtype=float), 1.0)


@dataclass
class GncStep:
    mu: float
    weight_min: float
    weight_max: float
    cost_before: float
    cost_after: float


@dataclass
class GncResult:
    values: list
    weights: np.ndarray
    inlier_mask: np.ndarray
    converged: bool
    iterations: int
    no_inliers: bool
    squared_errors: np.ndarray
    thresholds: np.ndarray
    history: list = field(default_factory=list)

    @property
    def robust_inliers(self):
        return int(np.count_nonzero(self.inlier_mask))


def solve_gnc(problem: RobustProblem, config: GncConfig | None = None) -> GncResult:
    """Anneal the TLS surrogate from the problem's initial values.

    ``mu`` starts at ``eps^2 / (2 r_max^2 - eps^2)`` computed at the
    least-squares solution with every weight 1, and grows by
    ``mu_update_factor`` until every robust weight is within
    ``weight_tolerance`` of the TLS indicator ``r <= eps``. Trusted factors
    keep weight 1.
    """
    config = config or GncConfig()
    if problem.n_factors == 0:
        raise ValueError("problem has no residuals")
    robust = problem.robust
    by_dim = {d: config.threshold(d) for d in set(problem.factor_dims)}
    eps = np.array([by_dim[d] for d in problem.factor_dims])
    eps2 = eps**2
    state = problem._state()
    weights = np.ones(problem.n_factors)
    history: list[GncStep] = []

    def finish(state, weights, converged, iterations):
        r2 = problem.squared_errors(state=state)
        mask = (weights > 0.5) & robust
        no_inliers = bool(robust.any() and not mask.any())
        return GncResult(
            state.values(), weights, mask, converged, iterations, no_inliers, r2, eps, history
        )

    # the schedule starts from the non-robust least-squares solution
    sol = solve_weighted(problem, weights, config, hold_uninformed=True, _state=state)
    history.append(GncStep(np.inf, 1.0, 1.0, sol.initial_cost, sol.final_cost))
    state = sol.state
    ratio = problem.squared_errors(state=state) / eps2
    if not robust.any() or ratio[robust].max() <= 1.0:
        return finish(state, weights, True, 1)

    mu = 1.0 / (2.0 * ratio[robust].max() - 1.0)
    weights[robust] = tls_weights(ratio[robust], mu)
    converged = False
    it = 0
    for it in range(1, config.max_outer_iterations + 1):
        if not weights.any():
            break
        sol = solve_weighted(problem, weights, config, hold_uninformed=True, _state=state)
        history.append(
            GncStep(mu, float(weights[robust].min()), float(weights[robust].max()),
                    sol.initial_cost, sol.final_cost)
        )
        state = sol.state
        ratio = problem.squared_errors(state=state) / eps2
        mu *= config.mu_update_factor
        weights[robust] = tls_weights(ratio[robust], mu)
        # binary, agreeing with the truncation decision at the current residuals, and
        # not merely the all-small weights of a still-convex surrogate
        target = (ratio[robust] <= 1.0).astype(float)
        settled = mu >= 1.0 or np.any(weights[robust] >= 1.0 - config.weight_tolerance)
        if settled and np.all(np.abs(weights[robust] - target) <= config.weight_tolerance):
            converged = True
            break
    if weights.any():
        sol = solve_weighted(problem, weights, config, hold_uninformed=True, _state=state)
        history.append(
            GncStep(mu, float(weights[robust].min()), float(weights[robust].max()),
                    sol.initial_cost, sol.final_cost)
        )
        state = sol.state
    return finish(state, weights, converged, it)
