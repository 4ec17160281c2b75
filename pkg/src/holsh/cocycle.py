"""Linear cocycles and the inhomogeneous min-sup problem.

For a window of invertible matrices A_k the forced recursion

    v_{k+1} = A_k v_k + w_{k+1},   k = i, ..., i + N - 1,

has an m-dimensional family of solutions fixed by v_i.  ``F`` is the least
sup-norm over that family and ``Q`` the largest ``F`` over forcings with
``|w_k| <= 1``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
import scipy.sparse as sps
from scipy import stats
from scipy.sparse.linalg import splu

from .maps import SmoothMap

log = logging.getLogger(__name__)


class CocycleError(ValueError):
    pass


def op_norms(mats: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Operator norms of each matrix and of its inverse."""
    sv = np.linalg.svd(mats, compute_uv=False)
    with np.errstate(divide="ignore"):
        return sv[..., 0], 1.0 / sv[..., -1]


@dataclass(frozen=True)
class Cocycle:
    """Matrices A_k for k in [k0, k0 + len - 1] with ||A_k||, ||A_k^-1|| < R."""

    matrices: np.ndarray
    k0: int = 0
    R: Optional[float] = None

    def __post_init__(self):
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2] or len(mats) == 0:
            raise CocycleError("matrices must have shape (L, m, m) with L >= 1")
        norm, inv_norm = op_norms(mats)
        if not np.all(np.isfinite(inv_norm)):
            raise CocycleError("singular matrix in cocycle")
        bound = float(max(norm.max(), inv_norm.max()))
        R = 1.1 * bound if self.R is None else float(self.R)
        if not R > bound:
            raise CocycleError(f"R = {R} does not exceed the norm bound {bound}")
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "R", R)

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    @property
    def k1(self) -> int:
        return self.k0 + len(self.matrices) - 1

    def A(self, k: int) -> np.ndarray:
        return self.matrices[self._pos(k)]

    def _pos(self, k: int) -> int:
        if not self.k0 <= k <= self.k1:
            raise CocycleError(f"index {k} outside window [{self.k0}, {self.k1}]")
        return k - self.k0

    def block(self, i: int, N: int) -> np.ndarray:
        """A_i, ..., A_{i+N-1}."""
        if N < 0:
            raise CocycleError("N must be >= 0")
        if N == 0:
            return self.matrices[:0]
        self._pos(i)
        self._pos(i + N - 1)
        return self.matrices[i - self.k0 : i - self.k0 + N]

    @classmethod
    def constant(cls, A, length: int, k0: int = 0) -> "Cocycle":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(np.repeat(A[None], length, axis=0), k0)

    @classmethod
    def from_orbit(cls, fmap: SmoothMap, p0, k0: int, k1: int) -> "Cocycle":
        """A_k = Df(p_k) along the orbit with p_0 = p0, for k in [k0, k1]."""
        if k1 < k0:
            raise CocycleError("empty window")
        p0 = np.asarray(p0, dtype=float).reshape(fmap.dim)
        fwd = fmap.orbit(p0, max(k1, 0))
        pts = fwd[max(k0, 0) : k1 + 1]
        if k0 < 0:
            back = fmap.orbit(p0, k0)[::-1]  # p_{k0}, ..., p_0
            pts = np.concatenate([back[:-1][: min(k1, -1) - k0 + 1], pts])
        mats = fmap.derivative(pts)
        cond = np.linalg.cond(mats)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            raise CocycleError("numerically singular derivative along the orbit")
        return cls(mats, k0)

    def save(self, path) -> None:
        m = self.dim
        with open(path, "w") as fh:
            fh.write(f"{m} {self.k0} {self.k1} {self.R!r}\n")
            for A in self.matrices:
                fh.write(" ".join(repr(float(x)) for x in A.reshape(-1)) + "\n")

    @classmethod
    def load(cls, path) -> "Cocycle":
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        if not lines or len(lines[0]) != 4:
            raise CocycleError("header must read 'm k0 k1 R'")
        m, k0, k1 = (int(x) for x in lines[0][:3])
        R = float(lines[0][3])
        rows = lines[1:]
        if len(rows) != k1 - k0 + 1 or any(len(r) != m * m for r in rows):
            raise CocycleError("matrix count or size does not match the header")
        mats = np.array([[float(x) for x in r] for r in rows]).reshape(-1, m, m)
        return cls(mats, k0, R)


def transition(cocycle: Cocycle, k: int, l: int) -> np.ndarray:
    """A_{k+l-1} ... A_k (identity for l = 0)."""
    out = np.eye(cocycle.dim)
    for A in cocycle.block(k, l):
        out = A @ out
    return out


def product_1d(cocycle: Cocycle, k: int, l: int, e: Optional[np.ndarray] = None) -> float:
    """Pi(k, l): product of |A_j e_j| along normalised directions e_j."""
    if cocycle.dim == 1 and e is None:
        return float(np.prod(np.abs(cocycle.block(k, l)[:, 0, 0])))
    if e is None:
        raise CocycleError("product_1d needs a direction when m > 1")
    e = np.asarray(e, dtype=float) / np.linalg.norm(e)
    out = 1.0
    for A in cocycle.block(k, l):
        v = A @ e
        s = np.linalg.norm(v)
        out *= s
        e = v / s
    return out


# --------------------------------------------------------------------------
# min-sup problem


@dataclass
class InhomogeneousProblem:
    cocycle: Cocycle
    i: int
    N: int
    w: np.ndarray  # (N, m): w_{i+1}, ..., w_{i+N}
    w_max: float = math.inf

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(self.N, self.cocycle.dim)
        if self.N < 1:
            raise CocycleError("N must be >= 1")
        self.cocycle.block(self.i, self.N)
        if np.any(np.linalg.norm(self.w, axis=1) > self.w_max * (1 + 1e-12)):
            raise CocycleError("forcing exceeds the stated bound")

    @property
    def mats(self) -> np.ndarray:
        return self.cocycle.block(self.i, self.N)


@dataclass
class MinSupSolution:
    v: np.ndarray  # (N + 1, m): v_i, ..., v_{i+N}
    F: float
    v0: np.ndarray
    duals: Optional[np.ndarray] = field(default=None, repr=False)


def propagate(mats: np.ndarray, w: np.ndarray, v0) -> np.ndarray:
    v = np.empty((len(mats) + 1, mats.shape[1]))
    v[0] = v0
    for k, A in enumerate(mats):
        v[k + 1] = A @ v[k] + w[k]
    return v


def recursion_residual(mats: np.ndarray, w: np.ndarray, v: np.ndarray) -> float:
    return float(np.max(np.abs(v[1:] - np.einsum("kij,kj->ki", mats, v[:-1]) - w))) if len(mats) else 0.0


def _scalar_affine(mats: np.ndarray, w: np.ndarray):
    """Solutions v_k = P_k z + c_k with z the value at the pivot index.

    The pivot is where the cumulative gain |a_i ... a_{k-1}| peaks, so every
    |P_k| <= 1 and neither direction of propagation amplifies rounding.
    """
    a = mats[:, 0, 0]
    logs = np.concatenate([[0.0], np.cumsum(np.log(np.abs(a)))])
    j = int(np.argmax(logs))
    n = len(a)
    P = np.empty(n + 1)
    c = np.empty(n + 1)
    P[j], c[j] = 1.0, 0.0
    for k in range(j, n):
        P[k + 1] = a[k] * P[k]
        c[k + 1] = a[k] * c[k] + w[k, 0]
    for k in range(j - 1, -1, -1):
        P[k] = P[k + 1] / a[k]
        c[k] = (c[k + 1] - w[k, 0]) / a[k]
    return P, c, j


def _golden_min(fn, lo: float, hi: float, iters: int = 200, tol: float = 1e-15):
    g = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        if hi - lo <= tol * max(1.0, abs(lo), abs(hi)):
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - g * (hi - lo)
            f1 = fn(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + g * (hi - lo)
            f2 = fn(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def _solve_scalar(problem: InhomogeneousProblem) -> MinSupSolution:
    P, c, j = _scalar_affine(problem.mats, problem.w)
    top = float(np.max(np.abs(c)))
    if top == 0.0:
        v = np.zeros((problem.N + 1, 1))
        return MinSupSolution(v, 0.0, v[0])

    def obj(z):
        return float(np.max(np.abs(P * z + c)))

    # the optimum satisfies |z| = |v_j| <= F <= obj(0) = top
    z, _ = _golden_min(obj, -top, top)
    v = (P * z + c)[:, None]
    return MinSupSolution(v, float(np.max(np.abs(v))), v[0])


_PROGRAMS: Dict[Tuple[int, int], tuple] = {}


def _program(N: int, m: int):
    key = (N, m)
    if key not in _PROGRAMS:
        V = cp.Variable((N + 1, m))
        A = [cp.Parameter((m, m)) for _ in range(N)]
        W = cp.Parameter((N, m))
        t = cp.Variable()
        cons = [V[k + 1] - A[k] @ V[k] == W[k] for k in range(N)]
        norms = [cp.norm(V[k]) <= t for k in range(N + 1)]
        prob = cp.Problem(cp.Minimize(t), cons + norms)
        _PROGRAMS[key] = (prob, V, A, W, cons)
    return _PROGRAMS[key]


def _recursion_matrix(mats: np.ndarray):
    n, m = mats.shape[0], mats.shape[1]
    rows = np.arange(n * m)
    r = np.repeat(np.arange(n), m * m) * m + np.tile(np.repeat(np.arange(m), m), n)
    c = np.repeat(np.arange(n), m * m) * m + np.tile(np.tile(np.arange(m), m), n)
    return sps.csr_matrix(
        (np.concatenate([-mats.reshape(-1), np.ones(n * m)]), (np.concatenate([r, rows]), np.concatenate([c, rows + m]))),
        shape=(n * m, (n + 1) * m),
    )


def project_onto_recursion(mats: np.ndarray, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Closest sequence (Euclidean) that satisfies the recursion exactly."""
    J = _recursion_matrix(mats)
    out = v.reshape(-1).copy()
    lu = splu((J @ J.T).tocsc())
    for _ in range(3):
        res = J @ out - w.reshape(-1)
        out -= J.T @ lu.solve(res)
    return out.reshape(v.shape)


def _solve_conic(problem: InhomogeneousProblem, duals: bool = False) -> MinSupSolution:
    mats, w = problem.mats, problem.w
    N, m = mats.shape[0], mats.shape[1]
    prob, V, A, W, cons = _program(N, m)
    for k in range(N):
        A[k].value = mats[k]
    W.value = w
    with warnings.catch_warnings():
        # the projection below restores the recursion exactly
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11, max_iter=500)
    if V.value is None:
        raise CocycleError(f"conic solver failed with status {prob.status}")
    v = project_onto_recursion(mats, w, V.value)
    lam = np.array([c.dual_value for c in cons]) if duals else None
    return MinSupSolution(v, float(np.max(np.linalg.norm(v, axis=1))), v[0], lam)


def solve_min_sup(problem: InhomogeneousProblem) -> MinSupSolution:
    """Minimise max_k |v_k| over solutions of the forced recursion.

    m = 1 uses golden-section search on the convex piecewise-linear objective;
    m >= 2 solves the sequence-space second-order cone program and projects
    the result exactly onto the recursion.
    """
    if not np.any(problem.w):
        v = np.zeros((problem.N + 1, problem.cocycle.dim))
        return MinSupSolution(v, 0.0, v[0])
    if problem.cocycle.dim == 1:
        return _solve_scalar(problem)
    return _solve_conic(problem)


def brute_force_F_oracle(problem: InhomogeneousProblem, grid: int = 21, rel_width: float = 1e-14) -> float:
    """Independent grid-zoom evaluation of F over v_i in a box (m <= 2).

    The box has radius R^N max|w| N, which contains the minimiser.  Each zoom
    keeps the two grid cells around the best point; for m = 2 the inner
    coordinate is minimised by the same zoom for each outer grid point,
    which is valid because partial minimisation preserves convexity.
    """
    m, N = problem.cocycle.dim, problem.N
    if m > 2:
        raise CocycleError("oracle supports m <= 2")
    mats, w = problem.mats, problem.w
    wmax = float(np.max(np.linalg.norm(w, axis=1)))
    if wmax == 0:
        return 0.0
    # v_k = T_k v_i + c_k
    T = np.empty((N + 1, m, m))
    c = np.empty((N + 1, m))
    T[0], c[0] = np.eye(m), 0.0
    for k in range(N):
        T[k + 1] = mats[k] @ T[k]
        c[k + 1] = mats[k] @ c[k] + w[k]
    radius = min(problem.cocycle.R ** N * wmax * N, 1e300)

    def objective(pts):  # pts (..., m)
        v = np.einsum("kij,...j->...ki", T, pts) + c
        return np.max(np.linalg.norm(v, axis=-1), axis=-1)

    def zoom(fn, lo, hi):
        # lo, hi: (B,) arrays; fn maps (B, G) -> (B, G)
        best_x = 0.5 * (lo + hi)
        best_f = fn(best_x[:, None])[:, 0]
        t = np.linspace(0.0, 1.0, grid)
        for _ in range(400):
            x = lo[:, None] + (hi - lo)[:, None] * t
            f = fn(x)
            j = np.argmin(f, axis=1)
            rows = np.arange(len(lo))
            better = f[rows, j] < best_f
            best_f = np.where(better, f[rows, j], best_f)
            best_x = np.where(better, x[rows, j], best_x)
            lo = x[rows, np.maximum(j - 1, 0)]
            hi = x[rows, np.minimum(j + 1, grid - 1)]
            if np.all(hi - lo <= rel_width * np.maximum(1.0, np.abs(best_x))):
                break
        return best_x, best_f

    if m == 1:
        _, f = zoom(lambda x: objective(x[..., None]), np.array([-radius]), np.array([radius]))
        return float(f[0])

    def outer(x1):  # x1 (1, G) -> (1, G)
        flat = x1.reshape(-1)
        lo = np.full(flat.shape, -radius)
        hi = np.full(flat.shape, radius)

        def inner(x2):  # (G, G2)
            pts = np.stack(np.broadcast_arrays(flat[:, None], x2), axis=-1)
            return objective(pts)

        _, f = zoom(inner, lo, hi)
        return f.reshape(x1.shape)

    _, f = zoom(outer, np.array([-radius]), np.array([radius]))
    return float(f[0])


# --------------------------------------------------------------------------
# Q and slow growth


@dataclass
class QEstimate:
    Q_hat: float
    w_best: np.ndarray
    evaluations: int
    is_lower_bound: bool = True


def _unit_rows(x: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 1e-14, x / np.where(n > 0, n, 1), fallback)


def _climb(problem_for, w: np.ndarray, max_steps: int):
    """Ascent on the convex function w -> F using dual certificates."""
    sol = problem_for(w)
    best, evals = sol.F, 1
    for _ in range(max_steps):
        cand = _unit_rows(sol.duals, w)
        if np.allclose(cand, w) or np.allclose(cand, -w):
            break
        s2 = problem_for(cand)
        evals += 1
        if s2.F <= best * (1 + 1e-12):
            break
        w, sol, best = cand, s2, s2.F
    return w, best, evals


def estimate_Q(cocycle: Cocycle, i: int, N: int, samples: int = 16, seed: int = 0, climb_steps: int = 6) -> QEstimate:
    """Sampled lower bound on Q(i, N) = max over |w_k| <= 1 of F(i, N, w).

    F is convex and even in w, so its maximum over the product of balls is
    attained at unit forcings.  Starts: constant unit vectors along each
    axis, alternating signs, and random unit sequences; each is improved by
    replacing w with the normalised dual multipliers of the min-sup problem
    (a supergradient step of the convex function) while F increases.
    """
    m = cocycle.dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, i - cocycle.k0, N]))
    starts: List[np.ndarray] = []
    for j in range(m):
        e = np.zeros((N, m))
        e[:, j] = 1.0
        starts.append(e)
        alt = e * ((-1.0) ** np.arange(N))[:, None]
        starts.append(alt)
    for _ in range(samples):
        g = rng.standard_normal((N, m))
        starts.append(g / np.linalg.norm(g, axis=1, keepdims=True))

    def problem_for(w):
        prob = InhomogeneousProblem(cocycle, i, N, w)
        if m == 1:
            sol = _solve_scalar(prob)
            sol.duals = _scalar_duals(prob, sol)
            return sol
        return _solve_conic(prob, duals=True)

    best, best_w, evals = -1.0, starts[0], 0
    for w0 in starts:
        w, F, e = _climb(problem_for, w0, climb_steps)
        evals += e
        if F > best:
            best, best_w = F, w
    return QEstimate(float(best), best_w, evals)


def _scalar_duals(problem: InhomogeneousProblem, sol: MinSupSolution) -> np.ndarray:
    """Supergradient of F with respect to w for m = 1.

    At the optimum two active indices with opposite-sign slopes (or one
    index whose slope vanishes) certify optimality; F is locally the convex
    combination of those two signed affine pieces, and each piece is linear
    in w with coefficients obtained by differentiating the recursion.
    """
    mats, w = problem.mats, problem.w
    P, c, j = _scalar_affine(mats, w)
    v = sol.v[:, 0]
    F = sol.F
    if F == 0:
        return np.ones_like(w)
    active = np.flatnonzero(np.abs(np.abs(v) - F) <= 1e-9 * max(F, 1e-300))
    slope = np.sign(v[active]) * P[active]
    pos, neg = active[slope > 0], active[slope < 0]
    zero = active[slope == 0]
    if zero.size:
        weights = {int(zero[0]): 1.0}
    elif pos.size and neg.size:
        kp, kn = int(pos[0]), int(neg[0])
        sp_, sn = np.sign(v[kp]) * P[kp], np.sign(v[kn]) * P[kn]
        weights = {kp: -sn / (sp_ - sn), kn: sp_ / (sp_ - sn)}
    else:
        weights = {int(active[0]): 1.0}
    # d c_k / d w_l for the pivot parameterisation, combined with weights
    a = mats[:, 0, 0]
    g = np.zeros(len(w))
    for k, mu in weights.items():
        s = np.sign(v[k])
        if k > j:  # c_k = sum_{l=j}^{k-1} a_{k-1}..a_{l+1} w_l
            coef = 1.0
            for l in range(k - 1, j - 1, -1):
                g[l] += mu * s * coef
                coef *= a[l]
        elif k < j:  # c_k = -sum_{l=k}^{j-1} w_l / (a_k..a_l)
            coef = 1.0
            for l in range(k, j):
                coef /= a[l]
                g[l] -= mu * s * coef
    return g[:, None]


@dataclass
class SlowGrowthFit:
    N: np.ndarray
    Q_hat: np.ndarray
    L: float
    gamma: float
    residual: float

    @property
    def regime(self) -> str:
        if self.gamma < 0.2:
            return "bounded-solution regime"
        if self.gamma <= 0.9:
            return "sublinear"
        return "linear or worse"


def fit_power_law(N: Sequence[float], Q: Sequence[float]) -> Tuple[float, float, float]:
    N, Q = np.asarray(N, float), np.asarray(Q, float)
    if np.any(Q <= 0):
        raise CocycleError("all Q estimates must be positive to fit a power law")
    reg = stats.linregress(np.log(N), np.log(Q))
    resid = np.log(Q) - (reg.intercept + reg.slope * np.log(N))
    return float(math.exp(reg.intercept)), float(reg.slope), float(np.sqrt(np.mean(resid ** 2)))


def fit_slow_growth(cocycle: Cocycle, N_grid: Sequence[int], samples: int = 16, seed: int = 0, i: Optional[int] = None) -> SlowGrowthFit:
    """Fit Q_hat(N) ~ L N^gamma over a grid of window lengths starting at ``i``."""
    N_grid = [int(n) for n in N_grid]
    if len(N_grid) < 4:
        raise CocycleError("N grid needs at least 4 points")
    i = cocycle.k0 if i is None else i
    Q = np.array([estimate_Q(cocycle, i, n, samples, seed).Q_hat for n in N_grid])
    L, gamma, res = fit_power_law(N_grid, Q)
    return SlowGrowthFit(np.array(N_grid), Q, L, gamma, res)
