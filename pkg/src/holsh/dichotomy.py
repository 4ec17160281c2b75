"""Finite-horizon exponential dichotomies, transversality and 1-D products.

Verdicts here are numerical evidence on finite windows, never proofs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import null_space, subspace_angles

from .cocycle import Cocycle, CocycleError, estimate_Q, fit_power_law, op_norms, product_1d
from .maps import SmoothMap

HALVES = ("forward", "backward")
LAMBDA_MAX = 0.95
RESIDUAL_MAX = 0.1
ANGLE_TOL = 1e-6
SIGMA_MIN = 1e-6


class WindowTooShort(ValueError):
    pass


@dataclass
class DichotomySplitting:
    half: str
    indices: np.ndarray
    Es: List[np.ndarray]  # orthonormal bases, shape (m, dim_s)
    Eu: List[np.ndarray]
    C: float
    lam: float
    H: float
    residual: float

    @property
    def dim_s(self) -> int:
        return self.Es[0].shape[1]

    @property
    def dim_u(self) -> int:
        return self.Eu[0].shape[1]

    def at(self, k: int):
        j = int(np.searchsorted(self.indices, k))
        if j >= len(self.indices) or self.indices[j] != k:
            raise KeyError(f"index {k} not covered by the splitting")
        return self.Es[j], self.Eu[j]


def _orth(M: np.ndarray) -> np.ndarray:
    if M.shape[1] == 0:
        return M
    q, _ = np.linalg.qr(M)
    return q


def _half_window(cocycle: Cocycle, half: str):
    """(first index, matrices) of the half-line part of the window, as a
    forward-running cocycle.  The backward half is run through the inverses
    in reversed order, so its stable spaces are the unstable spaces of the
    original cocycle at the mirrored indices."""
    if half == "forward":
        start = max(cocycle.k0, 0)
        if start > cocycle.k1:
            return start, cocycle.matrices[:0]
        return start, cocycle.block(start, cocycle.k1 - start + 1)
    if half == "backward":
        stop = min(cocycle.k1, -1)
        if stop < cocycle.k0:
            return 0, cocycle.matrices[:0]
        mats = cocycle.block(cocycle.k0, stop - cocycle.k0 + 1)
        return 0, np.linalg.inv(mats[::-1])
    raise ValueError(f"half must be one of {HALVES}")


def _growth_fit(mats, bases, T, samples, rng, stable: bool):
    """Fit log worst growth of vectors in the given subspaces: returns (lam, C, residual)."""
    n_idx = len(bases)
    top = max(n_idx - 1 - T, 0)  # keep a basis available for every step
    picks = np.unique(np.linspace(0, top, min(5, top + 1)).astype(int))
    logs = []
    for j in picks:
        B = bases[j]
        for _ in range(samples):
            v = B @ rng.standard_normal(B.shape[1])
            v /= np.linalg.norm(v)
            row = [0.0]
            total = 0.0
            for step in range(T):
                k = j + step
                v = mats[k] @ v
                if k + 1 < n_idx:  # re-project against drift out of the subspace
                    Bn = bases[k + 1]
                    v = Bn @ (Bn.T @ v)
                s = np.linalg.norm(v)
                total += math.log(s)
                v /= s
                row.append(total)
            logs.append(row)
    logs = np.array(logs)
    ls = np.arange(logs.shape[1])
    worst = logs.max(axis=0) if stable else logs.min(axis=0)
    slope, icpt = np.polyfit(ls, worst, 1)
    residual = float(np.sqrt(np.mean((worst - (slope * ls + icpt)) ** 2)))
    if stable:
        lam = math.exp(slope)
        C = float(np.max(np.exp(worst - ls * slope)))
    else:
        lam = math.exp(-slope)
        C = float(np.max(np.exp(ls * slope - worst)))
    return lam, max(C, 1.0), residual


def _projection_bound(Es, Eu) -> float:
    H = 1.0
    for S, U in zip(Es, Eu):
        if S.shape[1] == 0 or U.shape[1] == 0:
            continue
        M = np.hstack([S, U])
        P = M[:, : S.shape[1]] @ np.linalg.inv(M)[: S.shape[1]]
        H = max(H, np.linalg.norm(P, 2), np.linalg.norm(np.eye(len(P)) - P, 2))
    return float(H)


def detect(cocycle: Cocycle, half: str = "forward", T: int = 30, samples: int = 8, seed: int = 0) -> Optional[DichotomySplitting]:
    """Candidate exponential dichotomy on one half of the window, or None.

    Stable spaces come from the trailing right singular vectors of the
    T-step transitions; unstable spaces are the leading ones at the first
    index pushed forward by the cocycle.  (C, lambda) are fitted to the
    worst growth of sampled vectors over T steps.
    """
    start, mats = _half_window(cocycle, half)
    n = len(mats)
    if n < 2 * T:
        raise WindowTooShort(f"{half} half has {n} steps, need at least {2 * T}")
    m = cocycle.dim
    n_idx = n - T + 1
    Es, Eu = [], []
    dim_s = None
    u_basis = None
    for j in range(n_idx):
        Phi = np.eye(m)
        for A in mats[j : j + T]:
            Phi = A @ Phi
        _, sv, vt = np.linalg.svd(Phi)
        ds = int(np.sum(sv ** (1.0 / T) < 1.0))
        if dim_s is None:
            dim_s = ds
            u_basis = vt[: m - ds].T
        elif ds != dim_s:
            return None
        Es.append(vt[m - dim_s :].T if dim_s else np.zeros((m, 0)))
        if j:
            u_basis = _orth(mats[j - 1] @ u_basis)
        Eu.append(u_basis)
    # equivariance of the stable family
    for j in range(n_idx - 1):
        if dim_s:
            img = _orth(mats[j] @ Es[j])
            if np.max(subspace_angles(img, Es[j + 1])) > ANGLE_TOL:
                return None
        M = np.hstack([Es[j], Eu[j]])
        if np.linalg.cond(M) > 1e8:
            return None
    rng = np.random.default_rng(seed)
    lam, C, res = 0.0, 1.0, 0.0
    for stable, bases, dim in ((True, Es, dim_s), (False, Eu, m - dim_s)):
        if dim == 0:
            continue
        l_, c_, r_ = _growth_fit(mats, bases, T, samples, rng, stable)
        lam, C, res = max(lam, l_), max(C, c_), max(res, r_)
    if not (lam < LAMBDA_MAX and res < RESIDUAL_MAX):
        return None
    H = _projection_bound(Es, Eu)
    idx = np.arange(start, start + n_idx)
    if half == "backward":
        # mirror: fibre at position j is E_{-j}; stable for the inverse is unstable here
        Es, Eu = Eu[::-1], Es[::-1]
        idx = -idx[::-1]
    return DichotomySplitting(half, idx, Es, Eu, C, lam, H, res)


@dataclass
class TransversalityReport:
    status: str  # "pass", "fail", "A1 fails"
    angle: float
    defect_dim: int
    sigma_min: float

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def pliss_transversality(split_fwd: Optional[DichotomySplitting], split_bwd: Optional[DichotomySplitting]) -> TransversalityReport:
    """Whether E_0^{s,+} + E_0^{u,-} spans the fibre at index 0."""
    if split_fwd is None or split_bwd is None:
        return TransversalityReport("A1 fails", math.nan, -1, math.nan)
    S, _ = split_fwd.at(0)
    _, U = split_bwd.at(0)
    m = S.shape[0]
    M = np.hstack([S, U])
    sv = np.linalg.svd(M, compute_uv=False) if M.shape[1] else np.zeros(0)
    sigma = float(sv[m - 1]) if len(sv) >= m else 0.0
    rank = int(np.sum(sv > SIGMA_MIN))
    angle = float(np.min(subspace_angles(S, U))) if S.shape[1] and U.shape[1] else math.pi / 2
    ok = sigma > SIGMA_MIN
    return TransversalityReport("pass" if ok else "fail", angle, m - min(rank, m), sigma)


def half_problem(cocycle: Cocycle, half: str):
    """(i, N) of the min-sup problem over one half of the window."""
    if half == "forward":
        i = max(cocycle.k0, 0)
        return i, cocycle.k1 + 1 - i
    i = cocycle.k0
    return i, min(cocycle.k1 + 1, 0) - i


def bounded_solution_check(cocycle: Cocycle, half: str = "forward", trials: int = 8, seed: int = 0) -> float:
    """L_hat: largest min-sup norm found over sampled unit forcings on one half."""
    i, N = half_problem(cocycle, half)
    if N < 1:
        raise WindowTooShort(f"{half} half is empty")
    return estimate_Q(cocycle, i, N, trials, seed).Q_hat


def solution_growth(make_cocycle, N_grid: Sequence[int], trials: int = 8, seed: int = 0) -> Dict[str, object]:
    """L_hat over centred windows [-N, N) and its log-log slope in N."""
    L = [estimate_Q(make_cocycle(N), -N, 2 * N, trials, seed).Q_hat for N in N_grid]
    _, slope, _ = fit_power_law(N_grid, L)
    return {"N": list(N_grid), "L_hat": L, "slope": slope, "bounded": slope < 0.1}


# --------------------------------------------------------------------------
# one-dimensional products


@dataclass
class Trichotomy:
    case: str  # expanding, contracting, mixed, none
    N: int
    i1: Optional[int] = None
    i2: Optional[int] = None
    ordered: Optional[bool] = None
    failing_index: Optional[int] = None


def trichotomy_1d(cocycle: Cocycle, N: int, directions: Optional[np.ndarray] = None) -> Trichotomy:
    """Classify a window by the tests Pi(i, N) > 2 and Pi(i + N, N) < 1/2."""
    if N < 1:
        raise ValueError("N must be >= 1")
    last = cocycle.k1 - 2 * N + 1
    if last < cocycle.k0:
        raise CocycleError(f"window too short for N = {N}")
    if cocycle.dim == 1:
        logs = np.concatenate([[0.0], np.cumsum(np.log(np.abs(cocycle.matrices[:, 0, 0])))])
    else:
        if directions is None:
            raise CocycleError("m > 1 needs a direction at the window start")
        lam = reduce(cocycle, directions, at=cocycle.k0).lam
        logs = np.concatenate([[0.0], np.cumsum(np.log(lam))])

    def log_pi(k, l):
        return logs[k - cocycle.k0 + l] - logs[k - cocycle.k0]

    idx = np.arange(cocycle.k0, last + 1)
    expand = np.array([log_pi(i, N) > math.log(2) for i in idx])
    contract = np.array([log_pi(i + N, N) < -math.log(2) for i in idx])
    neither = ~(expand | contract)
    if neither.any():
        return Trichotomy("none", N, failing_index=int(idx[np.argmax(neither)]))
    if expand.all():
        return Trichotomy("expanding", N)
    if contract.all():
        return Trichotomy("contracting", N)
    exp_only = idx[expand & ~contract]
    con_only = idx[contract & ~expand]
    i1 = int(idx[expand][0])
    i2 = int(idx[contract][-1])
    ordered = bool(exp_only.size == 0 or con_only.size == 0 or exp_only.max() < con_only.min())
    return Trichotomy("mixed", N, i1, i2, ordered and i1 < i2)


def log_growth_function(L: float, gamma: float, N) -> np.ndarray:
    N = np.asarray(N, dtype=float)
    base = L * (2 * N + 1) ** gamma
    return -np.log(base) + (N - 2) * np.log1p(1.0 / base)


def growth_function(L: float, gamma: float, N: int) -> float:
    """G_gamma(N) = (1/b)(1 + 1/b)^(N - 2) with b = L (2N + 1)^gamma."""
    if L <= 0 or gamma <= 0 or N < 2:
        raise ValueError("need L > 0, gamma > 0, N >= 2")
    lg = float(log_growth_function(L, gamma, N))
    return math.exp(lg) if lg < 700 else math.inf


def growth_threshold(L: float, gamma: float, N_max: int = 1_000_000, level: float = 2.0) -> Optional[int]:
    """Smallest N >= 2 with G_gamma(N) > level, or None up to N_max."""
    N = np.arange(2, N_max + 1)
    hit = log_growth_function(L, gamma, N) > math.log(level)
    return int(N[np.argmax(hit)]) if hit.any() else None


# --------------------------------------------------------------------------
# reduction along a direction field


@dataclass
class Reduction:
    k0: int
    e: np.ndarray  # (L + 1, m)
    U: np.ndarray  # (L + 1, m, m - 1)
    lam: np.ndarray  # (L,)
    B: np.ndarray  # (L, m - 1, m - 1)
    D: np.ndarray  # (L, 1, m - 1)

    def split_step(self, j: int, a: float, p: np.ndarray, w: np.ndarray):
        """One step of the recursion in (e, S) coordinates at position j."""
        w_par = float(self.e[j + 1] @ w)
        w_perp = self.U[j + 1].T @ w
        a1 = self.lam[j] * a + float((self.D[j] @ p)[0]) + w_par
        p1 = self.B[j] @ p + w_perp
        return a1, p1


def _complement(e: np.ndarray) -> np.ndarray:
    if len(e) == 2:
        return np.array([[-e[1]], [e[0]]])
    return null_space(e[None, :])


def reduce(cocycle: Cocycle, e0, at: int = 0) -> Reduction:
    """Split the cocycle along e_{k+1} = A_k e_k / |A_k e_k| and its complement."""
    m = cocycle.dim
    e0 = np.asarray(e0, dtype=float).reshape(m)
    if not abs(np.linalg.norm(e0) - 1) < 1e-12:
        raise ValueError("e0 must be a unit vector")
    at = min(max(at, cocycle.k0), cocycle.k1 + 1)
    mats = cocycle.matrices
    Lw = len(mats)
    j0 = at - cocycle.k0
    e = np.empty((Lw + 1, m))
    e[j0] = e0
    for j in range(j0, Lw):
        v = mats[j] @ e[j]
        e[j + 1] = v / np.linalg.norm(v)
    for j in range(j0 - 1, -1, -1):
        v = np.linalg.solve(mats[j], e[j + 1])
        e[j] = v / np.linalg.norm(v)
    lam = np.linalg.norm(np.einsum("kij,kj->ki", mats, e[:-1]), axis=1)
    U = np.stack([_complement(x) for x in e])
    B = np.einsum("kji,kjl,klm->kim", U[1:], mats, U[:-1])
    D = np.einsum("kj,kjl,klm->km", e[1:], mats, U[:-1])[:, None, :]
    return Reduction(cocycle.k0, e, U, lam, B, D)


def reduction_residual(cocycle: Cocycle, red: Reduction, v0, w) -> float:
    """Max gap between the split recursion and the full recursion."""
    v = np.asarray(v0, dtype=float)
    a, p = float(red.e[0] @ v), red.U[0].T @ v
    worst = 0.0
    for j, A in enumerate(cocycle.matrices):
        v = A @ v + w[j]
        a, p = red.split_step(j, a, p, w[j])
        recon = a * red.e[j + 1] + red.U[j + 1] @ p
        worst = max(worst, float(np.max(np.abs(recon - v)) / max(1.0, np.max(np.abs(v)))))
    return worst


def reduction_norm_bounds(red: Reduction) -> Dict[str, float]:
    nb, nbi = op_norms(red.B)
    return {"B": float(nb.max()), "B_inv": float(nbi.max()), "D": float(np.max(np.linalg.norm(red.D, axis=(1, 2))))}


# --------------------------------------------------------------------------
# Property A


@dataclass
class PropertyAReport:
    A1_fwd: bool
    A1_bwd: bool
    A2: bool
    verdict: str  # "hyperbolic-like", "not hyperbolic-like", "inconclusive"
    angle: float = math.nan
    detail: Dict[str, object] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return {"hyperbolic-like": 0, "not hyperbolic-like": 1}.get(self.verdict, 2)


def property_A_check_cocycle(cocycle: Cocycle, T: int = 30) -> PropertyAReport:
    try:
        fwd = detect(cocycle, "forward", T)
        bwd = detect(cocycle, "backward", T)
    except (WindowTooShort, CocycleError, np.linalg.LinAlgError) as exc:
        return PropertyAReport(False, False, False, "inconclusive", detail={"error": str(exc)})
    tr = pliss_transversality(fwd, bwd)
    ok = fwd is not None and bwd is not None and tr.passed
    detail = {"transversality": tr.status, "sigma_min": tr.sigma_min}
    if fwd is not None:
        detail["lambda_fwd"] = fwd.lam
    if bwd is not None:
        detail["lambda_bwd"] = bwd.lam
    return PropertyAReport(
        fwd is not None, bwd is not None, tr.passed, "hyperbolic-like" if ok else "not hyperbolic-like", tr.angle, detail
    )


def property_A_check(fmap: SmoothMap, p0, horizon: int = 100, T: int = 30) -> PropertyAReport:
    """Finite-horizon evidence for (A1) on both halves and (A2) at p0."""
    try:
        cocycle = Cocycle.from_orbit(fmap, p0, -horizon, horizon - 1)
    except (CocycleError, ValueError) as exc:
        return PropertyAReport(False, False, False, "inconclusive", detail={"error": str(exc)})
    return property_A_check_cocycle(cocycle, T)
