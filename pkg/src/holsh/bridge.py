"""Passing between cocycle solutions and pseudotrajectories along an orbit."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cocycle import Cocycle, InhomogeneousProblem, fit_slow_growth, solve_min_sup
from .maps import SmoothMap
from .pseudo import Pseudotrajectory, defects


class PreconditionError(ValueError):
    pass


class ChartDomainError(ValueError):
    pass


def rounding_allowance(scale: float, steps: int = 1) -> float:
    """Slack for floating-point evaluation of a bound at coordinate ``scale``."""
    return 64 * np.finfo(float).eps * max(1.0, scale) * max(1, steps)


def _coordinate_scale(fmap: SmoothMap, pts) -> float:
    return 1.0 if fmap.space.periodic else float(np.max(np.abs(pts)))


@dataclass
class LiftedPseudo:
    base: np.ndarray  # p_k
    v: np.ndarray
    w: np.ndarray  # w_{k+1} = v_{k+1} - A_k v_k
    d: float
    traj: Pseudotrajectory
    defect: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.defect <= self.bound


def lift_solution_to_pseudo(fmap: SmoothMap, p0, v, d: float, w_tol: float = 1e-9) -> LiftedPseudo:
    """y_k = exp_{p_k}(d v_k) along the orbit of p0; one-step defects are at most (S + 2) d.

    ``v`` must solve v_{k+1} = Df(p_k) v_k + w_{k+1} with |w_k| <= 1.
    """
    v = np.asarray(v, dtype=float).reshape(-1, fmap.dim)
    N = len(v) - 1
    vmax = float(np.max(np.linalg.norm(v, axis=1)))
    if not d > 0:
        raise PreconditionError("d must be positive")
    if d * vmax >= min(fmap.injectivity_radius, fmap.c2_radius):
        raise PreconditionError("d max|v| must stay inside the chart and the quadratic-bound radius")
    if (d * vmax) ** 2 >= d:
        raise PreconditionError("(d max|v|)^2 must be below d")
    p = fmap.orbit(p0, N)
    A = fmap.derivative(p[:-1])
    w = v[1:] - np.einsum("kij,kj->ki", A, v[:-1])
    if np.any(np.linalg.norm(w, axis=1) > 1 + w_tol):
        raise PreconditionError("v does not come from a forcing with |w_k| <= 1")
    y = fmap.space.exp(p, d * v)
    traj = Pseudotrajectory(y, (fmap.c2_bound + 2) * d, fmap.space)
    defect = float(np.max(defects(fmap, y))) if N else 0.0
    bound = (fmap.c2_bound + 2) * d + rounding_allowance(_coordinate_scale(fmap, p))
    return LiftedPseudo(p, v, w, d, traj, defect, bound)


@dataclass
class ResidualTrace:
    c: np.ndarray
    t: np.ndarray
    max_residual: float
    bound: np.ndarray  # 2 S |c_k|^2 plus rounding slack, per step
    ok: bool


def shadow_to_cocycle_residual(fmap: SmoothMap, base, orbit, orbit_tol: float = 1e-12) -> ResidualTrace:
    """c_k = log_{p_k}(x_k) and t_k = c_{k+1} - Df(p_k) c_k, checked against 2 S |c_k|^2."""
    p = np.asarray(base, dtype=float).reshape(-1, fmap.dim)
    x = np.asarray(orbit, dtype=float).reshape(p.shape)
    if not np.all(np.isfinite(x)):
        raise ChartDomainError("shadow orbit escaped to infinity")
    scale = _coordinate_scale(fmap, np.concatenate([p, x]))
    for name, seq in (("base", p), ("shadow", x)):
        if len(seq) > 1 and np.max(defects(fmap, seq)) > orbit_tol * max(1.0, scale):
            raise PreconditionError(f"{name} sequence is not an exact orbit")
    c = fmap.space.log(p, x)
    size = np.linalg.norm(c, axis=1)
    A = fmap.derivative(p[:-1])
    lin = np.einsum("kij,kj->ki", A, c[:-1])
    # the linear prediction must also sit inside the chart at p_{k+1}
    reach = np.linalg.norm(lin, axis=1) + fmap.c2_bound * size[:-1] ** 2
    if np.any(size >= min(fmap.injectivity_radius, fmap.c2_radius)) or np.any(reach >= fmap.injectivity_radius):
        raise ChartDomainError("orbits separate beyond the chart radius")
    t = c[1:] - lin
    tn = np.linalg.norm(t, axis=1)
    # x_{k+1} and p_{k+1} are stored after independent rounding
    bound = 2 * fmap.c2_bound * size[:-1] ** 2 + rounding_allowance(scale, 4)
    return ResidualTrace(c, t, float(tn.max()) if len(tn) else 0.0, bound, bool(np.all(tn <= bound)))


def round_trip_gap(fmap: SmoothMap, lifted: LiftedPseudo) -> float:
    """max_k |(c_{k+1} - A_k c_k)/d - w_{k+1}| with c_k = log_{p_k}(y_k)."""
    c = fmap.space.log(lifted.base, lifted.traj.points)
    A = fmap.derivative(lifted.base[:-1])
    t = c[1:] - np.einsum("kij,kj->ki", A, c[:-1])
    return float(np.max(np.linalg.norm(t / lifted.d - lifted.w, axis=1))) if len(t) else 0.0


# --------------------------------------------------------------------------
# randomized checks


@dataclass
class BridgeCheck:
    map: str
    runs: int
    lift_violations: int
    residual_violations: int
    worst_lift_ratio: float  # defect / ((S + 2) d)
    worst_residual_ratio: float  # |t_k| / (2 S |c_k|^2 + rounding slack)


def _start(fmap: SmoothMap, rng, d: float):
    if fmap.sample_start is not None:
        return np.asarray(fmap.sample_start(rng, d), dtype=float).reshape(fmap.dim)
    return fmap.space.wrap(rng.uniform(-0.5, 0.5, fmap.dim))


def random_lift(fmap: SmoothMap, rng: np.random.Generator, N_range=(2, 24), d_range=(1e-9, 1e-3)) -> LiftedPseudo:
    """Lift the min-sup solution of a random unit-bounded forcing along a random orbit."""
    N = int(rng.integers(N_range[0], N_range[1] + 1))
    d = math.exp(rng.uniform(math.log(d_range[0]), math.log(d_range[1])))
    p0 = _start(fmap, rng, d)
    cocycle = Cocycle.from_orbit(fmap, p0, 0, N - 1)
    w = rng.standard_normal((N, fmap.dim))
    w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1.0) * rng.uniform(1.0, 2.0, (N, 1))
    v = solve_min_sup(InhomogeneousProblem(cocycle, 0, N, w)).v
    vmax = float(np.max(np.linalg.norm(v, axis=1)))
    # shrink d until the lift preconditions hold
    cap = min(fmap.injectivity_radius, fmap.c2_radius)
    while d * vmax >= 0.5 * cap or d * vmax * vmax >= 0.5:
        d /= 4
    return lift_solution_to_pseudo(fmap, p0, v, d)


def random_residual(fmap: SmoothMap, rng: np.random.Generator, N: int = 20) -> ResidualTrace:
    """Residual trace of a random nearby exact orbit, shrinking the offset to stay in the chart."""
    p0 = _start(fmap, rng, 1e-6)
    base = fmap.orbit(p0, N)
    direction = rng.standard_normal(fmap.dim)
    direction /= np.linalg.norm(direction)
    r = min(fmap.injectivity_radius, fmap.c2_radius) * 10 ** rng.uniform(-7, -1)
    for _ in range(200):
        with np.errstate(over="ignore", invalid="ignore"):
            x = fmap.orbit(fmap.space.exp(p0, r * direction), N)
        try:
            return shadow_to_cocycle_residual(fmap, base, x)
        except ChartDomainError:
            r /= 2
    raise ChartDomainError("could not keep the orbits within the chart")


def randomized_bridge_check(fmap: SmoothMap, runs: int, seed: int) -> BridgeCheck:
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(fmap.name.encode())]))
    lv = rv = 0
    wl = wr = 0.0
    for _ in range(runs):
        lift = random_lift(fmap, rng)
        lv += int(not lift.ok)
        wl = max(wl, lift.defect / ((fmap.c2_bound + 2) * lift.d))
        res = random_residual(fmap, rng)
        rv += int(not res.ok)
        if len(res.t):
            wr = max(wr, float(np.max(np.linalg.norm(res.t, axis=1) / res.bound)))
    return BridgeCheck(fmap.name, runs, lv, rv, wl, wr)


# --------------------------------------------------------------------------
# growth along orbits


def sublinear_growth_experiment(
    fmap: SmoothMap, starts: Sequence, N_grid: Sequence[int], samples: int = 8, seed: int = 0
) -> List[Dict[str, object]]:
    """Rows map, orbit_id, N, Q_hat, gamma_hat: slow-growth fits along sampled orbits."""
    rows = []
    for oid, p0 in enumerate(starts):
        cocycle = Cocycle.from_orbit(fmap, p0, 0, max(N_grid) - 1)
        fit = fit_slow_growth(cocycle, N_grid, samples, seed)
        for N, Q in zip(fit.N, fit.Q_hat):
            rows.append({"map": fmap.name, "orbit_id": oid, "N": int(N), "Q_hat": float(Q), "gamma_hat": fit.gamma})
    return rows
