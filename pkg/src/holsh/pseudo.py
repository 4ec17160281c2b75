"""Pseudotrajectories, optimal shadowing and empirical Hoelder exponents."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sps
from scipy import stats
from scipy.optimize import minimize
from scipy.sparse.linalg import splu

from .maps import CircleExampleParams, SmoothMap, Space, local_coordinate

log = logging.getLogger(__name__)

NOISE_KINDS = ("none", "uniform", "adversarial")


class DivergenceError(RuntimeError):
    """A candidate orbit left the bounding box of a planar map."""


@dataclass(frozen=True)
class NoiseModel:
    """How each step of a pseudotrajectory departs from the exact image.

    ``uniform``: a uniform draw from the open ball of radius ``d``.
    ``adversarial``: the step opposes the dynamics, moving ``f(y_k)`` back
    towards ``y_k`` by ``0.9 d``, or all the way to ``y_k`` when that is
    closer.  On the circle this pushes away from the attracting fixed point
    and freezes the sequence wherever ``dist(y, f(y)) <= 0.9 d``.
    """

    kind: str = "none"
    d: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and not self.d > 0:
            raise ValueError("noise needs d > 0")


@dataclass
class Pseudotrajectory:
    points: np.ndarray  # (n + 1, m)
    d: float
    space: Space
    k0: int = 0

    @property
    def n(self) -> int:
        return len(self.points) - 1


@dataclass
class Validation:
    ok: bool
    max_defect: float


@dataclass
class ShadowingResult:
    x0: np.ndarray
    epsilon: float
    per_step: np.ndarray
    solver: str
    status: str = "ok"
    iterations: int = 0


def _ball(rng, shape, m, radius):
    """Uniform samples from the open ball of the given radius (per row)."""
    g = rng.standard_normal(shape + (m,))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    r = np.asarray(radius)[..., None] * rng.random(shape + (1,)) ** (1.0 / m)
    return g * r * (1 - 1e-12)


def perturb(fmap: SmoothMap, prev, image, kind: str, d, rng) -> np.ndarray:
    """Next pseudotrajectory point from the exact image of ``prev``."""
    sp = fmap.space
    if kind == "none":
        return image
    if kind == "uniform":
        return sp.exp(image, _ball(rng, image.shape[:-1], fmap.dim, d))
    back = sp.log(image, prev)
    size = np.linalg.norm(back, axis=-1, keepdims=True)
    push = 0.9 * np.asarray(d)[..., None] if np.ndim(d) else 0.9 * d
    hold = size <= push
    step = np.where(hold, 0.0, back / np.where(size > 0, size, 1.0) * push)
    return np.where(hold, prev, sp.exp(image, step))


def generate_batch(fmap: SmoothMap, starts, n: int, noise: NoiseModel, rng=None, d=None) -> np.ndarray:
    """Pseudotrajectories for a batch of starts; returns shape (B, n + 1, m).

    ``d`` may be an array of per-trajectory defect levels overriding ``noise.d``.
    """
    rng = np.random.default_rng(noise.seed) if rng is None else rng
    starts = fmap.space.wrap(np.atleast_2d(np.asarray(starts, dtype=float)))
    level = noise.d if d is None else np.asarray(d, dtype=float)
    out = np.empty((starts.shape[0], n + 1, fmap.dim))
    out[:, 0] = starts
    y = starts
    for k in range(n):
        y = perturb(fmap, y, fmap(y), noise.kind, level, rng)
        out[:, k + 1] = y
    return out


def generate(fmap: SmoothMap, start, n: int, noise: NoiseModel, rng=None) -> Pseudotrajectory:
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = generate_batch(fmap, start, n, noise, rng)[0]
    return Pseudotrajectory(pts, noise.d if noise.kind != "none" else 0.0, fmap.space)


def defects(fmap: SmoothMap, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return fmap.space.dist(pts[..., 1:, :], fmap(pts[..., :-1, :]))


def validate(fmap: SmoothMap, traj: Pseudotrajectory, d: float) -> Validation:
    worst = float(np.max(defects(fmap, traj.points))) if traj.n else 0.0
    return Validation(worst < d, worst)


# --------------------------------------------------------------------------
# shadowing


def _sup_distance(fmap: SmoothMap, x0, ys, box: float) -> np.ndarray:
    """max_k dist(f^k(x0), y_k) for candidates x0 (B, C, m) and ys (B, n+1, m)."""
    sp = fmap.space
    x = sp.wrap(x0)
    eps = sp.dist(x, ys[:, None, 0])
    for k in range(1, ys.shape[1]):
        x = fmap(x)
        if not sp.periodic and not np.all(np.abs(x) <= box):
            raise DivergenceError(f"candidate orbit left the box |x| <= {box}")
        eps = np.maximum(eps, sp.dist(x, ys[:, None, k]))
    return eps


def _per_step_batch(fmap: SmoothMap, x0, ys) -> np.ndarray:
    x = fmap.space.wrap(np.asarray(x0, dtype=float))
    out = np.empty(ys.shape[:2])
    for k in range(ys.shape[1]):
        if k:
            x = fmap(x)
        out[:, k] = fmap.space.dist(x, ys[:, k])
    return out


def orbit_distances(fmap: SmoothMap, x0, ys) -> np.ndarray:
    x = fmap.space.wrap(np.asarray(x0, dtype=float))
    out = np.empty(len(ys))
    for k in range(len(ys)):
        if k:
            x = fmap(x)
        out[k] = fmap.space.dist(x, ys[k])
    return out


def _optimize_1d(
    fmap: SmoothMap,
    ys: np.ndarray,
    scan: Optional[int] = None,
    keep: int = 4,
    zoom: int = 9,
    abs_tol: float = 1e-11,
    rel_tol: float = 1e-5,
    box: float = 1e3,
):
    """Batch minimisation of x0 -> max_k dist(f^k x0, y_k) for 1-D maps.

    A uniform scan over the bracket ``|x0 - y0| <= eps(y0)`` (which must
    contain the minimiser) seeds up to ``keep`` local-minimum brackets per
    trajectory; each is then zoomed by repeated ``zoom``-point grids.
    """
    B, n1, _ = ys.shape
    if scan is None:
        scan = int(np.clip(4e6 / (n1 * B), 33, 10_000))
    y0 = ys[:, 0, 0]
    radius = _sup_distance(fmap, ys[:, None, 0], ys, box)[:, 0]
    radius = np.minimum(radius, fmap.injectivity_radius)
    offs = np.linspace(-1.0, 1.0, scan | 1)
    cand = y0[:, None] + offs[None, :] * radius[:, None]
    eps = _sup_distance(fmap, cand[..., None], ys, box)

    best_x = cand[np.arange(B), np.argmin(eps, axis=1)]
    best_e = np.min(eps, axis=1)
    padded = np.pad(eps, ((0, 0), (1, 1)), constant_values=np.inf)
    is_min = (eps <= padded[:, :-2]) & (eps <= padded[:, 2:])
    score = np.where(is_min, eps, np.inf)
    order = np.argsort(score, axis=1, kind="stable")[:, :keep]
    j_lo = np.clip(order - 1, 0, len(offs) - 1)
    j_hi = np.clip(order + 1, 0, len(offs) - 1)
    rows = np.arange(B)[:, None]
    lo, hi = cand[rows, j_lo], cand[rows, j_hi]
    live = np.isfinite(np.take_along_axis(score, order, axis=1)) & (radius[:, None] > 0)

    t = np.linspace(0.0, 1.0, zoom)
    for _ in range(200):
        if not np.any(live):
            break
        pts = lo[..., None] + (hi - lo)[..., None] * t
        vals = _sup_distance(fmap, pts.reshape(B, -1, 1), ys, box).reshape(pts.shape)
        vals = np.where(live[..., None], vals, np.inf)
        j = np.argmin(vals, axis=-1)
        vmin = np.take_along_axis(vals, j[..., None], axis=-1)[..., 0]
        xmin = np.take_along_axis(pts, j[..., None], axis=-1)[..., 0]
        better = vmin < best_e[:, None]
        if np.any(better):
            k = np.argmin(np.where(better, vmin, np.inf), axis=1)
            upd = np.any(better, axis=1)
            best_e = np.where(upd, vmin[np.arange(B), k], best_e)
            best_x = np.where(upd, xmin[np.arange(B), k], best_x)
        spread = np.max(np.where(np.isfinite(vals), vals, -np.inf), axis=-1) - vmin
        width = hi - lo
        new_lo = np.take_along_axis(pts, np.clip(j - 1, 0, zoom - 1)[..., None], axis=-1)[..., 0]
        new_hi = np.take_along_axis(pts, np.clip(j + 1, 0, zoom - 1)[..., None], axis=-1)[..., 0]
        lo, hi = new_lo, new_hi
        done = (spread <= abs_tol + rel_tol * vmin) | (width <= 1e-15 * (1 + np.abs(xmin)))
        live &= ~done
    return fmap.space.wrap(best_x[:, None]), best_e


def _arc_offset(sp: Space, a, c):
    """Offset of ``a`` from ``c`` in the chart centred at ``c``."""
    off = a - c
    return off - np.round(off) if sp.periodic else off


def _feasible(fmap: SmoothMap, ys: np.ndarray, eps: np.ndarray, box: float):
    """Whether some exact orbit stays within ``eps`` (B, E) of each trajectory.

    For an increasing 1-D homeomorphism the set of admissible points at time
    k is an arc: the image of the previous arc intersected with the ball
    about y_k.  Returns the feasibility mask (B, E).
    """
    sp = fmap.space
    c = ys[:, None, 0, 0]
    lo, width = c - eps, 2 * eps
    alive = np.ones(eps.shape, dtype=bool)
    for k in range(1, ys.shape[1]):
        a = fmap(np.stack([lo, lo + width], axis=-1)[..., None])[..., 0]
        fa, fb = a[..., 0], a[..., 1]
        if not sp.periodic and not np.all(np.abs(a[alive]) <= box):
            raise DivergenceError(f"candidate orbit left the box |x| <= {box}")
        span = fb - fa
        if sp.periodic:
            span = np.mod(span, 1.0)
        ck = ys[:, None, k, 0]
        o = _arc_offset(sp, fa, ck)
        l1, h1 = np.maximum(o, -eps), np.minimum(o + span, eps)
        if sp.periodic:
            l2, h2 = np.maximum(o - 1, -eps), np.minimum(o - 1 + span, eps)
            first = h1 >= l1
            l1, h1 = np.where(first, l1, l2), np.where(first, h1, h2)
        alive &= h1 >= l1
        lo, width = ck + l1, np.maximum(h1 - l1, 0.0)
    return alive


def _exit_side(fmap: SmoothMap, ys: np.ndarray, x0: np.ndarray, eps: np.ndarray):
    """-1 / +1 if the orbit of x0 (B, C) first leaves its ball below / above, 0 if never."""
    sp = fmap.space
    side = np.zeros(x0.shape, dtype=int)
    x = x0
    for k in range(ys.shape[1]):
        if k:
            x = fmap(x[..., None])[..., 0]
        o = _arc_offset(sp, x, ys[:, None, k, 0])
        side = np.where(side == 0, np.where(o > eps, 1, np.where(o < -eps, -1, 0)), side)
    return side


def _interval_1d(fmap: SmoothMap, ys: np.ndarray, box: float = 1e3, fan: int = 16, rel_tol: float = 1e-4):
    """Globally optimal x0 for increasing 1-D homeomorphisms (batched)."""
    B = ys.shape[0]
    hi = _sup_distance(fmap, ys[:, None, 0], ys, box)[:, 0]
    hi = np.minimum(hi, 0.24 if fmap.space.periodic else np.inf)
    lo = np.zeros(B)
    t = np.arange(1, fan + 1) / (fan + 1)
    while np.any(hi - lo > 1e-11 + rel_tol * hi):
        eps = lo[:, None] + (hi - lo)[:, None] * t
        ok = _feasible(fmap, ys, eps, box)
        first = np.where(ok.any(axis=1), np.argmax(ok, axis=1), fan)
        new_hi = np.where(first < fan, eps[np.arange(B), np.minimum(first, fan - 1)], hi)
        new_lo = np.where(first > 0, eps[np.arange(B), np.maximum(first - 1, 0)], lo)
        lo, hi = new_lo, new_hi
    target = hi * (1 + 4 * rel_tol) + 1e-13
    # the feasible starts form an arc inside the first ball; locate it by exit sides
    a, b = -target, target
    y0 = ys[:, 0, 0]
    best = y0.copy()
    found = np.zeros(B, dtype=bool)
    for _ in range(16):
        cand = y0[:, None] + a[:, None] + (b - a)[:, None] * t
        side = _exit_side(fmap, ys, cand, target[:, None])
        hit = side == 0
        j = np.argmax(hit, axis=1)
        newly = hit.any(axis=1) & ~found
        best = np.where(newly, cand[np.arange(B), j], best)
        found |= newly
        if found.all():
            break
        below = np.sum(side < 0, axis=1)  # sides are monotone: -1 ... 0 ... +1
        a_new = np.where(below > 0, cand[np.arange(B), np.maximum(below - 1, 0)] - y0, a)
        b_new = np.where(below < fan, cand[np.arange(B), np.minimum(below, fan - 1)] - y0, b)
        a, b = np.where(found, a, a_new), np.where(found, b, b_new)
    return fmap.space.wrap(best[:, None]), hi


def _optimize_nd(fmap: SmoothMap, ys: np.ndarray, starts: int = 32, seed: int = 0, box: float = 1e3):
    ys_b = ys[None]

    def objective(x):
        return float(_sup_distance(fmap, x[None, None, :], ys_b, box)[0, 0])

    # orbits pinned to y_k at time k are natural seeds on expanding maps
    seeds = [ys[0]]
    if fmap.inverse is not None:
        for k in np.unique(np.linspace(1, len(ys) - 1, min(len(ys) - 1, starts // 2)).astype(int)):
            with np.errstate(over="ignore", invalid="ignore"):
                seed_pt = fmap.orbit(ys[k], -int(k))[-1]
            if fmap.space.periodic or np.all(np.abs(seed_pt) <= box):
                seeds.append(seed_pt)
    if fmap.inverse is not None and len(ys) > 2:
        # on long hyperbolic windows every single pullback is off by lambda^(n/2);
        # a converged Newton orbit is the only seed that is already close
        refined = shadow_newton(fmap, Pseudotrajectory(ys, 0.0, fmap.space), box=box, fallback_limit=-1)
        if refined.status == "ok":
            seeds.append(refined.x0)
    scored = sorted((objective(x), i) for i, x in enumerate(seeds))
    best_e, best_x = scored[0][0], seeds[scored[0][1]]
    rng = np.random.default_rng(seed)
    radius = min(best_e, fmap.injectivity_radius)
    inits = [seeds[i] for _, i in scored[:4]]
    inits += [best_x + v for v in _ball(rng, (max(starts - len(inits), 0),), fmap.dim, radius)]
    for x_init in inits:
        size = max(min(objective(x_init), fmap.injectivity_radius), 1e-12)
        simplex = np.vstack([x_init, x_init + size * np.eye(fmap.dim)])
        res = minimize(
            objective,
            x_init,
            method="Nelder-Mead",
            options={"xatol": 1e-14, "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000, "initial_simplex": simplex},
        )
        if res.fun < best_e:
            best_x, best_e = res.x, float(res.fun)
    return fmap.space.wrap(best_x), best_e


@numba.njit(cache=True)
def _offset_nb(a, c, periodic):
    o = a - c
    if periodic:
        o -= math.floor(o + 0.5)
    return o


@numba.njit
def _feasible_nb(kern, consts, y, eps, periodic, box):
    # 1 feasible, 0 infeasible, -1 left the box
    lo = y[0] - eps
    width = 2 * eps
    for k in range(1, y.shape[0]):
        fa = kern(lo, consts)
        fb = kern(lo + width, consts)
        if not periodic and (abs(fa) > box or abs(fb) > box):
            return -1
        span = fb - fa
        if periodic:
            span -= math.floor(span)
        o = _offset_nb(fa, y[k], periodic)
        lo_k = max(o, -eps)
        hi_k = min(o + span, eps)
        if periodic and hi_k < lo_k:
            lo_k = max(o - 1, -eps)
            hi_k = min(o - 1 + span, eps)
        if hi_k < lo_k:
            return 0
        lo = y[k] + lo_k
        width = hi_k - lo_k
    return 1


@numba.njit
def _exit_side_nb(kern, consts, y, x0, eps, periodic):
    x = x0
    for k in range(y.shape[0]):
        if k:
            x = kern(x, consts)
        o = _offset_nb(x, y[k], periodic)
        if o > eps:
            return 1
        if o < -eps:
            return -1
    return 0


@numba.njit
def _interval_nb(kern, consts, y, hi, periodic, box, abs_tol, rel_tol):
    # returns (x0, epsilon bound, status) with status 0 ok, 1 diverged
    lo = 0.0
    while hi - lo > abs_tol + rel_tol * hi:
        mid = 0.5 * (lo + hi)
        r = _feasible_nb(kern, consts, y, mid, periodic, box)
        if r < 0:
            return y[0], hi, 1
        if r == 1:
            hi = mid
        else:
            lo = mid
    target = hi * (1 + 4 * rel_tol) + abs_tol
    a = y[0] - target
    b = y[0] + target
    x0 = y[0]
    for _ in range(200):
        x0 = 0.5 * (a + b)
        side = _exit_side_nb(kern, consts, y, x0, target, periodic)
        if side == 0:
            break
        if side < 0:
            a = x0
        else:
            b = x0
    return x0, hi, 0


def _interval_compiled(fmap: SmoothMap, ys: np.ndarray, box: float = 1e3, abs_tol=1e-12, rel_tol=1e-7):
    kern, consts = fmap.kernel
    periodic = fmap.space.periodic
    hi = _sup_distance(fmap, ys[:, None, 0], ys, box)[:, 0]
    if periodic:
        hi = np.minimum(hi, 0.24)
    x0 = np.empty(len(ys))
    for b in range(len(ys)):
        x0[b], _, status = _interval_nb(
            kern, consts, np.ascontiguousarray(ys[b, :, 0]), float(hi[b]), periodic, box, abs_tol, rel_tol
        )
        if status:
            raise DivergenceError(f"candidate orbit left the box |x| <= {box}")
    return fmap.space.wrap(x0[:, None])


def is_increasing_homeomorphism(fmap: SmoothMap, samples: int = 257) -> bool:
    if fmap.dim != 1 or fmap.inverse is None:
        return False
    if fmap.space.periodic:
        pts = (np.arange(samples) + 0.5)[:, None] / samples
    else:
        pts = np.linspace(-1.0, 1.0, samples)[:, None]
    return bool(np.all(fmap.derivative(pts) > 0))


def _solve_1d(fmap: SmoothMap, ys: np.ndarray, box: float, method: str = "auto", **kw):
    if method == "auto":
        method = "interval" if is_increasing_homeomorphism(fmap) else "scan"
        if method == "interval" and fmap.kernel is not None:
            method = "compiled"
    if method == "compiled":
        return _interval_compiled(fmap, ys, box=box, **kw), "optimal-interval"
    if method == "interval":
        return _interval_1d(fmap, ys, box=box, **kw)[0], "optimal-interval"
    return _optimize_1d(fmap, ys, box=box, **kw)[0], "optimal-scan"


def shadow_optimal(fmap: SmoothMap, traj: Pseudotrajectory, box: float = 1e3, **kw) -> ShadowingResult:
    """Exact orbit (approximately) minimising the sup distance to ``traj``.

    Increasing 1-D homeomorphisms are solved exactly up to a relative
    tolerance by bisection on epsilon with arc propagation; other 1-D maps
    use a scan of the only bracket that can contain the minimiser followed
    by grid zooming.  Higher dimensions use 32-start Nelder-Mead, which is
    only meaningful on short windows.
    """
    ys = np.asarray(traj.points, dtype=float)
    if fmap.dim == 1:
        x0, label = _solve_1d(fmap, ys[None], box, **kw)
        x0 = x0[0]
    else:
        x0, _ = _optimize_nd(fmap, ys, box=box, **kw)
        label = "optimal-multistart"
    per = orbit_distances(fmap, x0, ys)
    return ShadowingResult(x0, float(per.max()), per, label)


def shadow_optimal_batch(fmap: SmoothMap, ys: np.ndarray, box: float = 1e3, **kw) -> List[ShadowingResult]:
    """Batched 1-D version of :func:`shadow_optimal` over trajectories (B, n+1, 1)."""
    if fmap.dim != 1:
        return [
            shadow_optimal(fmap, Pseudotrajectory(y, 0.0, fmap.space), box=box, **kw) for y in ys
        ]
    x0, label = _solve_1d(fmap, ys, box, **kw)
    per = _per_step_batch(fmap, x0, ys)
    return [ShadowingResult(x0[b], float(per[b].max()), per[b], label) for b in range(len(ys))]


def _residual(fmap: SmoothMap, z: np.ndarray) -> np.ndarray:
    return fmap.space.log(fmap(z[:-1]), z[1:])


def shadow_newton(
    fmap: SmoothMap,
    traj: Pseudotrajectory,
    max_iter: int = 50,
    tol: float = 1e-12,
    box: float = 1e3,
    fallback_limit: int = 60,
) -> ShadowingResult:
    """Refine ``traj`` to an exact orbit by minimum-norm Newton steps.

    Each step solves ``delta_{k+1} - Df(z_k) delta_k = -r_k`` for the
    correction of least Euclidean norm via the block-tridiagonal normal
    equations.  Without convergence the 1-D optimiser (or, for short
    windows, the multistart optimiser) takes over.
    """
    sp = fmap.space
    ys = np.asarray(traj.points, dtype=float)
    n, m = ys.shape[0] - 1, fmap.dim
    z = ys.copy()
    r = _residual(fmap, z)
    it = 0
    status = "no-convergence"
    rows = np.arange(n * m)
    while True:
        res = float(np.max(np.abs(r))) if n else 0.0
        if res < tol:
            status = "ok"
            break
        if it >= max_iter or not np.isfinite(res) or res > 1e3:
            break
        jac = fmap.derivative(z[:-1])  # (n, m, m)
        blk_r = np.repeat(np.arange(n), m * m) * m + np.tile(np.repeat(np.arange(m), m), n)
        blk_c = np.repeat(np.arange(n), m * m) * m + np.tile(np.tile(np.arange(m), m), n)
        J = sps.csr_matrix(
            (
                np.concatenate([-jac.reshape(-1), np.ones(n * m)]),
                (np.concatenate([blk_r, rows]), np.concatenate([blk_c, rows + m])),
            ),
            shape=(n * m, (n + 1) * m),
        )
        try:
            mu = splu((J @ J.T).tocsc()).solve(-r.reshape(-1))
        except RuntimeError:
            break
        delta = (J.T @ mu).reshape(n + 1, m)
        # backtrack while the step increases the residual
        for _ in range(12):
            trial = sp.exp(z, delta)
            if not sp.periodic and not np.all(np.abs(trial) <= box):
                delta = delta / 2
                continue
            r_trial = _residual(fmap, trial)
            if np.max(np.abs(r_trial)) <= res or np.max(np.abs(r_trial)) < tol:
                break
            delta = delta / 2
        else:
            break
        z, r = trial, r_trial
        it += 1
    if status != "ok":
        if m == 1 or n <= fallback_limit:
            fb = shadow_optimal(fmap, traj, box=box)
            fb.status, fb.iterations = "fallback-optimal", it
            return fb
        return ShadowingResult(ys[0], math.nan, np.full(n + 1, math.nan), "newton", status, it)
    per = sp.dist(z, ys)
    return ShadowingResult(z[0], float(per.max()), per, "newton", status, it)


# --------------------------------------------------------------------------
# Hoelder exponent experiments


@dataclass(frozen=True)
class WindowRule:
    """Window length n = fixed, or n = ceil(C d^-omega)."""

    kind: str = "power"
    n: int = 100
    C: float = 1.0
    omega: float = 0.5

    def length(self, d: float) -> int:
        if self.kind == "fixed":
            return int(self.n)
        return max(1, int(math.ceil(self.C * d ** (-self.omega))))


@dataclass
class ExponentFit:
    theta_hat: float
    stderr: float
    n_cells: int
    failures: int
    table: List[dict] = field(default_factory=list)

    def worst(self):
        """(d, n, worst epsilon) per cell, in grid order."""
        cells = {}
        for row in self.table:
            if row["status"] in ("ok", "fallback-optimal") and math.isfinite(row["epsilon"]):
                key = (row["d"], row["n"])
                cells[key] = max(cells.get(key, 0.0), row["epsilon"])
        return [(d, n, e) for (d, n), e in cells.items()]


def cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cell]))


def run_cell(
    fmap: SmoothMap,
    d: float,
    n: int,
    trials: int,
    rng: np.random.Generator,
    noise: str = "uniform",
    solver: str = "auto",
    start: Optional[Callable] = None,
) -> List[dict]:
    """Shadow ``trials`` pseudotrajectories at one (d, n) cell."""
    start = start or fmap.sample_start
    if start is None:
        raise ValueError(f"map {fmap.name!r} needs an explicit start sampler")
    starts = np.stack([np.asarray(start(rng, d), dtype=float).reshape(fmap.dim) for _ in range(trials)])
    ys = generate_batch(fmap, starts, n, NoiseModel(noise, d), rng)
    if solver == "auto":
        solver = "optimal" if fmap.dim == 1 else "newton"
    rows = []
    if solver == "optimal":
        try:
            results = shadow_optimal_batch(fmap, ys)
        except DivergenceError:
            results = [ShadowingResult(ys[b, 0], math.nan, np.array([]), "optimal", "diverged") for b in range(trials)]
    else:
        results = []
        for b in range(trials):
            try:
                results.append(shadow_newton(fmap, Pseudotrajectory(ys[b], d, fmap.space)))
            except DivergenceError:
                results.append(ShadowingResult(ys[b, 0], math.nan, np.array([]), "newton", "diverged"))
    for b, res in enumerate(results):
        rows.append(
            {
                "map": fmap.name,
                "d": d,
                "n": n,
                "trial": b,
                "epsilon": res.epsilon,
                "solver": res.solver,
                "status": res.status,
            }
        )
    return rows


def fit_exponent(rows: Sequence[dict]) -> ExponentFit:
    fit = ExponentFit(math.nan, math.nan, 0, 0, list(rows))
    fit.failures = sum(1 for r in rows if r["status"] not in ("ok", "fallback-optimal") or not math.isfinite(r["epsilon"]))
    cells = [(d, e) for d, _, e in fit.worst() if e > 0]
    if fit.failures:
        log.warning("%d shadowing runs failed and were excluded from the fit", fit.failures)
    fit.n_cells = len(cells)
    if len(cells) >= 2:
        d, e = np.array(cells).T
        reg = stats.linregress(np.log(d), np.log(e))
        fit.theta_hat, fit.stderr = float(reg.slope), float(reg.stderr)
    return fit


def estimate_holder_exponent(
    fmap: SmoothMap,
    d_grid: Sequence[float],
    window: WindowRule,
    trials: int,
    seed: int,
    noise: str = "uniform",
    solver: str = "auto",
    start: Optional[Callable] = None,
) -> ExponentFit:
    """Slope of log(worst epsilon) against log d over a grid of defect levels."""
    d_grid = list(d_grid)
    if len(d_grid) < 4:
        raise ValueError("need at least 4 grid points")
    rows: List[dict] = []
    for j, d in enumerate(d_grid):
        rows += run_cell(fmap, d, window.length(d), trials, cell_rng(seed, j), noise, solver, start)
    return fit_exponent(rows)


# --------------------------------------------------------------------------
# bounds near the neutral fixed point of the circle example


@dataclass
class BoundCheck:
    name: str
    runs: int
    checked: int
    violations: int
    worst_ratio: float  # max observed distance / bound


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def check_backward_cube_root(
    fmap: SmoothMap,
    params: CircleExampleParams,
    runs: int,
    rng: np.random.Generator,
    noise: str = "uniform",
    steps: int = 4000,
    d_range=(1e-9, 1e-4),
) -> BoundCheck:
    """Backward pseudotrajectories from y_0 in U_u stay within 2 d^(1/3) of f^k(y_0)."""
    sp = fmap.space
    d = _log_uniform(rng, *d_range, runs)
    y = sp.wrap(rng.uniform(-params.delta, params.delta, (runs, 1)) + params.u)
    x = y.copy()
    bound = 2 * d ** (1 / 3)
    worst, bad, checked = 0.0, 0, 0
    for _ in range(steps):
        x_prev = fmap.invert(x)
        if noise == "uniform":
            eta = _ball(rng, (runs,), 1, d)
        else:
            direction = np.sign(sp.log(x, y))
            direction = np.where(direction == 0, 1.0, direction)
            eta = -0.999 * d[:, None] * direction
        # f(y_prev) = y - eta, so the one-step defect is |eta| < d
        y = fmap.invert(sp.exp(y, -eta))
        x = x_prev
        gap = sp.dist(x, y)
        worst = max(worst, float(np.max(gap / bound)))
        bad += int(np.sum(gap >= bound))
        checked += runs
    return BoundCheck("backward-cube-root", runs, checked, bad, worst)


def check_neutral_confinement(
    fmap: SmoothMap,
    params: CircleExampleParams,
    runs: int,
    rng: np.random.Generator,
    noise: str = "uniform",
    d_range=(1e-6, 1e-4),
) -> BoundCheck:
    """Pseudotrajectories that linger in U_u stay within 2 d^(1/3) of u.

    A finite window stands in for the bi-infinite sequence: index k is
    checked when the sequence stays in U_u for the next K(d) steps, where
    K(d) exceeds the number of steps a d-pseudotrajectory needs to leave
    U_u from distance 2 d^(1/3).
    """
    d = _log_uniform(rng, *d_range, runs)
    scale = d ** (1 / 3)
    look = np.ceil(0.25 / d ** (2 / 3)).astype(int) + 2
    steps = int(2 * look.max())
    start = params.u + rng.uniform(-3, 3, runs) * scale
    ys = generate_batch(fmap, start[:, None], steps, NoiseModel(noise, 1.0), rng, d=d)
    xu = np.abs(local_coordinate(params, ys, "u"))
    inside = xu <= params.delta
    # first exit index (steps + 1 if never)
    exit_at = np.where(inside.all(axis=1), steps + 1, np.argmin(inside, axis=1))
    k = np.arange(steps + 1)
    mask = (k[None, :] + look[:, None] < exit_at[:, None]) & (k[None, :] + look[:, None] <= steps)
    ratio = np.where(mask, xu / (2 * scale[:, None]), 0.0)
    return BoundCheck(
        "neutral-confinement", runs, int(mask.sum()), int(np.sum(mask & (ratio >= 1))), float(ratio.max())
    )


def check_backward_linear(
    fmap: SmoothMap,
    params: CircleExampleParams,
    runs: int,
    rng: np.random.Generator,
    noise: str = "uniform",
    steps: int = 1500,
    ends: int = 4,
    d_range=(1e-8, 1e-4),
) -> BoundCheck:
    """For pseudotrajectories inside U_u, dist(y_{n-k}, f^-k(y_n)) <= d k."""
    sp = fmap.space
    d = _log_uniform(rng, *d_range, runs)
    start = params.u + rng.uniform(-params.delta, params.delta, runs)
    ys = generate_batch(fmap, start[:, None], steps, NoiseModel(noise, 1.0), rng, d=d)
    inside = np.abs(local_coordinate(params, ys, "u")) <= params.delta
    last = np.where(inside.all(axis=1), steps, np.argmin(inside, axis=1) - 1)
    runs_idx, end_idx = [], []
    for b in np.flatnonzero(last >= 1):
        picks = {int(last[b])} | set(rng.integers(1, last[b] + 1, ends - 1).tolist())
        runs_idx += [b] * len(picks)
        end_idx += sorted(picks)
    if not runs_idx:
        return BoundCheck("backward-linear", runs, 0, 0, 0.0)
    runs_idx, end_idx = np.array(runs_idx), np.array(end_idx)
    # march all backward orbits f^-k(y_n) together, masking finished ones
    z = ys[runs_idx, end_idx]
    dd = d[runs_idx]
    worst, bad, checked = 0.0, 0, len(runs_idx)
    for k in range(1, int(end_idx.max()) + 1):
        z = fmap.invert(z)
        act = end_idx >= k
        gap = sp.dist(ys[runs_idx[act], end_idx[act] - k], z[act])
        worst = max(worst, float(np.max(gap / (dd[act] * k))))
        bad += int(np.sum(gap > dd[act] * k * (1 + 1e-12) + 1e-15))
        checked += int(act.sum())
    return BoundCheck("backward-linear", runs, checked, bad, worst)
