"""Flat spaces, smooth self-maps and the neutral/contracting circle example.

Points are numpy arrays whose last axis is the coordinate axis, so every map
evaluates on batches of shape ``(..., m)``.  Periodic spaces store coordinates
in ``[0, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numba
import numpy as np

PointFn = Callable[[np.ndarray], np.ndarray]


class MapConstructionError(ValueError):
    """Raised when a map realization violates its defining conditions."""


@dataclass(frozen=True)
class Space:
    kind: str  # "circle", "torus2" or "plane"
    dim: int

    def __post_init__(self):
        if self.kind == "circle" and self.dim != 1:
            raise ValueError("circle has dimension 1")
        if self.kind == "torus2" and self.dim != 2:
            raise ValueError("torus2 has dimension 2")
        if self.kind == "plane" and not 1 <= self.dim <= 3:
            raise ValueError("plane dimension must be 1, 2 or 3")
        if self.kind not in ("circle", "torus2", "plane"):
            raise ValueError(f"unknown space kind {self.kind!r}")

    @property
    def periodic(self) -> bool:
        return self.kind != "plane"

    @property
    def injectivity_radius(self) -> float:
        return 0.5 if self.periodic else np.inf

    def wrap(self, p):
        p = np.asarray(p, dtype=float)
        if not self.periodic:
            return p
        q = np.mod(p, 1.0)
        return np.where(q >= 1.0, 0.0, q)

    def exp(self, x, v):
        """Translation chart: the point reached from ``x`` along ``v``."""
        return self.wrap(np.asarray(x, dtype=float) + v)

    def log(self, x, y):
        """Wrap-aware displacement from ``x`` to ``y``."""
        diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self.periodic:
            diff = diff - np.round(diff)
        return diff

    def dist(self, x, y):
        return np.linalg.norm(self.log(x, y), axis=-1)


CIRCLE = Space("circle", 1)
TORUS2 = Space("torus2", 2)


def plane(dim: int = 2) -> Space:
    return Space("plane", dim)


@dataclass(frozen=True)
class SmoothMap:
    """A diffeomorphism of a flat space together with its derivative.

    ``c2_bound`` is the constant S with
    ``dist(f(exp_x v), exp_{f(x)}(Df(x) v)) <= S |v|^2`` for ``|v| <= c2_radius``.
    ``sample_start(rng, d)`` optionally draws a default start point for
    shadowing experiments at defect level ``d``.  One-dimensional maps may
    carry ``kernel = (fn, consts)``, a compiled scalar version
    ``fn(x, consts)`` of ``func`` used by the exact 1-D shadowing solver.
    """

    name: str
    space: Space
    func: PointFn
    deriv: PointFn
    inverse: Optional[PointFn] = None
    c2_bound: float = 0.0
    c2_radius: float = 0.25
    sample_start: Optional[Callable[[np.random.Generator, float], np.ndarray]] = field(
        default=None, compare=False
    )
    kernel: Optional[Tuple[Callable, np.ndarray]] = field(default=None, compare=False)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def injectivity_radius(self) -> float:
        return self.space.injectivity_radius

    def __call__(self, p):
        return self.func(np.asarray(p, dtype=float))

    def derivative(self, p):
        return self.deriv(np.asarray(p, dtype=float))

    def invert(self, p):
        if self.inverse is None:
            raise ValueError(f"map {self.name!r} has no inverse")
        return self.inverse(np.asarray(p, dtype=float))

    def orbit(self, p0, n: int) -> np.ndarray:
        """Points f^k(p0) for k = 0..n (or k = 0..-n backwards when n < 0)."""
        p = self.space.wrap(np.asarray(p0, dtype=float).reshape(self.dim))
        step = self.__call__ if n >= 0 else self.invert
        out = np.empty((abs(n) + 1, self.dim))
        out[0] = p
        for k in range(1, abs(n) + 1):
            p = step(p)
            out[k] = p
        return out


# --------------------------------------------------------------------------
# geometry checks


def derivative_fd_error(fmap: SmoothMap, points, h: float = 1e-6) -> float:
    """Largest relative error of ``deriv`` against central differences."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sp = fmap.space
    jac = fmap.derivative(points)
    fd = np.empty_like(jac)
    for j in range(fmap.dim):
        e = np.zeros(fmap.dim)
        e[j] = h
        plus = fmap(sp.exp(points, e))
        minus = fmap(sp.exp(points, -e))
        fd[..., :, j] = sp.log(minus, plus) / (2 * h)
    scale = np.maximum(np.linalg.norm(jac, axis=(-2, -1)), 1.0)
    return float(np.max(np.linalg.norm(fd - jac, axis=(-2, -1)) / scale))


def _directions(dim: int, count: int) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    # golden-spiral points on the sphere
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)


def quadratic_defect_ratio(fmap: SmoothMap, x, v) -> np.ndarray:
    """``dist(f(exp_x v), exp_{f(x)}(Df(x) v)) / |v|^2`` elementwise."""
    sp = fmap.space
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lhs = fmap(sp.exp(x, v))
    lin = np.einsum("...ij,...j->...i", fmap.derivative(x), v)
    rhs = sp.exp(fmap(x), lin)
    return sp.dist(lhs, rhs) / np.sum(v * v, axis=-1)


def estimate_c2_bound(
    fmap: SmoothMap,
    region,
    radius: float,
    n_radii: int = 24,
    n_dirs: int = 16,
    floor: float = 1e-8,
) -> float:
    """Smallest S for which the quadratic-defect inequality holds on a grid.

    The grid takes every point of ``region`` against displacements on
    ``n_radii`` geometric shells up to ``radius``.  Ratios below ``floor``
    are float rounding on affine maps and are reported as 0.
    """
    if radius > fmap.injectivity_radius:
        raise ValueError("radius exceeds the injectivity radius")
    region = np.atleast_2d(np.asarray(region, dtype=float))
    radii = np.geomspace(radius * 1e-2, radius, n_radii)
    dirs = _directions(fmap.dim, n_dirs)
    v = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, fmap.dim)
    worst = 0.0
    for chunk in np.array_split(region, max(1, len(region) // 256)):
        ratio = quadratic_defect_ratio(fmap, chunk[:, None, :], v[None, :, :])
        worst = max(worst, float(np.max(ratio)))
    return 0.0 if worst < floor else worst


def with_c2_bound(fmap: SmoothMap, region, radius: float, safety: float = 1.1) -> SmoothMap:
    s = estimate_c2_bound(fmap, region, radius)
    return replace(fmap, c2_bound=safety * s, c2_radius=radius)


# --------------------------------------------------------------------------
# linear and polynomial maps


def linear_torus_map(matrix, name: str = "cat") -> SmoothMap:
    a = np.asarray(matrix, dtype=float)
    if round(abs(np.linalg.det(a))) != 1 or not np.allclose(a, np.round(a)):
        raise MapConstructionError("torus automorphism needs an integer unimodular matrix")
    a_inv = np.round(np.linalg.inv(a))

    def func(p):
        return TORUS2.wrap(p @ a.T)

    def inv(p):
        return TORUS2.wrap(p @ a_inv.T)

    def deriv(p):
        return np.broadcast_to(a, p.shape[:-1] + (2, 2)).copy()

    return SmoothMap(name, TORUS2, func, deriv, inv, 0.0, 0.5, _uniform_torus_start)


def _uniform_torus_start(rng, d):
    return rng.random(2)


def identity_map(space: Space = TORUS2) -> SmoothMap:
    m = space.dim

    def deriv(p):
        return np.broadcast_to(np.eye(m), p.shape[:-1] + (m, m)).copy()

    def start(rng, d):
        return rng.random(m) if space.periodic else rng.uniform(-1, 1, m)

    radius = 0.5 if space.periodic else 1.0
    return SmoothMap("identity", space, space.wrap, deriv, space.wrap, 0.0, radius, start)


def contraction_map(factor: float = 0.5, dim: int = 2) -> SmoothMap:
    sp = plane(dim)

    def deriv(p):
        return np.broadcast_to(factor * np.eye(dim), p.shape[:-1] + (dim, dim)).copy()

    def start(rng, d):
        return rng.uniform(-1, 1, dim)

    return SmoothMap(
        "contraction", sp, lambda p: factor * p, deriv, lambda p: p / factor, 0.0, 1.0, start
    )


def henon_map(a: float = 1.4, b: float = 0.3) -> SmoothMap:
    sp = plane(2)

    def func(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([1 - a * x * x + y, b * x], axis=-1)

    def inv(p):
        x1, y1 = p[..., 0], p[..., 1]
        x = y1 / b
        return np.stack([x, x1 - 1 + a * x * x], axis=-1)

    def deriv(p):
        x = p[..., 0]
        out = np.zeros(p.shape[:-1] + (2, 2))
        out[..., 0, 0] = -2 * a * x
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = b
        return out

    pts = np.array([0.1, 0.1])
    for _ in range(1000):
        pts = func(pts)
    attractor = np.empty((4096, 2))
    for k in range(len(attractor)):
        pts = func(pts)
        attractor[k] = pts

    def start(rng, d):
        return attractor[rng.integers(len(attractor))].copy()

    raw = SmoothMap("henon", sp, func, deriv, inv, 0.0, 1.0, start)
    return with_c2_bound(raw, attractor[::16], 1.0)


@numba.njit(cache=True)
def _cubic_kernel(x, consts):
    return x + x * x * x


def cubic_map() -> SmoothMap:
    """The neutral local model x -> x + x^3 on the line."""
    sp = plane(1)
    return SmoothMap(
        "cubic",
        sp,
        lambda p: p + p ** 3,
        lambda p: (1 + 3 * p ** 2)[..., None],
        _cubic_inverse,
        0.0,
        0.1,
        kernel=(_cubic_kernel, np.zeros(1)),
    )


def _cubic_inverse(y, iters: int = 60):
    # x + x^3 is strictly increasing; Newton from x = y converges monotonically
    x = np.array(y, dtype=float, copy=True)
    for _ in range(iters):
        step = (x + x ** 3 - y) / (1 + 3 * x * x)
        x = x - step
        if np.all(np.abs(step) <= 1e-17 + 1e-16 * np.abs(x)):
            break
    return x


def expansion_gap(x: float, y: float, eps: float) -> bool:
    """Whether |g(x) - g(y)| >= eps + eps^3/4 for g(x) = x + x^3, given |x - y| >= eps > 0."""
    if not eps > 0 or abs(x - y) < eps * (1 - 1e-12):
        raise ValueError("need |x - y| >= eps > 0")
    g = lambda t: t + t ** 3  # noqa: E731
    # the inequality is tight near x = -y, so leave room for rounding
    slack = 8 * np.finfo(float).eps * max(1.0, abs(x), abs(y)) ** 3
    return bool(abs(g(x) - g(y)) >= eps + eps ** 3 / 4 - slack)


# --------------------------------------------------------------------------
# circle example: neutral fixed point u = 0, attracting fixed point s = 1/2


@dataclass(frozen=True)
class CircleExampleParams:
    delta: float = 0.1
    u: float = 0.0
    s: float = 0.5

    def validate(self):
        if not 0.0 < self.delta < 0.125:
            raise MapConstructionError("delta must lie in (0, 1/8)")


class _QuinticArc:
    """Quintic Hermite blend on [a, b] matching value, slope and curvature."""

    def __init__(self, a, b, left, right):
        self.a, self.b = a, b
        h = b - a
        # p(t) = sum c_j t^j on t in [0, 1]
        rows = []
        for t, r in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]:
            rows.append(
                [
                    math.factorial(j) / math.factorial(j - r) * float(t) ** (j - r) if j >= r else 0.0
                    for j in range(6)
                ]
            )
        rhs = [left[0], left[1] * h, left[2] * h * h, right[0], right[1] * h, right[2] * h * h]
        self.c = np.linalg.solve(np.array(rows), np.array(rhs))
        self.dc = np.array([j * self.c[j] for j in range(1, 6)]) / h
        self.lo, self.hi = left[0], right[0]

    def __call__(self, y):
        return np.polynomial.polynomial.polyval((y - self.a) / (self.b - self.a), self.c)

    def slope(self, y):
        return np.polynomial.polynomial.polyval((y - self.a) / (self.b - self.a), self.dc)

    def solve(self, z):
        # monotone on [a, b]: bisection, then two Newton polishes
        if z.size == 0:
            return z
        lo = np.full_like(z, self.a)
        hi = np.full_like(z, self.b)
        for _ in range(55):
            mid = 0.5 * (lo + hi)
            below = self(mid) < z
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        y = 0.5 * (lo + hi)
        for _ in range(2):
            y = y - (self(y) - z) / self.slope(y)
        return np.clip(y, self.a, self.b)


@numba.njit(cache=True)
def _circle_kernel(p, c):
    # c = (delta, arc start, arc length, six arc coefficients)
    dl = c[0]
    y = p - math.floor(p)
    x = y - math.floor(y + 0.5)
    if abs(x) <= dl:
        out = x + x * x * x
    elif abs(y - 0.5) <= dl:
        out = 0.5 + (y - 0.5) / 2
    else:
        mirror = y >= 0.5
        z = 1.0 - y if mirror else y
        t = (z - c[1]) / c[2]
        v = c[8]
        for j in range(7, 2, -1):
            v = v * t + c[j]
        out = 1.0 - v if mirror else v
    out = out - math.floor(out)
    return 0.0 if out >= 1.0 else out


def build_circle_example(params: CircleExampleParams = CircleExampleParams()) -> SmoothMap:
    """Circle diffeomorphism with a neutral point ``x + x^3`` and a sink ``x/2``.

    Near ``u`` (local coordinate x = p - u) the map is exactly x + x^3, near
    ``s`` it is exactly x/2, and the two complementary arcs carry quintic
    Hermite blends, mirrored so that the map commutes with p -> -p.
    """
    params.validate()
    dl = params.delta
    if params.u != 0.0 or params.s != 0.5:
        raise MapConstructionError("the realization places u at 0 and s at 1/2")
    arc = _QuinticArc(
        dl, 0.5 - dl, (dl + dl ** 3, 1 + 3 * dl * dl, 6 * dl), (0.5 - dl / 2, 0.5, 0.0)
    )

    def regions(y):
        x = y - np.round(y)
        in_u = np.abs(x) <= dl
        in_s = np.abs(y - 0.5) <= dl
        arc_a = ~in_u & ~in_s & (y < 0.5)
        return x, in_u, in_s, arc_a

    def func(p):
        y = np.mod(p, 1.0)
        x = y - np.round(y)
        out = x + x ** 3
        in_u = np.abs(x) <= dl
        if not in_u.all():
            rest = ~in_u
            yr = y[rest]
            out[rest] = np.where(
                np.abs(yr - 0.5) <= dl,
                0.5 + (yr - 0.5) / 2,
                np.where(yr < 0.5, arc(yr), 1 - arc(1 - yr)),
            )
        return CIRCLE.wrap(out)

    def deriv(p):
        y = CIRCLE.wrap(p)
        x, in_u, in_s, arc_a = regions(y)
        out = np.where(
            in_u, 1 + 3 * x * x, np.where(in_s, 0.5, np.where(arc_a, arc.slope(y), arc.slope(1 - y)))
        )
        return out[..., None]

    img_u = dl + dl ** 3

    def inverse(p):
        z = CIRCLE.wrap(p)[..., 0]
        x = z - np.round(z)
        out = np.empty_like(z)
        in_u = np.abs(x) <= img_u
        in_s = np.abs(z - 0.5) <= dl / 2
        arc_a = ~in_u & ~in_s & (z < 0.5)
        arc_b = ~in_u & ~in_s & ~arc_a
        out[in_u] = _cubic_inverse(x[in_u])
        out[in_s] = 0.5 + 2 * (z[in_s] - 0.5)
        out[arc_a] = arc.solve(z[arc_a])
        out[arc_b] = 1 - arc.solve(1 - z[arc_b])
        return CIRCLE.wrap(out[..., None])

    def start(rng, d):
        # a point frozen by the holding adversary near the neutral fixed point
        r = (0.9 * d) ** (1 / 3) * rng.uniform(0.5, 1.0)
        return CIRCLE.wrap(np.array([params.u + rng.choice([-1.0, 1.0]) * r]))

    consts = np.concatenate([[dl, arc.a, arc.b - arc.a], arc.c])
    fmap = SmoothMap(
        "circle_example", CIRCLE, func, deriv, inverse, 0.0, 0.05, start, (_circle_kernel, consts)
    )
    grid = np.linspace(dl, 0.5 - dl, 10_001)
    if np.any(arc.slope(grid) <= 0):
        raise MapConstructionError("interpolating arc is not monotone")
    if np.any(arc(grid[1:-1]) <= grid[1:-1]):
        raise MapConstructionError("interpolating arc has an extra fixed point")
    verify_circle_conditions(fmap, params)
    region = (np.arange(4000) + 0.5)[:, None] / 4000
    return with_c2_bound(fmap, region, fmap.c2_radius)


def local_coordinate(params: CircleExampleParams, p, at: str = "u") -> np.ndarray:
    """Signed local coordinate of circle points about ``u`` or ``s``."""
    centre = params.u if at == "u" else params.s
    return CIRCLE.log(np.full_like(np.asarray(p, float), centre), p)[..., 0]


def verify_circle_conditions(
    fmap: SmoothMap, params: CircleExampleParams, grid: int = 10_000, max_iter: int = 2000
) -> Dict[str, int]:
    """Check the two-fixed-point structure and return the absorption time N.

    N is the least integer > 2 with f^N(S^1 - U_u) in U_s and
    f^-N(S^1 - U_s) in U_u over a ``grid``-point sample; the call also checks
    that f^2(U_u) misses U_s.
    """
    dl = params.delta
    y = ((np.arange(grid) + 0.5) / grid)[:, None]
    xu = local_coordinate(params, y, "u")
    xs = local_coordinate(params, y, "s")

    moved = CIRCLE.log(y, fmap(y))[:, 0]
    sign = np.sign(moved)
    sign_change = np.sum(sign != np.roll(sign, 1))
    # moved > 0 on (u, s), < 0 on (s, 1): two cyclic sign switches, at s and u
    if sign_change != 2 or np.any(moved[(xu > 0) & (xs < 0)] <= 0) or np.any(
        moved[(xs > 0) & (xu < 0)] >= 0
    ):
        raise MapConstructionError("map does not have exactly the two fixed points u, s")

    def absorb(pts, step, target):
        n = 0
        while not np.all(target(pts)):
            pts = step(pts)
            n += 1
            if n > max_iter:
                raise MapConstructionError("absorption condition fails")
        return n

    in_us = lambda p: np.abs(local_coordinate(params, p, "s")) <= dl
    in_uu = lambda p: np.abs(local_coordinate(params, p, "u")) <= dl
    n_fwd = absorb(y[np.abs(xu) > dl], fmap, in_us)
    n_bwd = absorb(y[np.abs(xs) > dl], fmap.invert, in_uu)
    uu = y[np.abs(xu) <= dl]
    if np.any(in_us(fmap(fmap(uu)))):
        raise MapConstructionError("f^2(U_u) meets U_s")
    return {"N": max(3, n_fwd, n_bwd), "forward": n_fwd, "backward": n_bwd}


def builtin_maps(circle_params: CircleExampleParams = CircleExampleParams()) -> Dict[str, SmoothMap]:
    """Catalog of named maps used by the CLI and the experiments."""
    return {
        "circle_example": build_circle_example(circle_params),
        "cat": linear_torus_map([[2, 1], [1, 1]]),
        "contraction": contraction_map(),
        "identity": identity_map(),
        "henon": henon_map(),
    }


def get_map(name: str, circle_params: CircleExampleParams = CircleExampleParams()) -> SmoothMap:
    factories = {
        "circle_example": lambda: build_circle_example(circle_params),
        "cat": lambda: linear_torus_map([[2, 1], [1, 1]]),
        "contraction": contraction_map,
        "identity": identity_map,
        "henon": henon_map,
    }
    try:
        return factories[name]()
    except KeyError:
        raise KeyError(f"unknown map {name!r}; known: {sorted(factories)}") from None
