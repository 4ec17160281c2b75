import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holsh.maps import cubic_map, get_map
from holsh.pseudo import (
    DivergenceError,
    NoiseModel,
    Pseudotrajectory,
    WindowRule,
    cell_rng,
    estimate_holder_exponent,
    fit_exponent,
    generate,
    orbit_distances,
    run_cell,
    shadow_newton,
    shadow_optimal,
    validate,
)


def _grid_oracle(fmap, ys, coarse=1e-6, fine=1e-9, keep=6):
    """Exhaustive search over x0: a coarse sweep of the only feasible bracket, then fine sweeps."""
    r = float(orbit_distances(fmap, ys[0], ys).max())
    sp = fmap.space

    def eps(x):
        pts = sp.wrap(x[:, None])
        out = sp.dist(pts, ys[0])
        for y in ys[1:]:
            pts = fmap(pts)
            out = np.maximum(out, sp.dist(pts, y))
        return out

    xs = ys[0, 0] + np.arange(-r, r + coarse, coarse)
    e = eps(xs)
    best = float(e.min())
    for c in xs[np.argsort(e)[:keep]]:
        best = min(best, float(eps(c + np.arange(-2 * coarse, 2 * coarse, fine)).min()))
    return best


def test_exact_orbit_validates(circle):
    traj = generate(circle, [0.3], 50, NoiseModel("none"))
    assert np.allclose(traj.points[1:], circle(traj.points[:-1]), atol=0)
    for d in (1e-12, 1e-3, 1.0):
        v = validate(circle, traj, d)
        assert v.ok and v.max_defect == 0.0


def test_uniform_noise_at_u_validates(circle):
    traj = generate(circle, [0.0], 100, NoiseModel("uniform", 1e-4), np.random.default_rng(0))
    v = validate(circle, traj, 1e-4)
    assert v.ok and v.max_defect < 1e-4


def test_jump_rejected(circle):
    traj = generate(circle, [0.2], 20, NoiseModel("none"))
    traj.points[10] = circle.space.wrap(traj.points[10] + 2e-4)
    v = validate(circle, traj, 1e-4)
    assert not v.ok and v.max_defect >= 2e-4 * (1 - 1e-9)


def test_reproducible(circle, cat):
    for fmap, start in ((circle, [0.01]), (cat, [0.1, 0.7])):
        a = generate(fmap, start, 200, NoiseModel("uniform", 1e-5), np.random.default_rng(9))
        b = generate(fmap, start, 200, NoiseModel("uniform", 1e-5), np.random.default_rng(9))
        assert np.array_equal(a.points, b.points)
    r1 = run_cell(circle, 1e-4, 100, 4, cell_rng(7, 0), "adversarial")
    r2 = run_cell(circle, 1e-4, 100, 4, cell_rng(7, 0), "adversarial")
    assert r1 == r2


def test_shadow_exact_orbit(circle):
    traj = generate(circle, [0.01], 40, NoiseModel("none"))
    res = shadow_optimal(circle, traj)
    assert res.epsilon < 1e-12
    assert circle.space.dist(res.x0, traj.points[0]) < 1e-12


def test_contraction_geometric_bound():
    fmap = get_map("contraction")
    rng = np.random.default_rng(1)
    for d in (1e-6, 1e-3):
        traj = generate(fmap, [0.3, -0.2], 30, NoiseModel("uniform", d), rng)
        assert orbit_distances(fmap, traj.points[0], traj.points).max() <= 2 * d
        assert shadow_optimal(fmap, traj).epsilon <= 2 * d


@pytest.mark.parametrize("d", [1e-6, 1e-5, 1e-4])
def test_circle_neutral_window(circle, d):
    n = int(10 * d ** (-2 / 3))
    rows = run_cell(circle, d, n, 8, np.random.default_rng(2), "adversarial")
    eps = max(r["epsilon"] for r in rows)
    assert 0.5 * d ** (1 / 3) <= eps <= 2 * d ** (1 / 3)


def test_newton_exact_cat(cat):
    traj = generate(cat, [0.1, 0.2], 100, NoiseModel("none"))
    res = shadow_newton(cat, traj)
    assert res.iterations == 0 and res.epsilon == 0.0 and res.status == "ok"


def test_newton_lipschitz_cat(cat):
    rng = np.random.default_rng(3)
    traj = generate(cat, [0.1, 0.2], 1000, NoiseModel("uniform", 1e-8), rng)
    res = shadow_newton(cat, traj)
    assert res.status == "ok" and res.epsilon <= 10 * 1e-8
    short = generate(cat, [0.4, 0.9], 30, NoiseModel("uniform", 1e-6), rng)
    newton, multi = shadow_newton(cat, short), shadow_optimal(cat, short)
    # Newton reports against its refined sequence, the multistart against the true orbit of x0;
    # the two differ by rounding amplified over the window
    assert multi.epsilon <= 1.05 * newton.epsilon
    assert newton.epsilon <= 10 * 1e-6


def test_newton_failure_status(cat):
    traj = generate(cat, [0.1, 0.2], 200, NoiseModel("uniform", 1e-6), np.random.default_rng(4))
    res = shadow_newton(cat, traj, max_iter=0)
    assert res.status == "no-convergence" and math.isnan(res.epsilon)
    short = Pseudotrajectory(traj.points[:21], 1e-6, cat.space)
    assert shadow_newton(cat, short, max_iter=0).status == "fallback-optimal"


def test_divergence_on_plane(henon):
    ys = np.array([[0.0, 0.0], [50.0, 0.0], [-4e4, 0.0]])
    with pytest.raises(DivergenceError):
        shadow_optimal(henon, Pseudotrajectory(ys, 1.0, henon.space), box=100.0)


@pytest.mark.parametrize("noise", ["uniform", "adversarial"])
def test_monotone_in_window(circle, noise):
    traj = generate(circle, [0.002], 3000, NoiseModel(noise, 1e-5), np.random.default_rng(5))
    eps = [
        shadow_optimal(circle, Pseudotrajectory(traj.points[: n + 1], 1e-5, circle.space)).epsilon
        for n in (10, 100, 300, 1000, 3000)
    ]
    tol = 1e-7 * max(eps)
    assert all(b >= a - tol for a, b in zip(eps, eps[1:]))


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["circle_example", "cubic"]),
    st.integers(1, 20),
    st.floats(1e-4, 1e-2),
    st.sampled_from(["uniform", "adversarial"]),
    st.integers(0, 2**32 - 1),
)
def test_oracle_equivalence_1d(name, n, d, noise, seed):
    fmap = cubic_map() if name == "cubic" else get_map(name)
    rng = np.random.default_rng(seed)
    start = rng.uniform(-0.1, 0.1, 1) if name == "cubic" else rng.uniform(0, 1, 1)
    traj = generate(fmap, start, n, NoiseModel(noise, d), rng)
    res = shadow_optimal(fmap, traj)
    oracle = _grid_oracle(fmap, traj.points)
    assert res.epsilon <= oracle + 1e-8
    assert abs(res.epsilon - oracle) <= 1e-8


def test_window_rule():
    assert WindowRule("fixed", 77).length(1e-3) == 77
    assert WindowRule("power", C=1.0, omega=0.5).length(1e-6) == 1000
    assert WindowRule("power", C=10.0, omega=2 / 3).length(1e-6) == 100000


def test_fit_exponent_synthetic():
    rows = []
    for d in np.geomspace(1e-6, 1e-3, 6):
        for t in range(3):
            rows.append({"map": "x", "d": d, "n": 1, "trial": t, "epsilon": 2 * d ** 0.4 * (1 - 0.1 * t), "solver": "s", "status": "ok"})
    rows.append({"map": "x", "d": 1e-4, "n": 1, "trial": 9, "epsilon": math.nan, "solver": "s", "status": "no-convergence"})
    fit = fit_exponent(rows)
    assert fit.theta_hat == pytest.approx(0.4, abs=1e-12)
    assert fit.n_cells == 6 and fit.failures == 1


def test_estimate_needs_grid(cat):
    with pytest.raises(ValueError):
        estimate_holder_exponent(cat, [1e-4, 1e-3], WindowRule(), 2, 0)


def test_cat_exponent_small(cat):
    fit = estimate_holder_exponent(cat, np.geomspace(1e-7, 1e-4, 4), WindowRule("fixed", 200), 4, 0)
    assert 0.9 <= fit.theta_hat <= 1.05
