import numpy as np
import pytest

from holsh.bridge import (
    ChartDomainError,
    PreconditionError,
    lift_solution_to_pseudo,
    randomized_bridge_check,
    round_trip_gap,
    rounding_allowance,
    shadow_to_cocycle_residual,
    sublinear_growth_experiment,
)
from holsh.cocycle import Cocycle, InhomogeneousProblem, solve_min_sup
from holsh.maps import get_map
from holsh.pseudo import validate


def min_sup_v(fmap, p0, w):
    N = len(w)
    return solve_min_sup(InhomogeneousProblem(Cocycle.from_orbit(fmap, p0, 0, N - 1), 0, N, w)).v


def test_zero_lift(cat):
    lift = lift_solution_to_pseudo(cat, [0.2, 0.6], np.zeros((11, 2)), 1e-4)
    assert np.array_equal(lift.traj.points, lift.base) and lift.defect == 0.0


def test_cat_lift_defect(cat):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((15, 2))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    v = min_sup_v(cat, [0.2, 0.6], w)
    for d in (1e-8, 1e-5):
        lift = lift_solution_to_pseudo(cat, [0.2, 0.6], v, d)
        assert lift.ok and lift.defect <= 2 * d + rounding_allowance(1.0)
        assert validate(cat, lift.traj, 2 * d * (1 + 1e-6)).ok


def test_circle_lift_near_u(circle):
    v = min_sup_v(circle, [0.0], np.ones((20, 1)))
    lift = lift_solution_to_pseudo(circle, [0.0], v, 1e-6)
    assert lift.ok and lift.defect <= (circle.c2_bound + 2) * 1e-6


def test_lift_preconditions(cat, circle):
    v = np.ones((4, 2))
    with pytest.raises(PreconditionError):
        lift_solution_to_pseudo(cat, [0.1, 0.1], v, 0.0)
    with pytest.raises(PreconditionError):
        lift_solution_to_pseudo(cat, [0.1, 0.1], 100 * v, 0.01)
    # v_{k+1} - A v_k = -2 v_k has norm 2 sqrt 2 > 1
    with pytest.raises(PreconditionError):
        lift_solution_to_pseudo(cat, [0.1, 0.1], v, 1e-6)


def test_residual_examples(cat, circle):
    p = cat.orbit([0.3, 0.1], 20)
    tr = shadow_to_cocycle_residual(cat, p, p)
    assert not np.any(tr.c) and not np.any(tr.t)
    x = cat.orbit(cat.space.exp(p[0], [1e-9, -2e-9]), 20)
    tr = shadow_to_cocycle_residual(cat, p, x)
    assert tr.ok and tr.max_residual <= rounding_allowance(1.0, 4)
    p = circle.orbit([0.01], 30)
    x = circle.orbit([0.01 + 1e-4], 30)
    tr = shadow_to_cocycle_residual(circle, p, x)
    assert tr.ok
    assert tr.max_residual <= 2 * circle.c2_bound * np.max(np.abs(tr.c)) ** 2 + rounding_allowance(1.0, 4)


def test_residual_rejects(cat, henon):
    p = cat.orbit([0.3, 0.1], 10)
    with pytest.raises(PreconditionError):
        shadow_to_cocycle_residual(cat, p, p + 1e-3)
    x = cat.orbit([0.3 + 1e-3, 0.1], 10)
    with pytest.raises(ChartDomainError):
        shadow_to_cocycle_residual(cat, p, x)


@pytest.mark.parametrize("name", ["cat", "circle_example", "henon"])
def test_round_trip(name):
    fmap = get_map(name)
    rng = np.random.default_rng(1)
    p0 = fmap.sample_start(rng, 1e-6) if name != "circle_example" else np.array([0.3])
    w = rng.standard_normal((8, fmap.dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    v = min_sup_v(fmap, p0, w)
    d = 1e-6
    lift = lift_solution_to_pseudo(fmap, p0, v, d)
    vmax = np.max(np.linalg.norm(v, axis=1))
    scale = 1.0 if fmap.space.periodic else np.max(np.abs(lift.base))
    bound = 2 * fmap.c2_bound * d * vmax ** 2 + rounding_allowance(scale, 4) / d
    assert round_trip_gap(fmap, lift) <= bound


@pytest.mark.parametrize("name", ["circle_example", "cat", "contraction", "identity", "henon"])
def test_randomized_bridge(name):
    rep = randomized_bridge_check(get_map(name), 100, seed=0)
    assert rep.lift_violations == 0 and rep.residual_violations == 0


def test_growth_experiment(circle, cat):
    grid = [10, 20, 40, 80]
    rows = sublinear_growth_experiment(cat, [[0.1, 0.2], [0.7, 0.4]], grid, samples=4)
    assert {r["orbit_id"] for r in rows} == {0, 1}
    assert all(r["gamma_hat"] < 0.1 for r in rows)
    rows = sublinear_growth_experiment(get_map("identity"), [[0.1, 0.2]], grid, samples=4)
    assert 0.9 <= rows[0]["gamma_hat"] <= 1.1
    # starts on the transition arc and falls into the contracting region
    rows = sublinear_growth_experiment(circle, [[0.3]], grid, samples=4)
    assert rows[0]["gamma_hat"] < 0.1
    assert list(rows[0]) == ["map", "orbit_id", "N", "Q_hat", "gamma_hat"]
