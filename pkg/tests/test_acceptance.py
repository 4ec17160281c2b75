"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are also
collected into the pytest terminal summary.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from holsh.bridge import randomized_bridge_check
from holsh.cocycle import Cocycle, InhomogeneousProblem, brute_force_F_oracle, estimate_Q, fit_slow_growth, solve_min_sup
from holsh.dichotomy import (
    detect,
    growth_threshold,
    pliss_transversality,
    property_A_check_cocycle,
    solution_growth,
    trichotomy_1d,
)
from holsh.maps import CircleExampleParams, build_circle_example, get_map
from holsh.pseudo import (
    WindowRule,
    check_backward_cube_root,
    check_backward_linear,
    check_neutral_confinement,
    estimate_holder_exponent,
)

D_GRID = np.geomspace(1e-6, 1e-3, 8)
CAT = np.array([[2.0, 1.0], [1.0, 1.0]])


def report(num, ok, detail, t0):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - t0:.1f}s]"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def circle():
    return build_circle_example(CircleExampleParams())


def test_criterion_01_circle_infinite_window(circle):
    t0 = time.perf_counter()
    fit = estimate_holder_exponent(circle, D_GRID, WindowRule("power", C=10.0, omega=2 / 3), 32, seed=0, noise="adversarial")
    elapsed = time.perf_counter() - t0
    ok = 0.28 <= fit.theta_hat <= 0.38 and fit.failures == 0 and elapsed < 300
    report(1, ok, f"theta_hat={fit.theta_hat:.4f} (stderr {fit.stderr:.4f}) in [0.28, 0.38], n=10 d^-2/3", t0)


def test_criterion_02_circle_finite_window(circle):
    t0 = time.perf_counter()
    fit = estimate_holder_exponent(circle, D_GRID, WindowRule("power", C=1.0, omega=0.5), 32, seed=0, noise="adversarial")
    elapsed = time.perf_counter() - t0
    ok = 0.45 <= fit.theta_hat <= 0.55 and fit.failures == 0 and elapsed < 300
    report(2, ok, f"theta_hat={fit.theta_hat:.4f} (stderr {fit.stderr:.4f}) in [0.45, 0.55], n=d^-1/2", t0)


def test_criterion_03_neutral_point_bounds(circle):
    t0 = time.perf_counter()
    params = CircleExampleParams()
    parts = []
    ok = True
    for j, check in enumerate((check_backward_cube_root, check_neutral_confinement, check_backward_linear)):
        for k, noise in enumerate(("uniform", "adversarial")):
            rng = np.random.default_rng(np.random.SeedSequence([0, j, k]))
            r = check(circle, params, 1000, rng, noise=noise)
            ok &= r.violations == 0 and r.runs == 1000
            parts.append(f"{r.name}/{noise}: {r.violations} of {r.checked} (worst {r.worst_ratio:.3f})")
    report(3, ok, "; ".join(parts), t0)


def test_criterion_04_cat_lipschitz():
    t0 = time.perf_counter()
    fit = estimate_holder_exponent(get_map("cat"), D_GRID, WindowRule("power", C=1.0, omega=0.5), 32, seed=0)
    ok = 0.9 <= fit.theta_hat <= 1.05 and fit.failures == 0
    report(4, ok, f"theta_hat={fit.theta_hat:.4f} in [0.9, 1.05]", t0)


def _random_instance(rng):
    m, N = int(rng.integers(1, 3)), int(rng.integers(1, 13))
    mats = []
    while len(mats) < N:
        A = rng.uniform(-2, 2, (m, m))
        if np.linalg.cond(A) < 100:
            mats.append(A)
    w = rng.standard_normal((N, m))
    w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1.0)
    return InhomogeneousProblem(Cocycle(np.array(mats)), 0, N, w)


def test_criterion_05_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    gaps = []
    for _ in range(200):
        prob = _random_instance(rng)
        gaps.append(abs(solve_min_sup(prob).F - brute_force_F_oracle(prob)))
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-6 and elapsed < 120
    report(5, ok, f"max |solver - oracle| = {max(gaps):.2e} over 200 instances", t0)


def test_criterion_06_closed_form_Q():
    t0 = time.perf_counter()
    ident = Cocycle.constant([[1.0]], 60)
    errs = {N: abs(estimate_Q(ident, 0, N).Q_hat - N / 2) for N in (4, 10, 50)}
    two = Cocycle.constant([[2.0]], 200)
    L = max(estimate_Q(two, 0, N).Q_hat for N in range(1, 201))
    ok = max(errs.values()) <= 1e-6 and L <= 1 + 1e-6
    report(6, ok, f"identity |Q-N/2| max {max(errs.values()):.1e}; lambda=2 max L_hat {L:.6f} over N=1..200", t0)


def test_criterion_07_slow_growth():
    t0 = time.perf_counter()
    grid = [10, 20, 40, 80, 160]
    g_id = fit_slow_growth(Cocycle.constant([[1.0]], 160), grid).gamma
    g_id2 = fit_slow_growth(Cocycle.constant(np.eye(2), 160), grid, samples=4).gamma
    g_cat = fit_slow_growth(Cocycle.constant(CAT, 160), grid, samples=4).gamma
    g_two = fit_slow_growth(Cocycle.constant([[2.0]], 160), grid).gamma
    ok = 0.9 <= g_id <= 1.1 and 0.9 <= g_id2 <= 1.1 and g_cat < 0.1 and g_two < 0.1
    report(7, ok, f"gamma identity {g_id:.3f} (m=2: {g_id2:.3f}), cat {g_cat:.3f}, lambda=2 {g_two:.3f}", t0)


def _centred(A, N):
    return Cocycle.constant(A, 2 * N, -N)


def _contracting_then_expanding(N):
    a = np.where(np.arange(-N, N) < 0, 0.5, 2.0)
    return Cocycle(a[:, None, None], -N)


def test_criterion_08_dichotomy():
    t0 = time.perf_counter()
    diag = _centred(np.diag([0.5, 2.0]), 100)
    cat = _centred(CAT, 100)
    sd, sc = detect(diag, "forward"), detect(cat, "forward")
    lam_ok = (
        sd is not None
        and abs(sd.lam - 0.5) <= 0.02 * 0.5
        and sc is not None
        and abs(sc.lam - (3 - math.sqrt(5)) / 2) <= 0.05 * (3 - math.sqrt(5)) / 2
        and detect(_centred(np.eye(2), 100), "forward") is None
    )
    trans_ok = all(pliss_transversality(detect(c, "forward"), detect(c, "backward")).passed for c in (diag, cat))
    grid = [10, 20, 40, 80]
    fixtures = {
        "cat": (lambda N: _centred(CAT, N), True),
        "identity": (lambda N: _centred([[1.0]], N), False),
        "lambda=2": (lambda N: _centred([[2.0]], N), True),
        "mixed": (_contracting_then_expanding, False),
    }
    echo = []
    for name, (make, expected) in fixtures.items():
        a = property_A_check_cocycle(make(100)).verdict == "hyperbolic-like"
        b = solution_growth(make, grid, trials=4)["bounded"]
        echo.append(a == b == expected)
    ok = lam_ok and trans_ok and all(echo)
    lams = f"diag {sd.lam:.4f}, cat {sc.lam:.4f}" if sd and sc else "missing splitting"
    report(8, ok, f"lambda {lams}; transversality {trans_ok}; Pliss echo {sum(echo)}/4", t0)


def test_criterion_09_trichotomy_growth():
    t0 = time.perf_counter()
    exp_case = trichotomy_1d(Cocycle.constant([[2.0]], 20), 2).case
    con_case = trichotomy_1d(Cocycle.constant([[0.5]], 20), 2).case
    a = np.where(np.arange(-10, 10) < 0, 2.0, 0.5)
    mix = trichotomy_1d(Cocycle(a[:, None, None], -10), 2)
    N_half = growth_threshold(1.0, 0.5)
    N_one = growth_threshold(1.0, 1.0, N_max=1_000_000)
    ok = (
        exp_case == "expanding"
        and con_case == "contracting"
        and mix.case == "mixed"
        and mix.ordered
        and N_half is not None
        and N_one is None
    )
    report(9, ok, f"cases {exp_case}/{con_case}/{mix.case}(i1={mix.i1}, i2={mix.i2}); G finder gamma=1/2 -> {N_half}, gamma=1 -> {N_one}", t0)


def test_criterion_10_bridge_bounds():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("circle_example", "cat", "contraction", "identity", "henon"):
        rep = randomized_bridge_check(get_map(name), 1000, seed=0)
        ok &= rep.lift_violations == 0 and rep.residual_violations == 0
        parts.append(f"{name}: {rep.lift_violations}+{rep.residual_violations} (ratios {rep.worst_lift_ratio:.2f}, {rep.worst_residual_ratio:.2f})")
    report(10, ok, "violations lift+residual per map, 1000 runs: " + "; ".join(parts), t0)


def test_criterion_11_henon_exploratory():
    t0 = time.perf_counter()
    grid = np.geomspace(1e-10, 1e-6, 5)
    fit = estimate_holder_exponent(get_map("henon"), grid, WindowRule("power", C=1.0, omega=0.5), 4, seed=0)
    table = []
    for d in grid:
        rows = [r for r in fit.table if r["d"] == d]
        eps = [r["epsilon"] for r in rows if math.isfinite(r["epsilon"])]
        worst = f"{max(eps):.2e}" if eps else "nan"
        table.append(f"d={d:.0e} n={rows[0]['n']} worst_eps={worst} failed={len(rows) - len(eps)}")
    for line in table:
        print("  " + line)
    ok = len(fit.table) == 4 * len(grid)
    theta = f"{fit.theta_hat:.3f}" if math.isfinite(fit.theta_hat) else "nan"
    report(11, ok, f"exploratory, completed {len(fit.table)} runs; theta_hat={theta}; " + " | ".join(table), t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
