import math

import numpy as np
import pytest

from holsh.cocycle import Cocycle
from holsh.dichotomy import (
    WindowTooShort,
    bounded_solution_check,
    detect,
    growth_function,
    growth_threshold,
    log_growth_function,
    pliss_transversality,
    property_A_check,
    property_A_check_cocycle,
    reduce,
    reduction_norm_bounds,
    reduction_residual,
    solution_growth,
    trichotomy_1d,
)
from holsh.maps import get_map

CAT = np.array([[2.0, 1.0], [1.0, 1.0]])
LAM_CAT = (3 - math.sqrt(5)) / 2


def centred(A, N):
    return Cocycle.constant(A, 2 * N, -N)


def mixed(N):
    """Expanding for k < 0, contracting after."""
    a = np.where(np.arange(-N, N) < 0, 2.0, 0.5)
    return Cocycle(a[:, None, None], -N)


def contracting_then_expanding(N):
    a = np.where(np.arange(-N, N) < 0, 0.5, 2.0)
    return Cocycle(a[:, None, None], -N)


def angle_between(a, b):
    return float(np.arccos(min(1.0, abs(a @ b) / np.linalg.norm(a) / np.linalg.norm(b))))


def test_diagonal_splitting():
    sp = detect(centred(np.diag([0.5, 2.0]), 100), "forward")
    assert sp is not None and sp.dim_s == 1 and sp.dim_u == 1
    assert sp.lam == pytest.approx(0.5, rel=0.02)
    assert 1.0 <= sp.C <= 1.2
    S, U = sp.at(0)
    assert angle_between(S[:, 0], np.array([1.0, 0.0])) < 1e-8
    assert angle_between(U[:, 0], np.array([0.0, 1.0])) < 1e-8


def test_cat_splitting():
    c = centred(CAT, 100)
    for half in ("forward", "backward"):
        sp = detect(c, half)
        assert sp is not None
        assert sp.lam == pytest.approx(LAM_CAT, rel=0.05)
        S, U = sp.at(0)
        assert S.shape[1] + U.shape[1] == 2
        assert angle_between(CAT @ S[:, 0], S[:, 0]) < 1e-6


def test_identity_has_no_splitting():
    c = centred(np.eye(2), 100)
    assert detect(c, "forward") is None and detect(c, "backward") is None


def test_short_window():
    with pytest.raises(WindowTooShort):
        detect(Cocycle.constant(CAT, 20), "forward", T=30)


@pytest.mark.parametrize("A", [CAT, np.diag([0.5, 2.0])])
def test_lambda_stable_under_horizon(A):
    c = centred(A, 100)
    full, half = detect(c, "forward", T=30), detect(c, "forward", T=15)
    assert abs(half.lam - full.lam) < 0.1 * full.lam


def test_transversality_examples():
    cat = centred(CAT, 100)
    tr = pliss_transversality(detect(cat, "forward"), detect(cat, "backward"))
    # [[2,1],[1,1]] is symmetric, so its eigenvectors are orthogonal
    assert tr.passed and tr.angle == pytest.approx(math.pi / 2, abs=1e-8) and tr.defect_dim == 0
    diag = centred(np.diag([0.5, 2.0]), 100)
    tr = pliss_transversality(detect(diag, "forward"), detect(diag, "backward"))
    assert tr.passed and tr.angle == pytest.approx(math.pi / 2, abs=1e-8)
    two = centred([[2.0]], 100)
    f, b = detect(two, "forward"), detect(two, "backward")
    assert f.dim_s == 0 and b.dim_u == 1
    assert pliss_transversality(f, b).passed
    assert pliss_transversality(None, b).status == "A1 fails"


def test_bounded_solutions():
    assert bounded_solution_check(centred([[2.0]], 60), "forward") <= 1 + 1e-9
    for N in (10, 40):
        assert bounded_solution_check(Cocycle.constant([[1.0]], N), "forward") == pytest.approx(N / 2, abs=1e-6)
    grid = [10, 20, 40, 80, 160]
    g = solution_growth(lambda N: centred(CAT, N), grid, trials=4)
    assert g["bounded"] and max(g["L_hat"]) <= 4


def test_pliss_echo():
    grid = [10, 20, 40, 80]
    fixtures = {
        "cat": (lambda N: centred(CAT, N), True),
        "identity": (lambda N: centred([[1.0]], N), False),
        "expanding": (lambda N: centred([[2.0]], N), True),
        "mixed": (contracting_then_expanding, False),
    }
    for name, (make, hyperbolic) in fixtures.items():
        rep = property_A_check_cocycle(make(100))
        growth = solution_growth(make, grid, trials=4)
        assert (rep.verdict == "hyperbolic-like") == hyperbolic, name
        assert growth["bounded"] == hyperbolic, name
    rep = property_A_check_cocycle(contracting_then_expanding(100))
    assert rep.A1_fwd and rep.A1_bwd and not rep.A2


def test_trichotomy_fixtures():
    assert trichotomy_1d(Cocycle.constant([[2.0]], 20), 2).case == "expanding"
    assert trichotomy_1d(Cocycle.constant([[0.5]], 20), 2).case == "contracting"
    t = trichotomy_1d(mixed(10), 2)
    assert t.case == "mixed" and t.ordered and t.i1 < t.i2
    assert trichotomy_1d(Cocycle.constant([[1.0]], 20), 2).case == "none"


def test_trichotomy_at_growth_threshold():
    # a 1-D cocycle in the bounded regime splits at the N the finder returns
    rng = np.random.default_rng(0)
    a = np.exp(rng.uniform(0.3, 1.0, 400))
    c = Cocycle(a[:, None, None])
    N = growth_threshold(1.0, 0.5)
    assert trichotomy_1d(c, N).case != "none"


def test_growth_function():
    N = 100
    b = math.sqrt(201)
    assert growth_function(1.0, 0.5, N) == pytest.approx((1 / b) * (1 + 1 / b) ** 98, rel=1e-12)
    assert growth_function(1.0, 0.5, N) > 2
    Nstar = growth_threshold(1.0, 0.5)
    assert Nstar is not None and Nstar <= 100
    assert growth_function(1.0, 0.5, Nstar) > 2 >= growth_function(1.0, 0.5, Nstar - 1)
    assert growth_threshold(1.0, 1.0) is None
    assert growth_function(2.0, 0.7, 2) == pytest.approx(1 / (2 * 5 ** 0.7), rel=1e-14)
    assert np.isfinite(log_growth_function(1.0, 0.1, 1e12))


def test_reduction_examples():
    red = reduce(Cocycle.constant(np.diag([0.5, 2.0]), 10), [1.0, 0.0])
    assert np.allclose(red.lam, 0.5) and np.allclose(np.abs(red.B), 2.0) and not np.any(red.D)
    e = np.array([1 + math.sqrt(5), 2.0]) / np.linalg.norm([1 + math.sqrt(5), 2.0])
    red = reduce(Cocycle.constant(CAT, 10), e)
    assert np.allclose(red.lam, (3 + math.sqrt(5)) / 2, rtol=1e-12)
    assert np.allclose(np.abs(red.B[:, 0, 0]), LAM_CAT, rtol=1e-10)
    assert np.max(np.abs(red.D)) < 1e-10


def test_reduction_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mats = []
        while len(mats) < 12:
            A = rng.uniform(-2, 2, (3, 3))
            if np.linalg.cond(A) < 50:
                mats.append(A)
        c = Cocycle(np.array(mats))
        e0 = rng.standard_normal(3)
        red = reduce(c, e0 / np.linalg.norm(e0))
        assert reduction_residual(c, red, rng.standard_normal(3), rng.standard_normal((12, 3))) < 1e-10
        assert max(reduction_norm_bounds(red).values()) < c.R


def test_property_A_maps(circle):
    assert property_A_check(get_map("cat"), [0.1, 0.3]).verdict == "hyperbolic-like"
    ident = property_A_check(get_map("identity"), [0.1, 0.3])
    assert not ident.A1_fwd and not ident.A1_bwd and ident.exit_code == 1
    u = property_A_check(circle, [0.0])
    assert not u.A1_fwd and not u.A1_bwd
