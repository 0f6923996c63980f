"""Acceptance suite: one test per criterion, at the stated tolerances and sizes.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the summary for one PASS/FAIL line per criterion.
"""
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from wienerchaos.chaos import (
    estimate_critical_index,
    scaled_norm_identity,
    smoothing_norm,
    time_integral_chaos_l2,
)
from wienerchaos.diffusion import bessel_lp_trend, density_mass, flow, kv_kernel, lamperti, model_from_string
from wienerchaos.localtime import (
    HolderExperiment,
    holder_bound_constant,
    holder_bound_terms,
    holder_difference_norm,
    holder_table,
    local_time_chaos_norm,
)
from wienerchaos.mcverify import TestFunctional, ito_verify, make_grid, pairing_lhs_matrix, pairing_rhs, simulate

CATALOG = ("unit", "sqrt1pz2", "sin2")


@pytest.mark.criterion(1, "exact scaling identity, lhs/rhs = 1 within 1e-12 at N = 200")
def test_scaling_identity():
    start = time.perf_counter()
    worst = 0.0
    for text in ("delta@0", "heaviside@0", "logabs"):
        for t, T in ((0.25, 1.0), (0.5, 2.0)):
            for s in (-1.0, -0.4, 0.3):
                lhs, rhs = scaled_norm_identity(text, t, T, s, 200)
                worst = max(worst, abs(lhs / rhs - 1.0))
    assert worst < 1e-12
    assert time.perf_counter() - start < 5.0


@pytest.mark.criterion(2, "time-integral moment 4T n!/(n+1): closed form vs 2-D quadrature within 1e-8")
def test_time_integral_moment():
    start = time.perf_counter()
    for T in (1.0, 2.0):
        for n in range(11):
            closed = time_integral_chaos_l2(n, T)
            quad = time_integral_chaos_l2(n, T, method="quadrature")
            assert closed == pytest.approx(4 * T * math.factorial(n) / (n + 1), rel=1e-15)
            assert abs(quad / closed - 1) < 1e-8, (n, T)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(3, "smoothing identity term by term within 1e-12 (delta@0, s = -0.8, N = 300)")
def test_smoothing_identity():
    pair = smoothing_norm("delta@0", -0.8, 1.0, 300)
    np.testing.assert_allclose(pair.integral_terms, pair.base_terms, rtol=1e-12, atol=0)
    assert abs(pair.ratio - 1) < 1e-12


@pytest.mark.criterion(4, "critical index from N = 5000 tail fits within 0.05")
def test_critical_index_recovery():
    start = time.perf_counter()
    want = {"delta@0": -0.5, "heaviside@0": 0.5, "logabs": 0.5, "pv1x": -0.5}
    for text, s in want.items():
        est = estimate_critical_index(text, 5000, (500, 5000))
        assert abs(est.s_star - s) < 0.05, (text, est.s_star)
    assert time.perf_counter() - start < 60.0


@pytest.mark.criterion(5, "Lamperti map and flow closed forms to 1e-9; density mass 1 within 1e-8")
def test_lamperti_flow_and_mass():
    m = model_from_string("sqrt1pz2")
    z = np.linspace(-5, 5, 201)
    assert np.max(np.abs(lamperti(m).forward(z) - np.arcsinh(z))) < 1e-9
    for u in np.linspace(-3, 3, 25):
        assert abs(flow(m, u) - math.sinh(u)) < 1e-9 * max(1.0, math.cosh(u))
    for name in CATALOG:
        model = model_from_string(name)
        for t in (0.1, 0.5, 1.0):
            assert abs(density_mass(model, t) - 1.0) < 1e-8, (name, t)


def nested_differences(model, n, t, a, h):
    """A_x^n p_t(x, a) by n nested central differences in the start point."""

    @lru_cache(maxsize=None)
    def started(x):
        return model.with_start(x)

    def level(k, x):
        if k == 0:
            return kv_kernel(started(x), 0, t, a)
        return float(model.sigma(np.array(x))) * (level(k - 1, x + h) - level(k - 1, x - h)) / (2 * h)

    return level(n, model.x)


@pytest.mark.criterion(6, "KV kernel vs n-fold finite differences of A, n <= 3, relative error < 1e-4")
def test_kv_kernel_against_finite_differences():
    t = 0.5
    for name in CATALOG:
        model = model_from_string(name)
        for a in (-1.1, -0.45, 0.35, 0.9, 1.6):
            for n in (1, 2, 3):
                k = kv_kernel(model, n, t, a)
                # Richardson on the step removes the h^2 error of the central differences
                fd = (4 * nested_differences(model, n, t, a, 0.01) - nested_differences(model, n, t, a, 0.02)) / 3
                assert abs(fd - k) < 1e-4 * abs(k), (name, a, n, k, fd)


@pytest.mark.criterion(7, "Hoelder bound on 20 combinations, log-log slopes, bound-term tail exponent")
def test_holder_suite():
    start = time.perf_counter()
    pairs = ((0.0, 0.001), (0.2, 0.25), (-0.5, 0.5), (1.0, 0.9))
    configs = (("unit", -0.5, 0.5), ("unit", 0.0, 0.3), ("sqrt1pz2", -0.2, 0.5), ("sin2", 0.1, 0.2),
               ("unit", 0.3, 0.1))
    combos = 0
    for name, s, beta in configs:
        for row in holder_table(HolderExperiment(model_from_string(name), s, beta, pairs, N=2000)):
            assert 0 < row.norm <= row.bound, (name, s, beta, row)
            combos += 1
    assert combos == 20

    seps = np.geomspace(1e-3, 1e-1, 7)
    unit = model_from_string("unit")
    for s in (-0.2, 0.0, 0.2):
        beta = 0.9 * (0.5 - s)
        v = holder_difference_norm(HolderExperiment(unit, s, beta, tuple((0.2, 0.2 + d) for d in seps), N=2000))
        slope = np.polyfit(np.log(seps), np.log(v), 1)[0]
        assert slope >= beta - 0.05, (s, beta, slope)

    n = np.arange(1000, 4001)
    for s, beta in ((-0.5, 0.5), (0.0, 0.3), (0.1, 0.2), (0.3, 0.1), (-1.0, 0.9)):
        t = holder_bound_terms(s, beta, 1.0, 4000)
        slope = np.polyfit(np.log(n), np.log(t[1000:]), 1)[0]
        assert abs(slope - (s + beta - 1.5)) < 0.1, (s, beta, slope)
        assert not holder_bound_constant(s, beta, 1.0, 2000).divergent
    assert time.perf_counter() - start < 600.0


@pytest.mark.criterion(8, "Brownian local time: mean^2 = 2/pi, Cauchy at s = 0.4, divergent at s = 0.6")
def test_local_time_norm():
    unit = model_from_string("unit")
    r = local_time_chaos_norm(unit, 0.0, 0.4, 4000)
    assert abs(r.mean_square - 2 / math.pi) < 1e-8
    assert np.all(np.abs(r.gaps) < 1e-4)
    assert not r.divergent
    assert local_time_chaos_norm(unit, 0.0, 0.6, 4000).divergent


@pytest.mark.criterion(9, "duality pairing matrix within 3 stderr at M = 1e6")
def test_pairing_matrix():
    start = time.perf_counter()
    unit = model_from_string("unit")
    ens = simulate(unit, 2024, 1_000_000, make_grid(1.0, 256))
    Js = [TestFunctional.constant(), TestFunctional.hermite(1), TestFunctional.hermite(2)]
    res = pairing_lhs_matrix(ens, ["delta@0", "heaviside@0", "logabs"], (0.05, 0.025), Js)
    assert len(res) == 9
    for (text, label), est in res.items():
        J = next(j for j in Js if j.label == label)
        rhs = pairing_rhs(text, unit, J, 1.0)
        assert abs(est.value - rhs) < 3 * est.stderr, (text, label, est.value, rhs, est.stderr)
    assert time.perf_counter() - start < 300.0


@pytest.mark.criterion(10, "Ito formula residual within 3 stderr; oracles agree to 1e-8")
@pytest.mark.parametrize("case", ["tanaka", "pv"])
@pytest.mark.parametrize("J", ["1", "w"])
def test_ito_formula(case, J):
    unit = model_from_string("unit")
    rep = ito_verify(unit, case, TestFunctional.constant() if J == "1" else TestFunctional.increment(1, 1.0),
                     M=500_000, eps=(0.05, 0.025), K=256, seed=0)
    assert rep.oracle_gap < 1e-8, rep.oracles
    assert rep.passed, (rep.residual, rep.stderr)


@pytest.mark.criterion(11, "Bessel kernel L_p trend at s = -0.5: finite at p = 1.8, divergent at p = 2.2")
def test_bessel_lp_threshold():
    below, above = bessel_lp_trend(-0.5, 1.8), bessel_lp_trend(-0.5, 2.2)
    assert below.finite and below.exponent > 0
    assert not above.finite and above.exponent < 0
    # shell exponent 1 - p (1 + s)
    assert below.exponent == pytest.approx(0.1, abs=0.02)
    assert above.exponent == pytest.approx(-0.1, abs=0.02)
    # each shrinking of the cut-off adds less below the threshold (geometric, summable) and more above it
    assert np.all(np.diff(np.diff(below.partial_integrals)) < 0)
    assert np.all(np.diff(np.diff(above.partial_integrals)) > 0)
