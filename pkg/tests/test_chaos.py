import json
import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from scipy import integrate

from wienerchaos.chaos import (
    ChaosVector,
    SobolevIndex,
    estimate_critical_index,
    expand,
    fit_tail_exponent,
    format_pairing,
    scaled_norm_identity,
    smoothing_norm,
    sobolev_norm,
    time_integral_chaos_l2,
)

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def test_expand_delta_low_orders():
    v = expand("delta@0", 1.0, 1.0, 4)
    np.testing.assert_allclose(v.pairings(), [PHI0, 0.0, -PHI0, 0.0, 3 * PHI0], rtol=1e-14, atol=1e-17)
    assert v.N == 4
    assert v.spec_text == "delta@0"


def test_expand_log_low_orders():
    a = expand("logabs", 1.0, 1.0, 4).pairings()
    assert a[2] == pytest.approx(1.0, rel=1e-9)
    assert a[4] == pytest.approx(-2.0, rel=1e-9)
    assert abs(a[1]) < 1e-12 and abs(a[3]) < 1e-12


@pytest.mark.parametrize("text", ["delta@0", "heaviside@0.3", "logabs", "pv1x"])
def test_expand_depends_only_on_horizon(text):
    a = expand(text, 0.25, 1.0, 30)
    b = expand(text, 1.0, 1.0, 30)
    np.testing.assert_array_equal(a.normalized, b.normalized)
    assert a.t == 0.25 and a.T == 1.0


def test_expand_horizon_scaling():
    # Lambda(w(T)) with T = 4 pairs like Lambda(2 Z)
    v = expand("delta@1", 1.0, 4.0, 3)
    u = 0.5
    want = np.array([1.0, u, u * u - 1, u**3 - 3 * u]) * math.exp(-u * u / 2) * PHI0 / 2.0
    np.testing.assert_allclose(v.pairings(), want, rtol=1e-13)


def test_expand_rejects_bad_times():
    with pytest.raises(ValueError):
        expand("delta@0", 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        expand("delta@0", 2.0, 1.0, 3)


def test_chaos_vector_invariants():
    with pytest.raises(ValueError):
        ChaosVector(np.array([1.0, np.inf]), np.zeros(2))
    with pytest.raises(ValueError):
        ChaosVector(np.array([1.0, 0.0]), np.array([0.0, -1.0]))
    v = ChaosVector.from_pairings([1.0, 2.0, 3.0])
    # ||J_n||^2 = a_n^2 / n!
    np.testing.assert_allclose(v.l2_terms, [1.0, 4.0, 4.5])


def test_norm_examples():
    assert sobolev_norm(ChaosVector.zeros(10), 1.5).value == 0.0
    assert sobolev_norm(ChaosVector.from_pairings([1.0, 0.0, 0.0]), 7.0).value == 1.0
    with pytest.raises(ValueError):
        SobolevIndex(0.5, p=4)


def test_delta_norm_divergence_flag():
    v = expand("delta@0", 1.0, 1.0, 4000)
    assert sobolev_norm(v, -0.6).divergent is False
    assert math.isfinite(sobolev_norm(v, -0.6).tail_bound)
    for s in (-0.5, -0.4, 0.0):
        r = sobolev_norm(v, s)
        assert r.divergent is True
        assert r.tail_bound == math.inf


def test_delta_partial_sums_grow_at_zero_index():
    v = expand("delta@0", 1.0, 1.0, 4000)
    sums = [sobolev_norm(v.truncate(N), 0.0).squared for N in (250, 1000, 4000)]
    # divergent like sqrt(N): each fourfold increase roughly doubles the growth
    assert sums[2] - sums[1] > 1.5 * (sums[1] - sums[0])


def test_finite_chaos_is_not_flagged():
    v = ChaosVector.from_pairings([1.0, 0.5, 0.25] + [0.0] * 40)
    r = sobolev_norm(v, 3.0)
    assert r.divergent is False
    assert r.tail_bound == 0.0


def test_parseval_for_sine():
    v = expand("smooth:sin", 1.0, 1.0, 64)
    want = integrate.quad(lambda z: math.sin(z) ** 2 * math.exp(-z * z / 2) * PHI0, -40, 40, epsabs=1e-15)[0]
    assert want == pytest.approx((1 - math.exp(-2)) / 2, rel=1e-13)
    assert math.fsum(v.l2_terms) == pytest.approx(want, rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=60),
    st.floats(-3, 3),
    st.floats(0, 3),
)
def test_norm_monotone_in_index(coeffs, s1, ds):
    v = ChaosVector(np.array(coeffs), np.zeros(len(coeffs)))
    assert sobolev_norm(v, s1).squared <= sobolev_norm(v, s1 + ds).squared


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-5, 5), st.floats(-2, 2))
@example([1.0], 1.768981908316855e-163, 0.0)  # squares underflow
def test_norm_homogeneous(coeffs, k, s):
    v = ChaosVector(np.array(coeffs), np.zeros(len(coeffs)))
    assert sobolev_norm(v.scaled(k), s).value == pytest.approx(abs(k) * sobolev_norm(v, s).value, rel=1e-12, abs=1e-300)


def test_scaled_identity_examples():
    lhs, rhs = scaled_norm_identity("delta@0", 0.25, 1.0, -1.0, 200)
    base = sobolev_norm(expand("delta@0", 1.0, 1.0, 200), -1.0).value
    assert lhs == pytest.approx(2 * base, rel=1e-13)
    assert rhs == pytest.approx(2 * base, rel=1e-13)
    lhs, rhs = scaled_norm_identity("heaviside@0", 1.0, 1.0, 0.9, 50)
    assert lhs / rhs == 1.0
    lhs, rhs = scaled_norm_identity("logabs", 0.04, 1.0, 0.3, 500)
    assert abs(lhs / rhs - 1) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["delta@0", "heaviside@0.4", "logabs", "pv1x", "xlogabs", "delta@-1"]),
    st.floats(0.01, 1.0),
    st.floats(0.1, 4.0),
    st.floats(-1.5, 1.5),
)
def test_scaled_identity_property(text, frac, T, s):
    lhs, rhs = scaled_norm_identity(text, frac * T, T, s, 80)
    assert abs(lhs / rhs - 1) < 1e-12


def test_time_integral_moment_examples():
    assert time_integral_chaos_l2(0, 1.0) == 4.0
    assert time_integral_chaos_l2(1, 2.0) == 4.0
    assert time_integral_chaos_l2(5, 1.0) == pytest.approx(80.0, rel=1e-15)
    assert time_integral_chaos_l2(5, 1.0, method="quadrature") == pytest.approx(80.0, rel=1e-8)
    with pytest.raises(ValueError):
        time_integral_chaos_l2(2, 1.0, method="bogus")


def test_time_integral_moment_midpoint_grid():
    # E[H_n(Z_t) H_n(Z_s)] = n! (t/s)^(n/2) for t < s; integrate the kernel on a fine midpoint grid
    n, T = 2, 1.5
    k = 4000
    tau = (np.arange(k) + 0.5) / k * math.sqrt(T)
    t = tau * tau
    w = 2 * tau * math.sqrt(T) / k  # dt = 2 tau dtau
    kern = np.minimum.outer(t, t) / np.maximum.outer(t, t)
    val = math.factorial(n) * float(w @ (kern ** (n / 2) / np.sqrt(np.outer(t, t))) @ w)
    assert val == pytest.approx(time_integral_chaos_l2(n, T), rel=2e-3)


def test_smoothing_examples():
    p = smoothing_norm("delta@0", -0.8, 1.0, 300)
    assert abs(p.ratio - 1) < 1e-12
    assert math.isfinite(p.integral_sq) and p.divergent is False
    np.testing.assert_allclose(p.integral_terms, p.base_terms, rtol=1e-13, atol=0)
    q = smoothing_norm("delta@0", -0.4, 1.0, 2000)
    assert q.divergent is True
    assert q.tail_bound == math.inf
    a0 = expand("heaviside@0.2", 2.0, 2.0, 0).pairings()[0]
    z = smoothing_norm("heaviside@0.2", 0.7, 2.0, 0)
    assert z.integral_sq == pytest.approx(4 * 4 * a0**2, rel=1e-14)
    assert z.base_sq == pytest.approx(4 * 4 * a0**2, rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["delta@0", "heaviside@0", "logabs", "pv1x"]), st.floats(-2, 0.4), st.floats(0.2, 3))
def test_smoothing_identity_property(text, s, T):
    p = smoothing_norm(text, s, T, 120)
    assert abs(p.ratio - 1) < 1e-12


def test_critical_index_examples():
    window = (500, 5000)
    want = {"delta@0": -0.5, "heaviside@0": 0.5, "logabs": 0.5, "pv1x": -0.5}
    for text, s in want.items():
        est = estimate_critical_index(text, 5000, window)
        assert abs(est.s_star - s) < 0.05
        assert est.residual >= 0
        assert est.window == window
    assert estimate_critical_index("delta@0", 2000).parity == "even"
    assert estimate_critical_index("heaviside@0", 2000).parity == "odd"
    assert estimate_critical_index("heaviside@0.5", 2000).parity == "all"


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-2, 2), st.integers(200, 2000))
def test_tail_fit_recovers_power_law(alpha, logc, N):
    n = np.arange(N + 1, dtype=float)
    terms = np.exp(logc) * np.maximum(n, 1.0) ** (-alpha)
    est = fit_tail_exponent(terms)
    assert est.alpha == pytest.approx(alpha, abs=1e-9)
    assert est.s_star == pytest.approx(alpha - 1, abs=1e-9)


def test_tail_fit_errors():
    with pytest.raises(ValueError):
        fit_tail_exponent(np.zeros(100))
    with pytest.raises(ValueError):
        fit_tail_exponent(np.ones(100), window=(95, 99))
    with pytest.raises(ValueError):
        fit_tail_exponent(np.ones(100), window=(0, 200))


def test_csv_and_json_forms():
    v = expand("delta@0", 1.0, 1.0, 8)
    lines = v.to_csv().strip().splitlines()
    assert lines[0] == "n,pairing,l2_term,err_est"
    assert len(lines) == 10
    d = json.loads(v.to_json())
    assert d["spec"] == "delta@0" and d["N"] == 8 and len(d["terms"]) == 9


def test_format_pairing_beyond_double_range():
    v = expand("delta@0", 1.0, 1.0, 400)
    text = format_pairing(float(v.normalized[400]), 400)
    mant, exp = text.split("e")
    # a_400 = H_400(0) phi(0) = 399!! phi(0)
    lg = math.lgamma(401) - 200 * math.log(2) - math.lgamma(201) + math.log(PHI0)
    assert int(exp) == math.floor(lg / math.log(10))
    assert float(mant) == pytest.approx(10 ** (lg / math.log(10) - int(exp)), rel=1e-9)
