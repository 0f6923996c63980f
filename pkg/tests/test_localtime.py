import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import erfc

from wienerchaos.diffusion import model_from_string
from wienerchaos.localtime import (
    HolderExperiment,
    choose_truncation,
    cross_kernel_term_quadrature,
    cross_kernel_terms,
    density_holder_check,
    holder_bound_constant,
    holder_bound_terms,
    holder_difference_norm,
    holder_rows_csv,
    holder_table,
    holder_term_quadrature,
    holder_terms,
    iterated_integral_l2,
    local_time_chaos_norm,
    occupation_mean,
)


@pytest.fixture(scope="module")
def unit():
    return model_from_string("unit")


@pytest.fixture(scope="module")
def sqrt_model():
    return model_from_string("sqrt1pz2")


def brownian_occupation_mean(y):
    """int_0^1 (2 pi t)^{-1/2} exp(-y^2 / 2t) dt in closed form."""
    y = abs(y)
    return math.sqrt(2 / math.pi) * math.exp(-y * y / 2) - y * erfc(y / math.sqrt(2))


def test_iterated_integral_examples():
    assert iterated_integral_l2(0) == 1.0
    assert iterated_integral_l2(2) == pytest.approx(0.5, rel=1e-15)
    assert iterated_integral_l2(3, 0.5) == pytest.approx(0.5**3 / 6, rel=1e-15)
    with pytest.raises(ValueError):
        iterated_integral_l2(-1)


def test_occupation_mean_closed_form(unit):
    for y in (0.0, 0.3, -1.2, 2.5):
        assert occupation_mean(unit, y) == pytest.approx(brownian_occupation_mean(y), rel=1e-12)
    assert occupation_mean(unit, 0.0) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(-4, 4), st.floats(0.1, 3))
def test_occupation_mean_closed_form_any_level(y, T):
    # includes levels very close to the start, where the integrand has a thin layer
    m = model_from_string("unit")
    c = abs(y) / math.sqrt(T)
    want = math.sqrt(T) * (math.sqrt(2 / math.pi) * math.exp(-c * c / 2) - c * erfc(c / math.sqrt(2)))
    assert occupation_mean(m, y, T) == pytest.approx(want, rel=1e-11, abs=1e-300)


def test_occupation_mean_against_density_quadrature(sqrt_model):
    from wienerchaos.diffusion import transition_density

    y = 0.7
    sig = math.sqrt(1 + y * y)
    want = sig * integrate.quad(lambda t: transition_density(sqrt_model, t, y), 0, 1, epsabs=1e-13)[0]
    assert occupation_mean(sqrt_model, y) == pytest.approx(want, rel=1e-10)


def test_zeroth_chaos_is_squared_mean(unit, sqrt_model):
    r = local_time_chaos_norm(unit, 0.0, 0.0, 0)
    assert abs(r.value**2 - 2 / math.pi) < 1e-8
    for y, s in ((0.4, -1.3), (-0.8, 0.3)):
        r = local_time_chaos_norm(sqrt_model, y, s, 0)
        assert r.value == pytest.approx(occupation_mean(sqrt_model, y), rel=1e-12)


def test_local_time_norm_convergence_and_flag(unit):
    r = local_time_chaos_norm(unit, 0.0, 0.4, 4000)
    assert abs(r.mean_square - 2 / math.pi) < 1e-8
    assert not r.divergent
    assert np.all(np.abs(r.gaps) < 1e-4)
    assert r.estimate is not None and abs(r.estimate.s_star - 0.5) < 0.05
    assert local_time_chaos_norm(unit, 0.0, 0.6, 4000).divergent


def test_local_time_second_moment(unit):
    # E[(int_0^1 delta_0(w_t) dt)^2] = E[L^2] = E[|Z|^2] = 1 for Brownian local time at the start
    r = local_time_chaos_norm(unit, 0.0, 0.0, 4000)
    tail = r.estimate.tail_bound(0.0, 4000)
    assert r.value**2 + tail == pytest.approx(1.0, abs=2e-3)


def test_reduced_and_direct_quadrature_agree(unit):
    reduced = local_time_chaos_norm(unit, 0.2, 0.0, 3).terms
    direct = np.array([cross_kernel_term_quadrature(0.2, 0.2, n) for n in range(4)])
    np.testing.assert_allclose(reduced, direct, rtol=1e-8, atol=1e-12)


def test_cross_kernel_off_diagonal_against_quadrature():
    # K_n(a, b) integrates g^a over the earlier time, so it is not symmetric in (a, b)
    K = cross_kernel_terms([0.1, -0.4], 1)
    for n in range(2):
        assert K[0, 1, n] == pytest.approx(cross_kernel_term_quadrature(0.1, -0.4, n), rel=1e-8, abs=1e-12)
        assert K[1, 0, n] == pytest.approx(cross_kernel_term_quadrature(-0.4, 0.1, n), rel=1e-8, abs=1e-12)


def test_holder_terms_two_routes(sqrt_model):
    fast = holder_terms(sqrt_model, 0.1, 0.3, 2)
    slow = [holder_term_quadrature(sqrt_model, 0.1, 0.3, n) for n in range(3)]
    np.testing.assert_allclose(fast, slow, rtol=1e-8, atol=1e-12)
    assert np.all(holder_terms(sqrt_model, 0.1, 0.3, 200) >= -1e-15)


def test_holder_examples(unit, sqrt_model):
    same = HolderExperiment(unit, 0.0, 0.4, ((0.3, 0.3),), N=50)
    assert holder_difference_norm(same)[0] == 0.0
    ab = holder_difference_norm(HolderExperiment(sqrt_model, 0.0, 0.3, ((0.1, 0.5), (0.5, 0.1)), N=200))
    assert ab[0] == pytest.approx(ab[1], rel=1e-13)
    exp = HolderExperiment(unit, 0.0, 0.4, ((0.0, 0.1),), N=2000)
    v = holder_difference_norm(exp)[0]
    c = holder_bound_constant(0.0, 0.4, 1.0, 2000).value
    assert 0 < v <= c * 0.1**0.4


def test_holder_experiment_validation(unit):
    with pytest.raises(ValueError):
        HolderExperiment(unit, 0.2, 0.3, ((0.0, 0.1),))
    with pytest.raises(ValueError):
        HolderExperiment(unit, -2.0, 1.2, ((0.0, 0.1),))


@pytest.mark.parametrize("s", [-0.2, 0.0, 0.2])
def test_holder_log_log_slope(unit, s):
    beta = 0.9 * (0.5 - s)
    seps = np.geomspace(1e-3, 1e-1, 5)
    exp = HolderExperiment(unit, s, beta, tuple((0.2, 0.2 + d) for d in seps), N=1000)
    v = holder_difference_norm(exp)
    slope = np.polyfit(np.log(seps), np.log(v), 1)[0]
    assert slope >= beta - 0.05


def test_holder_table_and_csv(sqrt_model):
    exp = HolderExperiment(sqrt_model, -0.1, 0.4, ((0.0, 0.05), (0.3, 0.1)), N=400)
    rows = holder_table(exp)
    assert all(0 < r.ratio <= 1 for r in rows)
    lines = holder_rows_csv(rows).strip().splitlines()
    assert lines[0] == "y,z,s,beta,norm,bound,ratio"
    assert len(lines) == 3


def test_bound_terms_tail_exponent():
    for s, beta in ((0.1, 0.3), (-0.5, 0.5), (0.0, 0.05)):
        t = holder_bound_terms(s, beta, 1.0, 2000)
        n = np.arange(200, 2001)
        slope = np.polyfit(np.log(n), np.log(t[200:]), 1)[0]
        assert abs(slope - (s + beta - 1.5)) < 0.1


def test_bound_terms_against_direct_formula():
    s, beta, lam = 0.1, 0.3, 2.0
    t = holder_bound_terms(s, beta, lam, 20)
    c2 = 1 / (math.pi * lam ** (beta / 2))
    for n in range(21):
        want = (c2**2 / (1 - beta) * (1 + n) ** s * 2 ** (n + beta + 1)
                * math.gamma((n + beta + 1) / 2) ** 2 / (math.factorial(n) * (n - beta + 1)))
        assert t[n] == pytest.approx(want, rel=1e-12)


def test_bound_small_beta_limit_and_monotone():
    vals = [holder_bound_constant(0.0, b, 1.0, 2000).value for b in (1e-3, 1e-2, 0.1, 0.2, 0.3)]
    assert np.all(np.diff(vals) > 0)
    # beta -> 0+ has a finite limit: the two smallest betas are close
    assert abs(vals[1] - vals[0]) < 0.02 * vals[0]


def test_bound_divergence_threshold():
    ok = holder_bound_constant(0.2, 0.29, 1.0, 2000)
    assert not ok.divergent and math.isfinite(ok.value)
    bad = holder_bound_constant(0.2, 0.31, 1.0, 2000)
    assert bad.divergent and bad.value == math.inf


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.0, 0.3), st.floats(0.02, 0.9))
def test_truncation_rule(s, beta):
    if s + beta >= 0.49:
        return
    N, ratio = choose_truncation(s, beta, n_max=3000)
    assert 1 <= N <= 3000
    if N < 3000:
        assert ratio < 1e-6


def test_truncation_rule_rejects_divergent():
    with pytest.raises(ValueError):
        choose_truncation(0.3, 0.3)


def test_density_holder_unit(unit):
    pts = np.linspace(-2, 2, 5)
    pairs = [(y, y + d) for y in pts for d in (1e-3, 1e-2, 1e-1)] + [(0.5, 0.5)]
    rep = density_holder_check(unit, pairs, 0.9, N=200)
    assert rep.bounded and rep.dominated
    assert rep.deltas[-1] == 0.0
    want = [abs(brownian_occupation_mean(y) - brownian_occupation_mean(z)) for y, z in pairs]
    np.testing.assert_allclose(rep.deltas, want, rtol=1e-8, atol=1e-15)


def test_density_holder_other_models():
    for name in ("sqrt1pz2", "sin2"):
        rep = density_holder_check(model_from_string(name), [(0.1, 0.2), (0.3, 0.31), (-1.0, -0.999)], 0.9, N=200)
        assert rep.bounded and rep.dominated
    with pytest.raises(ValueError):
        density_holder_check(model_from_string("unit"), [(0.0, 0.1)], 1.0)
