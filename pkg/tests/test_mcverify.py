import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import ndtr

from wienerchaos.diffusion import model_from_string, transition_density
from wienerchaos.mcverify import (
    PathEnsemble,
    TestFunctional,
    batch_summaries,
    ito_verify,
    make_grid,
    mc_local_time,
    pairing_lhs,
    pairing_lhs_matrix,
    pairing_rhs,
    pairing_rhs_time,
    parse_functional,
    richardson_weights,
    simulate,
)
from wienerchaos.distcat import parse_spec

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


@pytest.fixture(scope="module")
def unit():
    return model_from_string("unit")


@pytest.fixture(scope="module")
def sqrt_model():
    return model_from_string("sqrt1pz2")


@pytest.fixture(scope="module")
def pairing_matrix(unit):
    ens = simulate(unit, 1, 50_000, make_grid(1.0, 256))
    Js = [TestFunctional.constant(), TestFunctional.hermite(1), TestFunctional.hermite(2)]
    return Js, pairing_lhs_matrix(ens, ["delta@0", "heaviside@0", "logabs"], (0.1, 0.05), Js)


# --- grids and paths ------------------------------------------------------------


def test_graded_grid():
    g = make_grid(2.0, 8)
    assert g[0] == 0.0 and g[-1] == 2.0
    np.testing.assert_allclose(g, 2.0 * (np.arange(9) / 8) ** 2)
    # every other point is the grid of half the steps
    np.testing.assert_array_equal(g[::2], make_grid(2.0, 4))
    np.testing.assert_allclose(make_grid(1.0, 4, "uniform"), [0, 0.25, 0.5, 0.75, 1.0])


@pytest.mark.parametrize("args", [(0.0, 4), (1.0, 3), (1.0, 0), (1.0, 4, "geometric")])
def test_grid_rejects(args):
    with pytest.raises(ValueError):
        make_grid(*args)


def test_ensemble_rejects(unit):
    g = make_grid(1.0, 4)
    with pytest.raises(ValueError):
        PathEnsemble(unit, -1, 10, g)
    with pytest.raises(ValueError):
        PathEnsemble(unit, 0, 0, g)
    with pytest.raises(ValueError):
        PathEnsemble(unit, 0, 10, g, batch_size=3, antithetic=True)
    with pytest.raises(ValueError):
        PathEnsemble(unit, 0, 10, [0.0, 0.5, 0.4])
    with pytest.raises(ValueError):
        PathEnsemble(unit, 0, 10, make_grid(2.0, 4))


def test_batches_are_reproducible(unit):
    g = make_grid(1.0, 8)
    a = simulate(unit, 7, 2500, g, batch_size=1000)
    b = simulate(unit, 7, 2500, g, batch_size=1000)
    assert a.n_batches == 3
    np.testing.assert_array_equal(a.batch(1).w, b.batch(1).w)
    # batches are keyed by index, so they can be generated in any order
    last = a.batch(2)
    assert last.w.shape == (500, 9)
    np.testing.assert_array_equal(last.w, list(b.batches())[2].w)
    assert not np.array_equal(a.batch(0).w, simulate(unit, 8, 2500, g, batch_size=1000).batch(0).w)
    with pytest.raises(IndexError):
        a.batch(3)


def test_terminal_variance(unit):
    M = 40_000
    ens = simulate(unit.with_start(0.3), 3, M, make_grid(1.0, 16))
    xT = np.concatenate([b.x[:, -1] for b in ens.batches()])
    assert abs(xT.mean() - 0.3) < 4 / math.sqrt(M)
    assert abs(xT.var() - 1.0) < 4 * math.sqrt(2 / M)
    np.testing.assert_array_equal(ens.batch(0).x[:, 0], 0.3)


def test_lamperti_exact_paths(sqrt_model):
    # sigma(z) = sqrt(1 + z^2) started at 0 gives X_t = sinh(w_t)
    ens = simulate(sqrt_model, 4, 40_000, make_grid(1.0, 8))
    b = ens.batch(0)
    np.testing.assert_allclose(b.x, np.sinh(b.w), rtol=1e-9, atol=1e-12)
    x = np.concatenate([bb.x[:, -1] for bb in ens.batches()])
    want = integrate.quad(lambda z: math.sinh(z) ** 2 * PHI0 * math.exp(-z * z / 2), -40, 40, epsabs=1e-13)[0]
    assert want == pytest.approx((math.e**2 - 1) / 2, rel=1e-10)
    se = math.sqrt(np.var(x * x) / x.size)
    assert abs(np.mean(x * x) - want) < 4 * se


def test_sanity_and_antithetic(unit):
    g = make_grid(1.0, 32)
    assert simulate(unit, 5, 20_000, g).sanity().ok
    anti = simulate(unit, 5, 20_000, g, batch_size=10_000, antithetic=True)
    b = anti.batch(0)
    np.testing.assert_array_equal(b.w[:5000], -b.w[5000:])
    assert abs(b.w[:, -1].mean()) < 1e-12
    assert anti.sanity().ok


def test_batch_summaries(unit):
    rows = batch_summaries(simulate(unit, 0, 2500, make_grid(1.0, 4), batch_size=1000))
    assert [r["paths"] for r in rows] == [1000, 1000, 500]
    assert set(rows[0]) == {"batch", "paths", "mean_wT", "var_wT", "mean_XT", "max_abs_w"}


# --- extrapolation weights and test functionals ------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4, unique=True), st.floats(-3, 3))
def test_richardson_removes_eliminated_orders(h, c):
    h = sorted(h, reverse=True)
    if min(np.diff(h[::-1])) < 1e-3:
        return
    orders = tuple(range(1, len(h)))
    lam = richardson_weights(h, orders)
    assert math.fsum(lam) == pytest.approx(1.0, abs=1e-9)
    vals = [2.0 + c * sum(x**p for p in orders) for x in h]
    assert float(np.dot(lam, vals)) == pytest.approx(2.0, abs=1e-6 * float(np.abs(lam).sum()))


def test_richardson_examples():
    np.testing.assert_allclose(richardson_weights([0.1, 0.05], (1,)), [-1.0, 2.0])
    np.testing.assert_allclose(richardson_weights([0.1, 0.05], (2,)), [-1 / 3, 4 / 3])
    with pytest.raises(ValueError):
        richardson_weights([0.1, 0.05], (1, 2))
    with pytest.raises(ValueError):
        richardson_weights([0.1, 0.1], (1,))


def test_parse_functional():
    assert parse_functional("1").kind == "constant"
    assert parse_functional("H2", 2.0) == TestFunctional.hermite(2, 2.0)
    assert parse_functional("w", 1.5) == TestFunctional.increment(1, 1.5)
    assert parse_functional("w^3") == TestFunctional.increment(3, 1.0)
    for bad in ("H", "x", "w^", "H-1"):
        with pytest.raises(ValueError):
            parse_functional(bad)


@pytest.mark.parametrize("J", [TestFunctional.hermite(3, 0.5), TestFunctional.increment(2, 0.5),
                               TestFunctional.hermite(1, 0.5), TestFunctional.constant()])
def test_derivative_is_bump_response(J):
    # a bump h 1{s >= t} moves w_{t*} by h for t <= t* and leaves it unchanged otherwise
    w = np.array([-1.3, 0.2, 0.9])
    h = 1e-5
    fd = (J.value(w + h) - J.value(w - h)) / (2 * h)
    np.testing.assert_allclose(J.derivative(0.3, w), fd, rtol=1e-7, atol=1e-7)
    np.testing.assert_array_equal(J.derivative(0.7, w), np.zeros(3) if J.kind != "constant" else 0.0)


def test_functional_grid_index():
    g = make_grid(1.0, 4)
    assert TestFunctional.hermite(1, 0.25).grid_index(g) == 2
    assert TestFunctional.constant().grid_index(g) == 4
    with pytest.raises(ValueError):
        TestFunctional.hermite(1, 0.3).grid_index(g)
    with pytest.raises(ValueError):
        TestFunctional("cubic")


# --- deterministic right side ----------------------------------------------------


def brownian_occupation_mean(y, T=1.0):
    c = abs(y) / math.sqrt(T)
    return math.sqrt(T) * (math.sqrt(2 / math.pi) * math.exp(-c * c / 2) - c * math.erfc(c / math.sqrt(2)))


def test_pairing_rhs_examples(unit):
    assert pairing_rhs("delta@0", unit, TestFunctional.constant(), 1.0) == 0.0
    # D_t H1(w_T / sqrt T) = 1 / sqrt T
    for y, T in ((0.0, 1.0), (0.3, 1.0), (-0.5, 2.0)):
        got = pairing_rhs(f"delta@{y}", unit, TestFunctional.hermite(1, T), T)
        assert got == pytest.approx(brownian_occupation_mean(y, T) / math.sqrt(T), rel=1e-9)
        # D_t H2(w_T / sqrt T) = 2 w_T / T and E[delta_y(w_t) w_T] = y p_t(y)
        got = pairing_rhs(f"delta@{y}", unit, TestFunctional.hermite(2, T), T)
        assert got == pytest.approx(2 * y / T * brownian_occupation_mean(y, T), rel=1e-9, abs=1e-12)
    assert pairing_rhs("heaviside@0", unit, TestFunctional.increment(1, 1.0), 1.0) == pytest.approx(0.5, rel=1e-12)
    # E[1{w_t < 0} w_1] = -sqrt(t / 2 pi), integrated twice over t
    got = pairing_rhs("heaviside@0", unit, TestFunctional.increment(2, 1.0), 1.0)
    assert got == pytest.approx(-2 * (2 / 3) / math.sqrt(2 * math.pi), rel=1e-9)


def test_pairing_rhs_hermite_and_increment_agree(unit):
    # H2(w) = w^2 - 1 at t* = 1 and the constant has no derivative
    for text in ("delta@0.2", "logabs", "heaviside@-0.4"):
        a = pairing_rhs(text, unit, TestFunctional.hermite(2, 1.0), 1.0)
        b = pairing_rhs(text, unit, TestFunctional.increment(2, 1.0), 1.0)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_pairing_rhs_pulled_back(sqrt_model):
    y = 0.4
    want = integrate.quad(lambda t: transition_density(sqrt_model, t, y), 0, 1, epsabs=1e-13)[0]
    got = pairing_rhs(f"delta@{y}", sqrt_model, TestFunctional.hermite(1, 1.0), 1.0)
    assert got == pytest.approx(want, rel=1e-8)
    with pytest.raises(ValueError):
        pairing_rhs("logabs", sqrt_model, TestFunctional.hermite(1, 1.0), 1.0)


def test_pairing_rhs_time_examples():
    # int_0^1 E log|w_t| dt = E log|Z| + int_0^1 log(t)/2 dt
    e_log = -(np.euler_gamma + math.log(2)) / 2
    got = pairing_rhs_time(parse_spec("logabs"), TestFunctional.constant(), 1.0)
    assert got == pytest.approx(e_log - 0.5, rel=1e-9)
    assert pairing_rhs_time(parse_spec("pv1x"), TestFunctional.constant(), 1.0) == 0.0
    # E[pv(1/w_t) w_1] = E[w_t / w_t] = 1
    got = pairing_rhs_time(parse_spec("pv1x"), TestFunctional.increment(1, 1.0), 1.0)
    assert got == pytest.approx(1.0, rel=1e-9)


# --- Monte Carlo pairings ---------------------------------------------------------


def test_pairing_matrix_within_three_stderr(unit, pairing_matrix):
    Js, res = pairing_matrix
    assert len(res) == 9
    for (text, label), est in res.items():
        J = next(j for j in Js if j.label == label)
        rhs = pairing_rhs(text, unit, J, 1.0)
        assert abs(est.value - rhs) < 3 * est.stderr, (text, label, est.value, rhs)
        assert not est.variance_flag
        assert est.M == 50_000


def test_pairing_estimate_record(pairing_matrix):
    _, res = pairing_matrix
    est = res[("delta@0", "1")]
    assert est.eps_orders == (1,)
    assert res[("logabs", "1")].eps_orders == (2,)
    # extrapolation: value = 2 fine - coarse of the eps-extrapolated sums
    lam = richardson_weights(est.eps, est.eps_orders)
    fine = sum(l * v[0] for l, v in zip(lam, est.levels))
    coarse = sum(l * v[1] for l, v in zip(lam, est.levels))
    assert est.value == pytest.approx(2 * fine - coarse, abs=1e-12)
    assert est.grid_bias == pytest.approx(fine - coarse, abs=1e-12)
    json.dumps(est.to_dict())


def test_single_pairing_matches_matrix(unit):
    ens = simulate(unit, 2, 4000, make_grid(1.0, 16))
    J = TestFunctional.hermite(1)
    one = pairing_lhs(ens, "heaviside@0.3", (0.2, 0.1), J)
    many = pairing_lhs_matrix(ens, ["logabs", "heaviside@0.3"], (0.2, 0.1), [TestFunctional.constant(), J])
    assert one.value == pytest.approx(many[("heaviside@0.3", J.label)].value, rel=1e-12)
    with pytest.raises(ValueError):
        pairing_lhs(ens, "logabs", (0.1,), J)
    with pytest.raises(ValueError):
        pairing_lhs(ens, "logabs", (0.05, 0.1), J)


# --- Ito formula ------------------------------------------------------------------


@pytest.mark.parametrize("case", ["tanaka", "pv"])
@pytest.mark.parametrize("J", ["1", "w"])
def test_ito_verify_passes(unit, case, J):
    rep = ito_verify(unit, case, parse_functional(J), M=50_000, K=256, seed=3)
    assert rep.passed, rep.to_dict()
    assert rep.oracle_gap < 1e-8


def test_ito_oracles_closed_forms(unit):
    y = 0.5
    rep = ito_verify(unit, "tanaka", TestFunctional.constant(), M=2000, K=16, y=y)
    # E|w_1 - y| - |y|
    want = 2 * PHI0 * math.exp(-y * y / 2) + y * (2 * ndtr(y) - 1) - y
    assert rep.oracles["direct"] == pytest.approx(want, rel=1e-12)
    assert rep.oracles["pairing"] == pytest.approx(want, rel=1e-10)
    pv = ito_verify(unit, "pv", TestFunctional.constant(), M=2000, K=16)
    assert abs(pv.oracles["direct"]) < 1e-12 and abs(pv.oracles["pairing"]) < 1e-12


def test_ito_pulled_back_model(sqrt_model):
    rep = ito_verify(sqrt_model, "fundamental", TestFunctional.increment(1, 1.0), M=30_000, K=256, seed=3)
    assert rep.case == "tanaka"
    assert rep.passed and rep.oracle_gap < 1e-8


def test_ito_report_json(unit):
    rep = ito_verify(unit, "pv", TestFunctional.increment(1, 1.0), M=2000, K=16, eps=(0.1, 0.05))
    d = json.loads(rep.to_json())
    assert set(d) == {"case", "J", "terms", "residual", "stderr", "pass", "oracles", "oracle_gap",
                      "M", "eps", "K", "seed"}
    assert len(d["terms"]) == 3 and d["eps"] == [0.1, 0.05]


def test_ito_rejects(unit, sqrt_model):
    J = TestFunctional.constant()
    with pytest.raises(ValueError):
        ito_verify(unit, "bogus", J, M=100)
    with pytest.raises(ValueError):
        ito_verify(sqrt_model, "pv", J, M=100)
    with pytest.raises(ValueError):
        ito_verify(unit.with_start(0.2), "pv", J, M=100)
    with pytest.raises(ValueError):
        ito_verify(unit, "tanaka", TestFunctional.hermite(1, 0.5), M=100)


# --- local time -------------------------------------------------------------------


def test_mc_local_time_at_start(unit):
    est = mc_local_time(unit, 0.0, (0.1, 0.05, 0.025), 20_000, make_grid(1.0, 256), seed=11)
    assert est.oracle_mean == pytest.approx(math.sqrt(2 / math.pi), rel=1e-12)
    assert abs(est.mean - est.oracle_mean) < 3 * est.stderr
    # E[L_1^2] = E[Z^2] = 1 at the start point
    assert abs(est.second_moment - 1.0) < 3 * est.second_moment_stderr
    assert len(est.richardson_pairs) == 2 and est.bias_gate is not None
    json.dumps(est.to_dict())


def test_mc_local_time_far_level(unit):
    est = mc_local_time(unit, 6.0, (0.1, 0.05), 5000, make_grid(1.0, 64))
    assert abs(est.mean) < 1e-5 and est.oracle_mean < 1e-8
    assert est.bias_gate is None
