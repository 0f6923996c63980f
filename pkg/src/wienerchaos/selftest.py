"""Quick checks of exactly known values, one list per module.

Each check returns ``(name, ok, detail)``; the command line ``--selftest`` flag
runs the lists of the modules behind a subcommand.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

__all__ = ["MODULE_CHECKS", "SUBCOMMAND_MODULES", "run_checks"]

_PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def _close(name: str, got: float, want: float, tol: float = 1e-12) -> tuple[str, bool, str]:
    ok = bool(abs(got - want) <= tol * max(1.0, abs(want)))
    return name, ok, f"got {got!r}, expected {want!r}"


def _hermite_checks():
    from .hermite import gauss_hermite_rule, hermite_eval, hermite_zero_value

    r1 = gauss_hermite_rule(1)
    r5 = gauss_hermite_rule(5)
    return [
        _close("H_0(3.7) = 1", hermite_eval(0, 3.7), 1.0),
        _close("H_3(2) = 2", hermite_eval(3, 2.0), 2.0),
        _close("H_1(0) = 0", hermite_zero_value(1), 0.0),
        _close("H_2(0) = -1", hermite_zero_value(2), -1.0),
        ("one-node rule is {0: 1}", bool(r1.nodes[0] == 0.0 and abs(r1.weights[0] - 1.0) < 1e-15), repr(r1)),
        _close("5-node rule integrates x^2 to 1", r5.expect(np.square), 1.0),
    ]


def _distcat_checks():
    from .distcat import Kind, DistributionSpec, mollified_eval, pair_gaussian

    eps = 0.3
    return [
        _close("<delta_0, H_2 phi> = -phi(0)", pair_gaussian(DistributionSpec(Kind.DELTA, 0.0), 1.0, 2), -_PHI0),
        _close("<pv 1/x, x phi> = 1", pair_gaussian(DistributionSpec(Kind.PV), 1.0, 1), 1.0, 1e-9),
        _close("mollified delta peak", mollified_eval(DistributionSpec(Kind.DELTA, 0.0), eps, 0.0),
               1.0 / (eps * math.sqrt(2.0 * math.pi))),
        _close("mollified Heaviside total mass", mollified_eval(DistributionSpec(Kind.HEAVISIDE, 0.0), eps, -50.0), 1.0),
    ]


def _chaos_checks():
    from .chaos import (ChaosVector, expand, scaled_norm_identity, smoothing_norm, sobolev_norm)

    v = expand("delta@0", 1.0, 1.0, 4)
    want = np.array([_PHI0, 0.0, -_PHI0, 0.0, 3.0 * _PHI0])
    lhs, rhs = scaled_norm_identity("heaviside@0", 1.0, 1.0, 0.7, 50)
    one = ChaosVector.from_pairings([1.0, 0.0, 0.0])
    sm = smoothing_norm("heaviside@0", -0.3, 2.0, 0)
    return [
        ("delta@0 pairings up to 4", bool(np.allclose(v.pairings(), want, rtol=1e-14, atol=1e-16)),
         repr(v.pairings().tolist())),
        _close("zero vector has norm 0", sobolev_norm(ChaosVector.zeros(10), 1.5).value, 0.0),
        _close("a_0 = 1 only gives norm 1 at s = 7", sobolev_norm(one, 7.0).value, 1.0),
        _close("t = T scaling ratio", lhs / rhs, 1.0),
        _close("smoothing at N = 0 reduces to 4T^2 a_0^2", sm.integral_sq, 4.0 * 4.0 * 0.25),
    ]


def _diffusion_checks():
    from .diffusion import (DiffusionModel, bessel_delta_kernel, density_mass, flow, fundamental_solution,
                            kv_kernel, model_from_string, scale_speed)

    unit = model_from_string("unit")
    two = DiffusionModel(lambda z: np.full_like(np.asarray(z, float), 2.0),
                         lambda z: np.zeros_like(np.asarray(z, float)), x=1.0, lam=4.0, name="const2")
    drift = DiffusionModel(lambda z: np.ones_like(np.asarray(z, float)), None, drift="general",
                           b=lambda z: 1.0, name="unit-drift1")
    fs = fundamental_solution(unit, 0.0)
    ss = scale_speed(drift)
    sqrt_model = model_from_string("sqrt1pz2")
    f1 = flow(sqrt_model, 0.4)
    return [
        _close("unit Lamperti map is the identity", unit.lamperti(0.7), 0.7),
        _close("sigma = 2, x = 1: psi(3) = 1", two.lamperti(3.0), 1.0),
        _close("unit flow is a shift", flow(unit, 0.3), 0.3),
        _close("flow group law", flow(sqrt_model, 0.5, f1), flow(sqrt_model, 0.9), 1e-9),
        _close("unit n = 0 kernel is the Gaussian density", kv_kernel(unit, 0, 0.5, 0.3),
               math.exp(-0.09) / math.sqrt(math.pi)),
        _close("unit density mass", density_mass(unit, 0.5), 1.0, 1e-8),
        _close("unit scale function s(z) = z", scale_speed(unit).scale(0.8), 0.8),
        _close("unit speed density m' = 2", scale_speed(unit).speed_density(-0.4), 2.0),
        _close("b = 1 scale density", ss.scale_density(0.5), math.exp(-1.0)),
        _close("Tanaka u(z) = |z|", fs.u(-0.6), 0.6),
        _close("Tanaka Au(z) = sgn(z)", fs.Au(-0.6), -1.0),
        _close("u(y) = 0", fundamental_solution(sqrt_model, 0.4).u(0.4), 0.0),
        _close("Bessel kernel symmetry", bessel_delta_kernel(-0.5, 0.2, 1.1), bessel_delta_kernel(-0.5, 1.1, 0.2)),
    ]


def _localtime_checks():
    from .diffusion import model_from_string
    from .localtime import (HolderExperiment, density_holder_check, holder_difference_norm,
                            iterated_integral_l2, local_time_chaos_norm, occupation_mean)

    unit = model_from_string("unit")
    sq = model_from_string("sqrt1pz2")
    same = holder_difference_norm(HolderExperiment(unit, 0.1, 0.2, ((0.3, 0.3),), N=40))
    ab = holder_difference_norm(HolderExperiment(sq, 0.1, 0.2, ((0.1, 0.4), (0.4, 0.1)), N=40))
    mean0 = local_time_chaos_norm(sq, 0.2, 3.0, 0).value
    dh = density_holder_check(unit, ((0.5, 0.5),), 0.3, N=20)
    return [
        _close("n = 0 iterated integral", iterated_integral_l2(0, 1.0), 1.0),
        _close("n = 2 iterated integral", iterated_integral_l2(2, 1.0), 0.5),
        _close("n = 3 iterated integral at t = 0.5", iterated_integral_l2(3, 0.5), 0.5**3 / 6),
        _close("N = 0 norm is the mean", mean0, float(occupation_mean(sq, 0.2))),
        _close("y = z gives 0", float(same[0]), 0.0),
        _close("Hoelder norm symmetry", float(ab[0]), float(ab[1])),
        _close("density difference vanishes at y = z", dh.max_ratio, 0.0),
    ]


def _mcverify_checks():
    from .diffusion import model_from_string
    from .mcverify import (TestFunctional, ito_verify, make_grid, mc_local_time, pairing_lhs, pairing_rhs,
                           simulate)

    unit = model_from_string("unit")
    grid = make_grid(1.0, 32)
    ens = simulate(unit, 11, 20_000, grid, batch_size=5_000)
    again = simulate(unit, 11, 20_000, grid, batch_size=5_000)
    b0, b1 = ens.batch(0), again.batch(0)
    wT = np.concatenate([b.w[:, -1] for b in ens.batches()])
    var_se = math.sqrt(2.0 / wT.size)
    checks = [
        ("fixed seed reproduces paths", bool(np.array_equal(b0.w, b1.w)), "batch 0"),
        ("terminal variance is T", bool(abs(wT.var() - 1.0) < 5 * var_se), f"var {wT.var():.5f}"),
    ]
    one = TestFunctional.constant()
    for spec in ("heaviside@0", "logabs"):
        est = pairing_lhs(ens, spec, (0.2, 0.1), one)
        checks.append((f"{spec} with J = 1 pairs to 0", bool(abs(est.value) < 4 * est.stderr),
                       f"{est.value:.3g} +- {est.stderr:.2g}"))
        checks.append(_close(f"{spec} right side with J = 1", pairing_rhs(spec, unit, one, 1.0), 0.0))
    rep = ito_verify(unit, "pv", one, 1.0, 5_000, K=32, seed=3, batch_size=5_000)
    checks.append(_close("pv case with J = 1: oracles vanish", abs(rep.oracles["direct"]) + abs(rep.oracles["pairing"]),
                         0.0, 1e-10))
    far = mc_local_time(unit, 5.0, (0.1, 0.05), 5_000, grid, seed=5, batch_size=5_000)
    checks.append(("far level has mean below 1e-5", bool(abs(far.mean) < 1e-5), f"{far.mean:.3g}"))
    return checks


MODULE_CHECKS: dict[str, Callable[[], list]] = {
    "hermite": _hermite_checks,
    "distcat": _distcat_checks,
    "chaos": _chaos_checks,
    "diffusion": _diffusion_checks,
    "localtime": _localtime_checks,
    "mcverify": _mcverify_checks,
}

SUBCOMMAND_MODULES = {
    "hermite": ("hermite",),
    "chaos": ("distcat", "chaos"),
    "norm": ("distcat", "chaos"),
    "smoothing": ("chaos",),
    "index": ("chaos",),
    "kv-kernel": ("diffusion",),
    "scale-speed": ("diffusion",),
    "bessel-kernel": ("diffusion",),
    "holder": ("localtime",),
    "density-holder": ("localtime",),
    "ito-verify": ("mcverify",),
    "local-time-mc": ("mcverify",),
}


def run_checks(modules) -> list[tuple[str, bool, str]]:
    """Run the checks of ``modules``; an exception counts as a failed check."""
    results = []
    for mod in modules:
        try:
            results.extend((f"{mod}: {n}", ok, d) for n, ok, d in MODULE_CHECKS[mod]())
        except Exception as exc:  # a crash is a failed self-test, not a traceback
            results.append((f"{mod}: checks raised", False, f"{type(exc).__name__}: {exc}"))
    return results
