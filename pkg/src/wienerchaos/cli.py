"""Command line experiment runner.

Every subcommand writes an :class:`~wienerchaos.report.ExperimentReport` as
JSON or its table as CSV.  The output goes to ``--out``, else to
``$WIENERCHAOS_OUTDIR/<subcommand>.<format>``, else to standard output.

Exit codes: 0 success, 1 failed verification gate or numerical tolerance,
2 usage error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .report import COMMANDS, ExperimentConfig, ExperimentReport, load_config, rows_to_csv

OUTDIR_ENV = "WIENERCHAOS_OUTDIR"

# Defaults per subcommand; also the set of options each one accepts.
DEFAULTS: dict[str, dict] = {
    "hermite": {"n": 5, "x": (0.0, 0.5, 1.0, 2.0), "m": None},
    "chaos": {"dist": "delta@0", "t": 1.0, "T": 1.0, "N": 20},
    "norm": {"dist": "delta@0", "t": 1.0, "T": 1.0, "N": 2000, "s": -0.6},
    "smoothing": {"dist": "delta@0", "s": -0.8, "T": 1.0, "N": 300},
    "index": {"dist": "delta@0", "T": 1.0, "N": 5000, "window": (500.0, 5000.0)},
    "kv-kernel": {"model": "unit", "x0": 0.0, "n": 1, "t": 0.5, "a": (-1.0, 0.0, 0.5, 1.0)},
    "scale-speed": {"model": "unit", "x0": 0.0, "y": 0.0, "z": (-1.0, 0.0, 1.0)},
    "holder": {"model": "unit", "x0": 0.0, "s": 0.1, "beta": 0.2, "lam": None, "N": 2000,
               "pairs": ((0.0, 0.001), (0.0, 0.01), (0.0, 0.1))},
    "density-holder": {"model": "unit", "x0": 0.0, "beta": 0.5, "N": 200,
                       "pairs": ((0.0, 0.001), (0.0, 0.01), (0.0, 0.1))},
    "bessel-kernel": {"s": -0.5, "y": 0.0, "x": (0.01, 0.1, 0.5, 1.0, 2.0), "p": (1.8, 2.2)},
    "ito-verify": {"case": "tanaka", "model": "unit", "x0": 0.0, "y": 0.5, "J": "1", "T": 1.0, "M": 100_000,
                   "seed": 0, "eps": (0.05, 0.025), "K": 256},
    "local-time-mc": {"model": "unit", "x0": 0.0, "y": 0.0, "T": 1.0, "M": 100_000, "seed": 0,
                      "eps": (0.05, 0.025, 0.0125), "K": 256},
}

_HELP = {
    "model": "diffusion coefficient: unit, sqrt1pz2, sin2 or a z,sigma CSV table",
    "dist": "distribution, e.g. delta@0, ddelta^2@0.5, heaviside@-1, logabs, pv1x, xlogabs, smooth:sin",
    "case": "Ito case: tanaka (fundamental solution) or pv",
    "J": "test functional: 1, H<n> (at T), w or w^<k> (at T)",
    "s": "Sobolev index",
    "beta": "Hoelder exponent",
    "lam": "ellipticity constant for the Hoelder bound (default: the model's)",
    "t": "time",
    "T": "horizon",
    "y": "level or target point",
    "x0": "start point of the diffusion",
    "n": "order",
    "N": "chaos truncation",
    "M": "Monte Carlo paths",
    "K": "time steps (even; graded grid t_k = T (k/K)^2)",
    "m": "Gauss-Hermite node count to report",
    "seed": "random seed",
    "eps": "mollification bandwidths, decreasing, comma separated",
    "x": "evaluation points, comma separated (use --x=-1,0 for negatives)",
    "z": "evaluation points, comma separated",
    "a": "target points, comma separated",
    "p": "L_p exponents, comma separated",
    "window": "tail fit window lo,hi",
    "pairs": "Hoelder pairs y:z,y:z",
}

_SUMMARY = {
    "hermite": "Hermite polynomial values and Gauss-Hermite rules",
    "chaos": "chaos expansion of a distribution of w(t)",
    "norm": "truncated Sobolev norm with divergence diagnostics",
    "smoothing": "time-integral smoothing identity, term by term",
    "index": "critical Sobolev index from the chaos tail",
    "kv-kernel": "Krylov-Veretennikov kernels of a diffusion",
    "scale-speed": "scale function, speed density and fundamental solution",
    "holder": "Hoelder continuity of the local time in the level",
    "density-holder": "Hoelder check of the occupation density mean",
    "bessel-kernel": "Bessel potential of a point mass and its L_p trend",
    "ito-verify": "Monte Carlo check of the Ito formula for distributions",
    "local-time-mc": "Monte Carlo occupation-time estimate of the local time",
}

_TYPES = {"n": int, "N": int, "M": int, "K": int, "m": int, "seed": int,
          "s": float, "beta": float, "lam": float, "t": float, "T": float, "y": float, "x0": float}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 as well; keep the message on stderr
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wienerchaos", description="Wiener chaos experiments for distributions of diffusions.")
    parser.add_argument("--version", action="version", version=f"wienerchaos {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=_SUMMARY[cmd], description=_SUMMARY[cmd])
        p.add_argument("--format", choices=("csv", "json"), default=None, help="output format (default json)")
        p.add_argument("--out", default=None, help=f"output file (default ${OUTDIR_ENV}/{cmd}.<format> or stdout)")
        p.add_argument("--config", default=None, help="JSON object or key=value config file")
        p.add_argument("--selftest", action="store_true", help="run the exact-value checks of the module")
        if cmd in ("ito-verify", "local-time-mc"):
            p.add_argument("--path-summary", default=None, help="write per-batch path statistics to this CSV")
        for key, default in DEFAULTS[cmd].items():
            default_text = "none" if default is None else _show(default)
            p.add_argument(f"--{key}", dest=key, type=_TYPES.get(key, str), default=None,
                           help=f"{_HELP[key]} (default {default_text})")
    return parser


def _show(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{a:g}:{b:g}" for a, b in v)
        return ",".join(f"{e:g}" for e in v)
    return str(v)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    values = {k: v for k, v in DEFAULTS[cmd].items() if v is not None}
    if args.config:
        data = load_config(args.config)
        if data.get("command", cmd) != cmd:
            raise UsageError(f"config is for {data['command']!r}, not {cmd!r}")
        allowed = set(DEFAULTS[cmd]) | {"command", "format", "out"}
        extra = set(data) - allowed
        if extra:
            raise UsageError(f"config keys not used by {cmd}: {', '.join(sorted(extra))}")
        values.update({k: v for k, v in data.items() if k != "command"})
    for key in list(DEFAULTS[cmd]) + ["format", "out"]:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values.setdefault("format", "json")
    values["command"] = cmd
    return ExperimentConfig.from_mapping(values)


# --- handlers ------------------------------------------------------------------
# Each returns (outputs, table rows, provenance, gates).


def _model(cfg: ExperimentConfig, horizon: float = 1.0):
    from .diffusion import model_from_string

    return model_from_string(cfg.model, x=cfg.x0 or 0.0, horizon=max(horizon, 1.0))


def _abs_hermite(n: int, x: float) -> float:
    """``sum |c_k| |x|^k`` for ``H_n``: a bound on rounding error growth."""
    prev, cur = 0.0, 1.0
    for k in range(n):
        prev, cur = cur, abs(x) * cur + k * prev
    return cur


def _run_hermite(cfg):
    from .hermite import gauss_hermite_rule, hermite_eval

    eps = np.finfo(float).eps
    rows = []
    for x in cfg.x:
        v = float(hermite_eval(cfg.n, x))
        rows.append({"n": cfg.n, "x": float(x), "value": v, "err_est": (cfg.n + 1) * eps * _abs_hermite(cfg.n, x)})
    out = {"hermite_eval": rows}
    prov = {"convention": "probabilists' H_n", "long_double_above_order": 300}
    if cfg.m is not None:
        rule = gauss_hermite_rule(cfg.m)
        out["gauss_hermite"] = {"nodes": rule.nodes.tolist(), "weights": rule.weights.tolist(),
                                "weight_sum_error": abs(math.fsum(rule.weights.tolist()) - 1.0)}
    return out, rows, prov, {}


def _run_chaos(cfg):
    from .chaos import expand

    v = expand(cfg.dist, cfg.t, cfg.T, cfg.N)
    out = {"expand": v.to_dict(), "l2_norm_sq": math.fsum(v.l2_terms.tolist())}
    prov = {"N": cfg.N, "pairing_tolerance": 1e-9, "normalization": "pairing = E[Lambda H_n] / sqrt(n!)"}
    return out, v.rows(), prov, {}


def _run_norm(cfg):
    from .chaos import expand, sobolev_norm

    res = sobolev_norm(expand(cfg.dist, cfg.t, cfg.T, cfg.N), cfg.s)
    d = res.to_dict()
    prov = {"N": cfg.N, "s": cfg.s, "pairing_tolerance": 1e-9, "tail_bound": res.tail_bound}
    return {"sobolev_norm": d}, [d], prov, {}


def _run_smoothing(cfg):
    from .chaos import expand, smoothing_norm

    pair = smoothing_norm(cfg.dist, cfg.s, cfg.T, cfg.N)
    ratio = pair.ratio
    # both sides are multiples of b_n^2, so a pairing error e_n moves each term by about 2 |b_n| e_n / b_n^2
    base = expand(cfg.dist, cfg.T, cfg.T, cfg.N)
    b = np.abs(base.normalized)
    rel = np.divide(2.0 * b * base.err + base.err**2, b * b, out=np.full(b.size, math.inf), where=b > 0)
    rows = [
        {"n": n, "integral_term": float(a), "base_term": float(bt),
         "err_est": float(abs(bt) * r) if bt else float(4 * cfg.T**2 * (1 + n) ** cfg.s * base.err[n] ** 2)}
        for n, (a, bt, r) in enumerate(zip(pair.integral_terms, pair.base_terms, rel))
    ]
    out = {"smoothing_norm": {
        "integral_sq": pair.integral_sq, "base_sq": pair.base_sq, "ratio": ratio,
        "divergent": pair.divergent, "tail_bound": pair.tail_bound,
    }}
    gates = {}
    if math.isfinite(ratio):
        gates["lhs/rhs ratio within 1e-12 of 1"] = bool(abs(ratio - 1.0) <= 1e-12)
    prov = {"N": cfg.N, "s": cfg.s, "identity_tolerance": 1e-12}
    return out, rows, prov, gates


def _run_index(cfg):
    from .chaos import estimate_critical_index

    lo, hi = (int(round(w)) for w in cfg.window)
    est = estimate_critical_index(cfg.dist, cfg.N, (lo, hi), cfg.T)
    d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(est).items()}
    prov = {"N": cfg.N, "window": [lo, hi], "fit": "weighted least squares in log-log, weights 1/n"}
    return {"critical_index": d}, [d], prov, {}


def _run_kv(cfg):
    from .diffusion import density_mass, kv_kernel

    model = _model(cfg, cfg.t)
    lam = model.lamperti
    eps = np.finfo(float).eps
    rows = []
    for a in cfg.a:
        v = float(kv_kernel(model, cfg.n, cfg.t, a))
        u = abs(float(lam(a)))
        # A map error du moves the Gaussian argument by du / sqrt(t).
        slope = (u / cfg.t + (cfg.n + 1) / math.sqrt(cfg.t)) * abs(v)
        rows.append({"a": float(a), "value": v, "err_est": lam.max_roundtrip_error * slope + (cfg.n + 2) * eps * abs(v)})
    mass = density_mass(model, cfg.t, cfg.n)
    out = {"kv_kernel": rows, "integral_over_a": mass, "expected_integral": 1.0 if cfg.n == 0 else 0.0}
    prov = {"lamperti_roundtrip_error": lam.max_roundtrip_error, "n": cfg.n, "t": cfg.t,
            "domain": list(model.domain)}
    return out, rows, prov, {}


def _run_scale_speed(cfg):
    from .diffusion import fundamental_solution, scale_speed

    model = _model(cfg)
    ss = scale_speed(model)
    fs = fundamental_solution(model, cfg.y)
    tol = 1e-15
    rows = []
    for z in cfg.z:
        sc = float(ss.scale(z))
        rows.append({
            "z": float(z), "scale": sc, "scale_density": float(ss.scale_density(z)),
            "speed_density": float(ss.speed_density(z)), "u": float(fs.u(z)), "Au": float(fs.Au(z)),
            "err_est": tol * (1.0 + abs(sc)) * len(model._breaks),
        })
    prov = {"reference_point": 0.0, "panel_tolerance": tol, "kink_convention": "Au(y) is the right limit"}
    return {"scale_speed": rows}, rows, prov, {}


def _run_holder(cfg):
    from .localtime import HolderExperiment, choose_truncation, holder_bound_constant, holder_table

    model = _model(cfg)
    exp = HolderExperiment(model, cfg.s, cfg.beta, cfg.pairs, N=cfg.N, lam=cfg.lam)
    rows = [asdict(r) for r in holder_table(exp)]
    lam = model.lam if cfg.lam is None else cfg.lam
    bound = holder_bound_constant(cfg.s, cfg.beta, lam, cfg.N)
    n_needed, achieved = choose_truncation(cfg.s, cfg.beta, lam)
    out = {"holder_table": rows, "bound_constant": bound.value, "bound_tail": bound.tail,
           "suggested_N": n_needed, "suggested_N_tail_ratio": achieved}
    gates = {"norm <= c |y - z|^beta for every pair": all(r["ratio"] <= 1.0 for r in rows)}
    prov = {"N": cfg.N, "lam": lam, "bound_tail": bound.tail}
    return out, rows, prov, gates


def _run_density_holder(cfg):
    from .localtime import density_holder_check

    rep = density_holder_check(_model(cfg), cfg.pairs, cfg.beta, cfg.N)
    d = rep.to_dict()
    rows = [
        {"y": y, "z": z, "delta": float(dv), "norm_s_minus_half": float(nv)}
        for (y, z), dv, nv in zip(rep.pairs, rep.deltas, rep.norms)
    ]
    gates = {"Hoelder ratio bounded": rep.bounded, "dominated by the s = -1/2 norm": rep.dominated}
    return {"density_holder": d}, rows, {"N": cfg.N}, gates


def _run_bessel(cfg):
    from .diffusion import bessel_delta_kernel, bessel_delta_kernel_closed_form, bessel_lp_trend

    rows = []
    for x in cfg.x:
        v = bessel_delta_kernel(cfg.s, cfg.y, x)
        c = bessel_delta_kernel_closed_form(cfg.s, cfg.y, x)
        rows.append({"x": float(x), "value": v, "closed_form": c, "err_est": abs(v - c)})
    trends = [bessel_lp_trend(cfg.s, p).to_dict() for p in cfg.p]
    out = {"kernel": rows, "lp_trend": trends, "lp_threshold": 1.0 / (1.0 + cfg.s) if cfg.s > -1 else math.inf}
    gates = {"quadrature matches the closed form to 1e-10": all(
        r["err_est"] <= 1e-10 * max(1.0, abs(r["closed_form"])) for r in rows)}
    return out, rows, {"kernel_quadrature": "scipy quad in log t"}, gates


def _path_summary(path: str, model, seed: int, M: int, grid) -> None:
    from .mcverify import batch_summaries, simulate

    ens = simulate(model, seed, M, grid)
    Path(path).write_text(rows_to_csv(batch_summaries(ens)))


def _run_ito(cfg, path_summary=None):
    from .mcverify import ito_verify, make_grid, parse_functional

    model = _model(cfg, cfg.T)
    J = parse_functional(cfg.J, cfg.T)
    rep = ito_verify(model, cfg.case, J, cfg.T, cfg.M, cfg.eps, y=cfg.y, seed=cfg.seed, K=cfg.K)
    d = rep.to_dict()
    rows = [dict(t) for t in d["terms"]] + [
        {"name": "residual", "estimate": rep.residual, "stderr": rep.stderr, "method": "lhs - rhs"}]
    gates = {
        "deterministic oracles agree to 1e-8": rep.oracle_gap <= 1e-8,
        "|residual| < 3 stderr": rep.passed,
    }
    if path_summary:
        _path_summary(path_summary, model, cfg.seed, cfg.M, make_grid(cfg.T, cfg.K))
    prov = {"seed": cfg.seed, "M": cfg.M, "K": cfg.K, "eps": list(cfg.eps), "grid": "t_k = T (k/K)^2",
            "gate": "3 stderr"}
    return {"ito_verify": d}, rows, prov, gates


def _run_local_time(cfg, path_summary=None):
    from .mcverify import make_grid, mc_local_time

    model = _model(cfg, cfg.T)
    grid = make_grid(cfg.T, cfg.K)
    est = mc_local_time(model, cfg.y, cfg.eps, cfg.M, grid, seed=cfg.seed)
    rows = [{"eps": e, "mean_fine_grid": f, "mean_coarse_grid": c, "stderr_fine_grid": sf, "stderr_coarse_grid": sc}
            for e, (f, c), (sf, sc) in zip(est.eps, est.levels, est.level_stderr)]
    gates = {"mean within 3 stderr of the density integral": abs(est.mean - est.oracle_mean) < 3.0 * est.stderr}
    if path_summary:
        _path_summary(path_summary, model, cfg.seed, cfg.M, grid)
    prov = {"seed": cfg.seed, "M": cfg.M, "K": cfg.K, "eps": list(cfg.eps), "grid": "t_k = T (k/K)^2"}
    return {"mc_local_time": est.to_dict()}, rows, prov, gates


HANDLERS = {
    "hermite": _run_hermite,
    "chaos": _run_chaos,
    "norm": _run_norm,
    "smoothing": _run_smoothing,
    "index": _run_index,
    "kv-kernel": _run_kv,
    "scale-speed": _run_scale_speed,
    "holder": _run_holder,
    "density-holder": _run_density_holder,
    "bessel-kernel": _run_bessel,
    "ito-verify": _run_ito,
    "local-time-mc": _run_local_time,
}


def execute(cfg: ExperimentConfig, path_summary: str | None = None) -> ExperimentReport:
    """Run the subcommand described by ``cfg`` and build its report."""
    start = time.perf_counter()
    handler = HANDLERS[cfg.command]
    if cfg.command in ("ito-verify", "local-time-mc"):
        outputs, table, prov, gates = handler(cfg, path_summary)
    else:
        outputs, table, prov, gates = handler(cfg)
    rep = ExperimentReport(cfg, __version__, outputs, table, prov, {k: bool(v) for k, v in gates.items()})
    rep.wall_time_s = time.perf_counter() - start
    return rep


def _write(text: str, cfg: ExperimentConfig) -> str | None:
    target = cfg.out
    if target is None and os.environ.get(OUTDIR_ENV):
        target = str(Path(os.environ[OUTDIR_ENV]) / f"{cfg.command}.{cfg.format}")
    if target is None:
        sys.stdout.write(text)
        return None
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    Path(target).write_text(text)
    return target


def _selftest(cmd: str) -> int:
    from .selftest import SUBCOMMAND_MODULES, run_checks

    results = run_checks(SUBCOMMAND_MODULES[cmd])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + ("" if ok else f"  ({detail})"))
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def run(argv=None) -> int:
    """Parse ``argv``, run, write the report; return the exit code."""
    from .distcat import QuadratureError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        if args.selftest:
            return _selftest(args.command)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"wienerchaos: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"wienerchaos: error: {exc}", file=sys.stderr)
        return 2
    try:
        rep = execute(cfg, getattr(args, "path_summary", None))
    except QuadratureError as exc:
        print(f"wienerchaos: numerical tolerance not met: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"wienerchaos: error: {exc}", file=sys.stderr)
        return 2
    text = rep.to_json() if cfg.format == "json" else rep.to_csv()
    _write(text, cfg)
    for name in rep.failed_gates:
        print(f"wienerchaos: gate failed: {name}", file=sys.stderr)
    return 1 if rep.failed_gates else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
