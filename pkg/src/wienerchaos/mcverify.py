"""Monte Carlo check of the duality pairing and of the Ito formula.

The stochastic integral of a distribution is defined through its pairing with
smooth test functionals ``J``::

    E[(int_0^T Lambda(X_t) dw_t) J] = int_0^T E[Lambda(X_t) D_t J] dt.

The left side is estimated with Ito sums of the mollified ``Lambda * kappa_eps``
on simulated paths; the bias in ``eps`` and in the grid step is removed by
Richardson extrapolation computed path by path, so the reported standard error
covers the extrapolated estimator.  The right side is a deterministic time
integral of Gaussian pairings through the Lamperti map.

Random numbers come from Philox streams keyed by ``(seed, batch index)``, so a
batch can be regenerated on its own and the ensemble never needs to be stored.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from numpy.polynomial import hermite_e
from scipy.special import comb, dawsn, ndtr

from .diffusion import DiffusionModel, fundamental_solution, transition_density
from .distcat import (
    DistributionSpec,
    Kind,
    QuadratureError,
    expected_log_abs_shifted,
    gaussian_pairings,
    mollified_eval,
    parse_spec,
)
from .hermite import hermite_eval, log_factorial
from .quadrature import graded_breaks, panel_rule

__all__ = [
    "make_grid",
    "PathBatch",
    "PathEnsemble",
    "SanityReport",
    "simulate",
    "batch_summaries",
    "TestFunctional",
    "PairingEstimate",
    "richardson_weights",
    "pairing_lhs",
    "pairing_lhs_matrix",
    "parse_functional",
    "pairing_rhs",
    "Term",
    "ItoReport",
    "ito_verify",
    "LocalTimeEstimate",
    "mc_local_time",
]

_DEFAULT_BATCH = 20_000
_RHS_TOL = 1e-9


def make_grid(T: float, K: int, kind: str = "graded") -> np.ndarray:
    """Time grid ``0 = t_0 < ... < t_K = T``.

    ``"graded"`` uses ``t_k = T (k/K)^2``: steps shrink like ``sqrt(t)`` near 0,
    which resolves integrands of size ``t^(-1/2)`` and keeps every other point
    a grid of the same family (needed by the step extrapolation).
    """
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if int(K) != K or K < 2 or K % 2:
        raise ValueError(f"step count must be an even integer >= 2, got {K}")
    u = np.arange(int(K) + 1) / K
    if kind == "graded":
        return T * u * u
    if kind == "uniform":
        return T * u
    raise ValueError(f"unknown grid kind {kind!r}")


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 3 or g[0] != 0.0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must start at 0, be strictly increasing and have >= 3 points")
    return g


def _is_unit(model: DiffusionModel) -> bool:
    z = np.linspace(-3.0, 3.0, 13)
    return model.lamperti_exact and bool(
        np.all(np.asarray(model.sigma(z)) == 1.0) and np.all(np.asarray(model.dsigma(z)) == 0.0)
    )


# --- paths -------------------------------------------------------------------


@dataclass(frozen=True)
class PathBatch:
    """Paths ``index * batch_size ...`` of an ensemble.

    ``w`` and ``x`` have shape ``(m, K + 1)``; ``x`` is ``w`` shifted by the
    start point for the unit model.
    """

    index: int
    w: np.ndarray
    x: np.ndarray

    @property
    def dw(self) -> np.ndarray:
        return np.diff(self.w, axis=1)


@dataclass(frozen=True)
class SanityReport:
    """Pooled checks on the standardized increments ``dw / sqrt(dt)``."""

    mean: float
    mean_limit: float
    variance: float
    worst_step_variance: float
    ok: bool


class PathEnsemble:
    """Lazily generated ensemble of ``M`` paths on a fixed grid.

    Parameters
    ----------
    model : DiffusionModel
    seed : int
        Nonnegative integer below ``2**64``.
    M : int
        Number of paths.
    grid : array_like
        ``0 = t_0 < ... < t_K = T``.
    batch_size : int
        Paths per Philox stream.
    antithetic : bool
        Pair every path with its reflection ``-w`` (within each batch).
    """

    def __init__(self, model: DiffusionModel, seed: int, M: int, grid, batch_size: int = _DEFAULT_BATCH,
                 antithetic: bool = False):
        if int(M) != M or M < 1:
            raise ValueError(f"path count must be a positive integer, got {M}")
        if int(seed) != seed or not 0 <= seed < 2**64:
            raise ValueError("seed must be an integer in [0, 2**64)")
        if antithetic and batch_size % 2:
            raise ValueError("antithetic sampling needs an even batch size")
        self.model = model
        self.seed = int(seed)
        self.M = int(M)
        self.grid = _check_grid(grid)
        self.batch_size = int(batch_size)
        self.antithetic = bool(antithetic)
        if self.T > model.horizon * (1 + 1e-12):
            raise ValueError(f"grid horizon {self.T} exceeds the model horizon {model.horizon}")
        self._unit = _is_unit(model)

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def K(self) -> int:
        return self.grid.size - 1

    @property
    def n_batches(self) -> int:
        return -(-self.M // self.batch_size)

    def _increments(self, i: int, m: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=(self.seed << 64) | i))
        sd = np.sqrt(np.diff(self.grid))
        if self.antithetic:
            half = rng.standard_normal((-(-m // 2), self.K))
            z = np.concatenate([half, -half])[:m]
        else:
            z = rng.standard_normal((m, self.K))
        return z * sd

    def batch(self, i: int) -> PathBatch:
        if not 0 <= i < self.n_batches:
            raise IndexError(i)
        m = min(self.batch_size, self.M - i * self.batch_size)
        w = np.zeros((m, self.K + 1))
        np.cumsum(self._increments(i, m), axis=1, out=w[:, 1:])
        return PathBatch(i, w, self._diffusion(w))

    def batches(self) -> Iterator[PathBatch]:
        for i in range(self.n_batches):
            yield self.batch(i)

    def _diffusion(self, w: np.ndarray) -> np.ndarray:
        model = self.model
        if self._unit:
            return w + model.x
        if model.lamperti_exact:
            lo, hi = model.lamperti.image
            return model.lamperti.inverse(np.clip(w, lo, hi))
        # Euler-Maruyama for a general drift.
        x = np.empty_like(w)
        x[:, 0] = model.x
        dt = np.diff(self.grid)
        dw = np.diff(w, axis=1)
        for k in range(self.K):
            xk = x[:, k]
            x[:, k + 1] = xk + model.drift_fn(xk) * dt[k] + np.asarray(model.sigma(xk)) * dw[:, k]
        return x

    def sanity(self) -> SanityReport:
        """Pooled mean within ``4/sqrt(M K)`` and pooled variance within 5%."""
        sd = np.sqrt(np.diff(self.grid))
        s1 = np.zeros(self.K)
        s2 = np.zeros(self.K)
        for i in range(self.n_batches):
            m = min(self.batch_size, self.M - i * self.batch_size)
            z = self._increments(i, m) / sd
            s1 += z.sum(axis=0)
            s2 += (z * z).sum(axis=0)
        n = self.M * self.K
        mean = float(s1.sum() / n)
        var = float(s2.sum() / n - mean * mean)
        step_var = s2 / self.M - (s1 / self.M) ** 2
        limit = 4.0 / math.sqrt(n)
        ok = abs(mean) <= limit and abs(var - 1.0) <= 0.05
        if self.antithetic:
            ok = abs(var - 1.0) <= 0.05
        return SanityReport(mean, limit, var, float(np.max(np.abs(step_var - 1.0))), ok)


def batch_summaries(ensemble: PathEnsemble) -> list[dict]:
    """Per-batch path statistics (rows for a CSV export)."""
    rows = []
    for b in ensemble.batches():
        wT = b.w[:, -1]
        rows.append({
            "batch": b.index, "paths": int(wT.size), "mean_wT": float(wT.mean()), "var_wT": float(wT.var()),
            "mean_XT": float(b.x[:, -1].mean()), "max_abs_w": float(np.abs(b.w).max()),
        })
    return rows


def simulate(model: DiffusionModel, seed: int, M: int, grid, batch_size: int = _DEFAULT_BATCH,
             antithetic: bool = False) -> PathEnsemble:
    """Ensemble of ``M`` paths of ``model`` (Lamperti-exact when the model permits)."""
    return PathEnsemble(model, seed, M, grid, batch_size, antithetic)


# --- test functionals --------------------------------------------------------


@dataclass(frozen=True)
class TestFunctional:
    """Smooth functional ``J`` of the Brownian path with closed-form ``D_t J``.

    Kinds
    -----
    ``constant``
        ``J = 1``, ``D_t J = 0``.
    ``hermite``
        ``J = H_n(w_{t*}/sqrt(t*))``, ``D_t J = n/sqrt(t*) H_{n-1}(w_{t*}/sqrt(t*))`` for ``t <= t*``.
    ``increment``
        ``J = w_b^k``, ``D_t J = k w_b^(k-1)`` for ``t <= b``.
    """

    __test__ = False  # not a pytest class

    kind: str = "constant"
    n: int = 0
    t_star: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "hermite", "increment"):
            raise ValueError(f"unknown test functional kind {self.kind!r}")
        if int(self.n) != self.n or self.n < 0:
            raise ValueError("order must be a nonnegative integer")
        if not self.t_star > 0:
            raise ValueError("evaluation time must be positive")

    @classmethod
    def constant(cls) -> "TestFunctional":
        return cls("constant", 0, 1.0)

    @classmethod
    def hermite(cls, n: int, t_star: float = 1.0) -> "TestFunctional":
        return cls("hermite", n, t_star)

    @classmethod
    def increment(cls, k: int, b: float = 1.0) -> "TestFunctional":
        return cls("increment", k, b)

    @property
    def label(self) -> str:
        if self.kind == "constant":
            return "1"
        if self.kind == "hermite":
            return f"H{self.n}(w({self.t_star:g})/sqrt({self.t_star:g}))"
        return f"w({self.t_star:g})^{self.n}"

    def value(self, w_star):
        """``J`` from the Brownian value ``w_{t*}``."""
        w_star = np.asarray(w_star, dtype=float)
        if self.kind == "constant":
            return np.ones_like(w_star)
        if self.kind == "hermite":
            return hermite_eval(self.n, w_star / math.sqrt(self.t_star))
        return w_star**self.n

    def derivative(self, t, w_star):
        """``D_t J`` on the paths with ``w_{t*} = w_star``."""
        w_star = np.asarray(w_star, dtype=float)
        active = np.asarray(t, dtype=float) <= self.t_star
        if self.kind == "constant" or self.n == 0:
            d = np.zeros_like(w_star)
        elif self.kind == "hermite":
            d = self.n / math.sqrt(self.t_star) * hermite_eval(self.n - 1, w_star / math.sqrt(self.t_star))
        else:
            d = self.n * w_star ** (self.n - 1)
        return np.where(active, d, 0.0)

    def grid_index(self, grid: np.ndarray) -> int:
        """Index of ``t*`` in ``grid`` (the constant functional uses the end)."""
        if self.kind == "constant":
            return grid.size - 1
        k = int(np.argmin(np.abs(grid - self.t_star)))
        if not math.isclose(grid[k], self.t_star, rel_tol=1e-12, abs_tol=1e-14):
            raise ValueError(f"evaluation time {self.t_star} is not a grid point")
        return k


def parse_functional(text: str, T: float = 1.0) -> TestFunctional:
    """``1``, ``H<n>`` (at ``t* = T``) or ``w^<k>`` / ``w`` (at ``b = T``)."""
    text = text.strip()
    if text == "1":
        return TestFunctional.constant()
    if text[:1] in ("H", "h") and text[1:].isdigit():
        return TestFunctional.hermite(int(text[1:]), T)
    if text in ("w", "wT", "w_T"):
        return TestFunctional.increment(1, T)
    if text.startswith("w^") and text[2:].isdigit():
        return TestFunctional.increment(int(text[2:]), T)
    raise ValueError(f"unknown test functional {text!r}; expected 1, H<n>, w or w^<k>")


# --- fast mollifiers -------------------------------------------------------------

_G_STEP = 1.0 / 256.0
_G_MAX = 10.0


@lru_cache(maxsize=1)
def _log_table() -> tuple[np.ndarray, np.ndarray]:
    m = np.arange(0.0, _G_MAX + _G_STEP / 2, _G_STEP)
    return expected_log_abs_shifted(m), math.sqrt(2.0) * dawsn(m / math.sqrt(2.0))


def _expected_log_abs_fast(m: np.ndarray) -> np.ndarray:
    """``G(m) = E log|m + Z|`` by cubic Hermite interpolation of exact values and slopes."""
    a = np.abs(m)
    out = np.empty_like(a)
    inside = a < _G_MAX
    g, dg = _log_table()
    u = a[inside] / _G_STEP
    k = u.astype(np.intp)
    s = u - k
    s2 = s * s
    s3 = s2 * s
    out[inside] = (
        (2 * s3 - 3 * s2 + 1) * g[k]
        + (s3 - 2 * s2 + s) * _G_STEP * dg[k]
        + (-2 * s3 + 3 * s2) * g[k + 1]
        + (s3 - s2) * _G_STEP * dg[k + 1]
    )
    if not inside.all():
        out[~inside] = expected_log_abs_shifted(a[~inside])
    return out


def _mollifier(spec: DistributionSpec, eps: float):
    """Vectorized ``Lambda * kappa_eps``; table-based for the log kinds."""
    if spec.kind == Kind.LOGABS:
        return lambda x: math.log(eps) + _expected_log_abs_fast(x / eps)
    if spec.kind == Kind.XLOGABS:
        def f(x):
            m = x / eps
            return eps * (m * (math.log(eps) + _expected_log_abs_fast(m))
                          + math.sqrt(2.0) * dawsn(m / math.sqrt(2.0)) - m)
        return f
    if spec.kind == Kind.DELTA:
        c = 1.0 / (eps * math.sqrt(2.0 * math.pi))
        return lambda x: c * np.exp(-0.5 * np.square((x - spec.y) / eps))
    if spec.kind == Kind.HEAVISIDE:
        return lambda x: ndtr((spec.y - x) / eps)
    return lambda x: mollified_eval(spec, eps, x)


# --- estimators ----------------------------------------------------------------


class _Moments:
    """Running mean and covariance of vector samples (pairwise merging)."""

    def __init__(self, q: int):
        self.n = 0
        self.mean = np.zeros(q)
        self.m2 = np.zeros((q, q))

    def add(self, x: np.ndarray) -> None:
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(axis=0)
        d = x - mb
        m2b = d.T @ d
        delta = mb - self.mean
        n = self.n + nb
        self.m2 += m2b + np.outer(delta, delta) * (self.n * nb / n)
        self.mean += delta * (nb / n)
        self.n = n

    def combine(self, weights: np.ndarray) -> tuple[float, float]:
        """Mean and standard error of ``x @ weights``."""
        value = float(self.mean @ weights)
        if self.n < 2:
            return value, math.inf
        var = float(weights @ self.m2 @ weights) / (self.n - 1)
        return value, math.sqrt(max(var, 0.0) / self.n)


def richardson_weights(h, orders) -> np.ndarray:
    """Weights ``lam`` with ``sum lam = 1`` and ``sum lam h_i^p = 0`` for every order ``p``.

    Applying them to values ``I(h_i) = I0 + sum_p c_p h_i^p`` returns ``I0``.
    """
    h = np.asarray(h, dtype=float)
    orders = list(orders)
    if h.size != len(orders) + 1:
        raise ValueError("need one more level than eliminated orders")
    if np.unique(h).size != h.size:
        raise ValueError("levels must be distinct")
    A = np.vstack([np.ones_like(h)] + [h**p for p in orders])
    rhs = np.zeros(h.size)
    rhs[0] = 1.0
    return np.linalg.solve(A, rhs)


# Leading mollification-bias order in eps.  Point masses at the start point see
# the t^(-1/2) density blow-up and lose one order.
_EPS_ORDER = {
    Kind.DELTA: 1,
    Kind.DDELTA: 1,
    Kind.HEAVISIDE: 2,
    Kind.PV: 2,
    Kind.LOGABS: 2,
    Kind.XLOGABS: 2,
    Kind.SMOOTH: 2,
}


def _check_schedule(eps) -> np.ndarray:
    e = np.asarray(eps, dtype=float).ravel()
    if e.size < 2:
        raise ValueError("the mollification schedule needs at least two levels")
    if np.any(e <= 0) or np.any(np.diff(e) >= 0):
        raise ValueError("the mollification schedule must be positive and strictly decreasing")
    return e


@dataclass(frozen=True)
class PairingEstimate:
    """Extrapolated MC estimate with its ingredients.

    ``levels[i][g]`` is the raw mean at ``eps[i]`` on the fine (``g = 0``) or
    coarse (``g = 1``) grid.  ``eps_bias`` and ``grid_bias`` are the
    corrections applied by each extrapolation.  ``variance_flag`` is set when
    the standard error from all paths is not clearly below the one from the
    first half.
    """

    value: float
    stderr: float
    eps: tuple
    eps_orders: tuple
    levels: tuple
    eps_bias: float
    grid_bias: float
    M: int
    variance_flag: bool
    method: str = "mc"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = list(self.eps)
        d["eps_orders"] = list(self.eps_orders)
        d["levels"] = [list(v) for v in self.levels]
        return d


def _run_estimator(ensemble: PathEnsemble, columns, q: int) -> tuple[_Moments, _Moments]:
    """Feed per-path column blocks into moment accumulators (all paths, first half)."""
    full, half = _Moments(q), _Moments(q)
    cut = max(1, ensemble.n_batches // 2)
    for b in ensemble.batches():
        x = columns(b)
        full.add(x)
        if b.index < cut:
            half.add(x)
    return full, half


def _variance_flag(full: _Moments, half: _Moments, weights: np.ndarray) -> bool:
    if half.n == full.n or half.n < 2:
        return False
    _, se_full = full.combine(weights)
    _, se_half = half.combine(weights)
    # Expected ratio sqrt(half/full); flag a clear failure to shrink.
    expected = math.sqrt(half.n / full.n)
    return bool(se_full > 0 and se_full > 1.25 * expected * se_half)


def pairing_lhs(ensemble: PathEnsemble, spec: DistributionSpec | str, eps, J: TestFunctional,
                eps_orders: tuple | None = None) -> PairingEstimate:
    """``E[(int_0^T (Lambda * kappa_eps)(X_t) dw_t) J]`` extrapolated to ``eps -> 0``, ``dt -> 0``.

    Parameters
    ----------
    ensemble : PathEnsemble
    spec : DistributionSpec or str
    eps : sequence of float
        Strictly decreasing bandwidths; the last ``len(eps_orders) + 1`` are
        used by the extrapolation.
    J : TestFunctional
    eps_orders : tuple of int, optional
        Bias orders eliminated in ``eps``; default is the leading order of the
        kind (1 for point masses, 2 otherwise).

    Notes
    -----
    The step extrapolation compares the Ito sum on the grid with the one on
    every other grid point (first order in the step).
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    out = pairing_lhs_matrix(ensemble, [spec], eps, [J], eps_orders)
    return out[(spec.to_text(), J.label)]


def pairing_lhs_matrix(ensemble: PathEnsemble, specs, eps, Js, eps_orders: tuple | None = None) -> dict:
    """:func:`pairing_lhs` for every ``(spec, J)`` pair in one pass over the paths.

    Returns a dict keyed by ``(spec.to_text(), J.label)``.
    """
    specs = [parse_spec(sp) if isinstance(sp, str) else sp for sp in specs]
    Js = list(Js)
    e = _check_schedule(eps)
    grid = ensemble.grid
    if ensemble.K % 2:
        raise ValueError("step extrapolation needs an even number of grid steps")
    kjs = [J.grid_index(grid) for J in Js]
    molls = [[_mollifier(sp, float(x)) for x in e] for sp in specs]
    ne, nj = e.size, len(Js)
    block = 2 * ne * nj
    q = len(specs) * block

    # Column layout: spec, eps level, J, (fine, coarse).
    def col(si, ei, ji, g):
        return si * block + (ei * nj + ji) * 2 + g

    def columns(b: PathBatch) -> np.ndarray:
        jv = np.column_stack([J.value(b.w[:, k]) for J, k in zip(Js, kjs)])
        coarse_dw = b.w[:, 2::2] - b.w[:, :-2:2]
        dw = b.dw
        xs = b.x[:, :-1]
        out = np.empty((b.w.shape[0], q))
        for si, fs in enumerate(molls):
            for ei, f in enumerate(fs):
                v = f(xs)
                fine = np.einsum("ij,ij->i", v, dw)
                coarse = np.einsum("ij,ij->i", v[:, ::2], coarse_dw)
                for ji in range(nj):
                    out[:, col(si, ei, ji, 0)] = fine * jv[:, ji]
                    out[:, col(si, ei, ji, 1)] = coarse * jv[:, ji]
        return out

    full, half = _run_estimator(ensemble, columns, q)
    results = {}
    for si, sp in enumerate(specs):
        orders = tuple(eps_orders) if eps_orders is not None else (_EPS_ORDER[sp.kind],)
        used = e[-(len(orders) + 1):]
        lam = richardson_weights(used, orders)
        start = ne - used.size
        for ji, J in enumerate(Js):
            fine = np.zeros(q)
            coarse = np.zeros(q)
            for ei in range(start, ne):
                fine[col(si, ei, ji, 0)] = lam[ei - start]
                coarse[col(si, ei, ji, 1)] = lam[ei - start]
            weights = 2.0 * fine - coarse
            value, se = full.combine(weights)
            fine_value = float(full.mean @ fine)
            last_fine = float(full.mean[col(si, ne - 1, ji, 0)])
            levels = tuple(
                (float(full.mean[col(si, ei, ji, 0)]), float(full.mean[col(si, ei, ji, 1)])) for ei in range(ne)
            )
            results[(sp.to_text(), J.label)] = PairingEstimate(
                value=value,
                stderr=se,
                eps=tuple(float(x) for x in e),
                eps_orders=orders,
                levels=levels,
                eps_bias=fine_value - last_fine,
                grid_bias=value - fine_value,
                M=full.n,
                variance_flag=_variance_flag(full, half, weights),
            )
    return results


# --- deterministic right side ----------------------------------------------


def _lamperti_spec(spec: DistributionSpec, model: DiffusionModel) -> tuple[DistributionSpec, float]:
    """``Lambda o psi^{-1}`` as a catalog spec times a constant factor.

    ``X_t = psi^{-1}(w_t)`` so ``E[Lambda(X_t) G(w)] = factor E[spec'(w_t) G(w)]``.
    """
    if not model.lamperti_exact:
        raise ValueError("deterministic pairings need a Stratonovich-symmetric model")
    if _is_unit(model):
        if spec.kind in Kind.LOCATED:
            return DistributionSpec(spec.kind, spec.y - model.x, spec.order), 1.0
        if model.x == 0.0:
            return spec, 1.0
        raise ValueError(f"{spec.to_text()} is only supported for the unit model started at 0")
    psi = model.lamperti
    if spec.kind == Kind.DELTA:
        return DistributionSpec(Kind.DELTA, float(psi(spec.y))), 1.0 / float(model.sigma(np.array(spec.y)))
    if spec.kind == Kind.HEAVISIDE:
        return DistributionSpec(Kind.HEAVISIDE, float(psi(spec.y))), 1.0
    if spec.kind == Kind.SMOOTH:
        f = spec.func
        return DistributionSpec(Kind.SMOOTH, func=lambda v: f(psi.inverse(np.clip(v, *psi.image))),
                                growth=spec.growth, name=spec.name), 1.0
    raise ValueError(f"{spec.to_text()} pull-back through a non-unit model is not supported")


class _ScaleFamily:
    """Unnormalized ``a_m(c) = E[Lambda(c Z) H_m(Z)]`` for ``m <= mmax`` at many scales.

    The log kinds scale exactly (``log|cZ| = log c + log|Z|``, ``pv(cZ) = pv(Z)/c``),
    so their quadrature runs once at ``c = 1``.
    """

    def __init__(self, spec: DistributionSpec, mmax: int):
        self.spec = spec
        self.mmax = mmax
        self._lf = np.array([math.exp(0.5 * log_factorial(m)) for m in range(mmax + 1)])
        if spec.kind in (Kind.LOGABS, Kind.PV, Kind.XLOGABS):
            self._base = gaussian_pairings(spec, 1.0, mmax).normalized * self._lf

    def __call__(self, c: float) -> np.ndarray:
        k = self.spec.kind
        if k == Kind.LOGABS:
            a = self._base.copy()
            a[0] += math.log(c)
            return a
        if k == Kind.PV:
            return self._base / c
        if k == Kind.XLOGABS:
            a = self._base.copy()
            if self.mmax >= 1:
                a[1] += math.log(c)
            return c * a
        return gaussian_pairings(self.spec, c, self.mmax).normalized * self._lf


def _time_quadrature(g, t1: float, singular: bool) -> float:
    """``int_0^t1 g(t) dt`` with ``t = t1 u^2``; 24- vs 20-point panel check."""
    if singular:
        breaks = graded_breaks(0.0, 1.0, 0.125, levels=40)
    else:
        breaks = np.linspace(0.0, 1.0, 9)

    def rule(m):
        u, wu = panel_rule(breaks, m)
        t = t1 * u * u
        vals = np.array([g(ti) for ti in t])
        return math.fsum((vals * wu * 2.0 * t1 * u).tolist())

    fine, coarse = rule(24), rule(20)
    if abs(fine - coarse) > _RHS_TOL * max(1.0, abs(fine)):
        raise QuadratureError("time integral of the pairing", abs(fine - coarse))
    return fine


def _gaussian_moment(r: int, v: float) -> float:
    if r % 2:
        return 0.0
    return v ** (r // 2) * math.prod(range(r - 1, 0, -2))


def _monomial_hermite(i: int) -> np.ndarray:
    """Coefficients of ``z^i`` in the probabilists' Hermite basis."""
    c = np.zeros(i + 1)
    c[i] = 1.0
    return hermite_e.poly2herme(c)


def pairing_rhs(spec: DistributionSpec | str, model: DiffusionModel, J: TestFunctional, T: float) -> float:
    """``int_0^T E[Lambda(X_t) D_t J] dt`` by Gaussian pairings and time quadrature.

    Uses ``E[H_{n-1}(w_{t*}/sqrt(t*)) | F_t] = (t/t*)^((n-1)/2) H_{n-1}(w_t/sqrt t)``
    for Hermite functionals and independent increments for ``w_b^k``.
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    if not T > 0:
        raise ValueError("horizon must be positive")
    if J.kind == "constant" or J.n == 0:
        return 0.0
    base, factor = _lamperti_spec(spec, model)
    t1 = min(T, J.t_star)
    ts = J.t_star
    n = J.n
    mmax = n - 1
    fam = _ScaleFamily(base, mmax)
    singular = base.kind not in (Kind.SMOOTH,)
    if J.kind == "hermite":
        def g(t):
            return (n / math.sqrt(ts)) * (t / ts) ** (0.5 * (n - 1)) * fam(math.sqrt(t))[n - 1]
    else:
        coefs = [_monomial_hermite(i) for i in range(n)]

        def g(t):
            a = fam(math.sqrt(t))
            total = 0.0
            for i in range(n):
                mom = _gaussian_moment(n - 1 - i, ts - t)
                if mom == 0.0:
                    continue
                e_i = t ** (0.5 * i) * float(np.dot(coefs[i], a[: i + 1]))
                total += comb(n - 1, i, exact=True) * e_i * mom
            return n * total
    return factor * _time_quadrature(g, t1, singular)


# --- Ito formula -------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    name: str
    estimate: float
    stderr: float
    method: str


@dataclass(frozen=True)
class ItoReport:
    """``LHS - RHS`` of the Ito formula paired with ``J``.

    ``oracles`` holds the two deterministic values of the expected identity and
    ``oracle_gap`` their difference; ``passed`` requires ``|residual| < 3 stderr``.
    """

    case: str
    J: str
    terms: tuple
    residual: float
    stderr: float
    passed: bool
    oracles: dict
    oracle_gap: float
    M: int
    eps: tuple
    K: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "J": self.J,
            "terms": [asdict(t) for t in self.terms],
            "residual": self.residual,
            "stderr": self.stderr,
            "pass": self.passed,
            "oracles": dict(self.oracles),
            "oracle_gap": self.oracle_gap,
            "M": self.M,
            "eps": list(self.eps),
            "K": self.K,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _gaussian_expectation(f, scale: float, kink: float | None = None) -> float:
    """``E f(scale Z)`` with panels split at an optional kink of ``f``."""
    pts = [-12.0, 12.0]
    if kink is not None and -12.0 < kink / scale < 12.0:
        pts.insert(1, kink / scale)
    if 0.0 not in pts:
        pts.insert(1 if pts[1] > 0 else len(pts) - 1, 0.0)
    pts = sorted(set(pts))
    breaks = np.unique(np.concatenate([np.linspace(a, b, 25) for a, b in zip(pts[:-1], pts[1:])]))
    z, wz = panel_rule(breaks, 24)
    vals = f(scale * z) * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return math.fsum((vals * wz).tolist())


def _needs_terminal(J: TestFunctional, T: float) -> None:
    if J.kind != "constant" and not math.isclose(J.t_star, T, rel_tol=1e-12):
        raise ValueError("Ito verification evaluates J at the horizon T")


def ito_verify(model: DiffusionModel, case: str, J: TestFunctional, T: float = 1.0, M: int = 1_000_000,
               eps=(0.1, 0.05), *, y: float = 0.5, seed: int = 0, K: int = 256,
               batch_size: int = _DEFAULT_BATCH) -> ItoReport:
    """Pair both sides of the Ito formula with ``J`` and compare.

    Parameters
    ----------
    case : {"tanaka", "fundamental", "pv"}
        ``"tanaka"``/``"fundamental"``: ``f = u`` with ``L u = delta_y``
        (``|w - y|`` for the unit model).  ``"pv"``: ``f(x) = x log|x| - x`` on
        Brownian motion, ``A f = log|x|`` and ``L f = pv(1/x)/2``.
    eps : sequence of float
        Mollification schedule for the ``pv`` stochastic integral.

    Notes
    -----
    Path terms are MC (step-extrapolated Ito sums, with ``eps`` extrapolation
    for the log integrand) and the time-integral term is deterministic.  The
    residual's standard error comes from the per-path combined estimator.
    """
    if case == "fundamental":
        case = "tanaka"
    if case not in ("tanaka", "pv"):
        raise ValueError(f"unknown case {case!r}; expected tanaka, fundamental or pv")
    if not model.lamperti_exact:
        raise ValueError("Ito verification needs a Stratonovich-symmetric model")
    _needs_terminal(J, T)
    grid = make_grid(T, K)
    ens = simulate(model, seed, M, grid, batch_size)
    kj = J.grid_index(grid)
    if case == "tanaka":
        return _ito_tanaka(model, J, T, ens, kj, y, seed, K)
    if not (_is_unit(model) and model.x == 0.0):
        raise ValueError("the pv case is stated for Brownian motion started at 0")
    return _ito_pv(model, J, T, ens, kj, _check_schedule(eps), seed, K)


def _ito_tanaka(model, J, T, ens, kj, y, seed, K) -> ItoReport:
    fs = fundamental_solution(model, y)
    ux = float(fs.u(model.x))
    a = float(model.lamperti(y)) if not _is_unit(model) else y - model.x
    sy = float(model.sigma(np.array(y)))

    # In Lamperti coordinates u(X) = |w - a| / sigma(y) and Au(X) = sgn(w - a) / sigma(y).
    def columns(b: PathBatch) -> np.ndarray:
        jv = J.value(b.w[:, kj])
        uT = fs.u(b.x[:, -1])
        au = np.where(b.w[:, :-1] >= a, 1.0, -1.0) / sy
        fine = np.einsum("ij,ij->i", au, b.dw)
        coarse = np.einsum("ij,ij->i", au[:, ::2], b.w[:, 2::2] - b.w[:, :-2:2])
        return np.column_stack([(uT - ux) * jv, fine * jv, coarse * jv])

    full, half = _run_estimator(ens, columns, 3)
    lhs, lhs_se = full.combine(np.array([1.0, 0.0, 0.0]))
    si, si_se = full.combine(np.array([0.0, 2.0, -1.0]))
    time_term = _time_term_delta(model, y, J, T)
    weights = np.array([1.0, -2.0, 1.0])
    res_mc, se = full.combine(weights)
    residual = res_mc - time_term
    # Deterministic oracles: E[(u(X_T) - u(x)) J] directly, and the pairing side.
    direct = _tanaka_direct(J, T, a, sy, ux)
    pairing = _tanaka_pairing_side(model, y, J, T) + time_term
    terms = (
        Term("E[(u(X_T)-u(x)) J]", lhs, lhs_se, "mc"),
        Term("E[(int Au(X) dw) J]", si, si_se, "mc, step-extrapolated Ito sums"),
        Term("E[(int delta_y(X) dt) J]", time_term, 0.0, "quadrature of the transition density"),
    )
    return ItoReport("tanaka", J.label, terms, residual, se, abs(residual) < 3.0 * se,
                     {"direct": float(direct), "pairing": float(pairing)}, float(abs(direct - pairing)), full.n, (), K, seed)


def _time_term_delta(model, y, J, T) -> float:
    """``int_0^T E[delta_y(X_t) J] dt`` with ``J`` a function of ``w_T``."""
    if J.kind == "constant":
        g = lambda t: float(transition_density(model, t, y))
    else:
        spec, factor = _lamperti_spec(DistributionSpec(Kind.DELTA, y), model)
        a = spec.y
        jfun = lambda w: J.value(w)

        # E[delta_a(w_t) J(w_T)] = p_t(a) E[J(a + sqrt(T - t) Z)]
        def g(t):
            dens = math.exp(-0.5 * a * a / t) / math.sqrt(2.0 * math.pi * t)
            if T - t <= 0:
                inner = float(jfun(np.array(a)))
            else:
                inner = _gauss_poly_expectation(jfun, a, T - t)
            return factor * dens * inner
    return _time_quadrature(g, T, singular=True)


def _gauss_poly_expectation(f, mean: float, var: float) -> float:
    z, wz = np.polynomial.hermite_e.hermegauss(40)
    return float(np.dot(wz, f(mean + math.sqrt(var) * z)) / math.sqrt(2.0 * math.pi))


def _tanaka_pairing_side(model, y, J, T) -> float:
    """``int_0^T E[Au(X_t) D_t J] dt`` with ``Au = (1 - 2 1{w < a}) / sigma(y)``."""
    if J.kind == "constant" or J.n == 0:
        return 0.0
    sy = float(model.sigma(np.array(y)))
    heav = pairing_rhs(DistributionSpec(Kind.HEAVISIDE, y), model, J, T)
    const = _constant_pairing(J, T)
    return (const - 2.0 * heav) / sy


def _constant_pairing(J: TestFunctional, T: float) -> float:
    """``int_0^T E[D_t J] dt``."""
    if J.kind == "hermite":
        # E[H_{n-1}] vanishes unless n = 1.
        return math.sqrt(J.t_star) if J.n == 1 else 0.0
    n = J.n
    return n * _time_quadrature(lambda t: _gaussian_moment(n - 1, J.t_star), min(T, J.t_star), False)


def _tanaka_direct(J, T, a, sy, ux) -> float:
    """``E[(u(X_T) - u(x)) J]`` from Gaussian closed forms or 1-D quadrature."""
    rt = math.sqrt(T)
    if J.kind == "constant":
        val = 2.0 * rt * math.exp(-0.5 * a * a / T) / math.sqrt(2.0 * math.pi) + a * (2.0 * ndtr(a / rt) - 1.0)
        return val / sy - ux
    if J.kind == "increment" and J.n == 1:
        return T * (1.0 - 2.0 * ndtr(a / rt)) / sy
    f = lambda w: (np.abs(w - a) / sy - ux) * J.value(w)
    return _gaussian_expectation(f, rt, kink=a)


def _ito_pv(model, J, T, ens, kj, eps, seed, K) -> ItoReport:
    f = lambda x: np.where(x == 0, 0.0, x * np.log(np.abs(np.where(x == 0, 1.0, x))) - x)
    spec = DistributionSpec(Kind.LOGABS)
    lam = richardson_weights(eps[-2:], (2,))
    molls = [_mollifier(spec, float(e)) for e in eps[-2:]]

    def columns(b: PathBatch) -> np.ndarray:
        jv = J.value(b.w[:, kj])
        out = [f(b.w[:, -1]) * jv]
        coarse_dw = b.w[:, 2::2] - b.w[:, :-2:2]
        for m in molls:
            v = m(b.w[:, :-1])
            out.append(np.einsum("ij,ij->i", v, b.dw) * jv)
            out.append(np.einsum("ij,ij->i", v[:, ::2], coarse_dw) * jv)
        return np.column_stack(out)

    full, half = _run_estimator(ens, columns, 5)
    si_w = np.zeros(5)
    si_w[1::2] = 2.0 * lam
    si_w[2::2] = -lam
    lhs, lhs_se = full.combine(np.array([1.0, 0, 0, 0, 0]))
    si, si_se = full.combine(si_w)
    time_term = 0.5 * pairing_rhs_time(DistributionSpec(Kind.PV), J, T)
    res_mc, se = full.combine(np.concatenate([[1.0], -si_w[1:]]))
    residual = res_mc - time_term
    direct = _gaussian_expectation(lambda w: f(w) * J.value(w), math.sqrt(T))
    pairing = pairing_rhs(spec, model, J, T) + time_term
    terms = (
        Term("E[(w_T log|w_T| - w_T) J]", lhs, lhs_se, "mc"),
        Term("E[(int log|w| dw) J]", si, si_se, "mc, eps- and step-extrapolated Ito sums"),
        Term("E[(1/2 int pv(1/w) dt) J]", time_term, 0.0, "quadrature of Gaussian pairings"),
    )
    return ItoReport("pv", J.label, terms, residual, se, abs(residual) < 3.0 * se,
                     {"direct": float(direct), "pairing": float(pairing)}, float(abs(direct - pairing)), full.n,
                     tuple(float(e) for e in eps), K, seed)


def pairing_rhs_time(spec: DistributionSpec, J: TestFunctional, T: float) -> float:
    """``int_0^T E[Lambda(w_t) J] dt`` for ``J`` a function of ``w_{t*}`` with ``t* >= T``.

    ``J`` is expanded in Hermite polynomials of ``w_t`` by conditioning, the
    same reduction as in :func:`pairing_rhs`.
    """
    if J.kind == "constant":
        fam = _ScaleFamily(spec, 0)
        return _time_quadrature(lambda t: fam(math.sqrt(t))[0], T, True)
    n = J.n
    ts = J.t_star
    if J.kind == "hermite":
        fam = _ScaleFamily(spec, n)
        return _time_quadrature(lambda t: (t / ts) ** (0.5 * n) * fam(math.sqrt(t))[n], T, True)
    fam = _ScaleFamily(spec, n)
    coefs = [_monomial_hermite(i) for i in range(n + 1)]

    def g(t):
        a = fam(math.sqrt(t))
        total = 0.0
        for i in range(n + 1):
            mom = _gaussian_moment(n - i, ts - t)
            if mom:
                total += comb(n, i, exact=True) * t ** (0.5 * i) * float(np.dot(coefs[i], a[: i + 1])) * mom
        return total
    return _time_quadrature(g, T, True)


# --- local time ------------------------------------------------------------------


@dataclass(frozen=True)
class LocalTimeEstimate:
    """MC moments of ``sigma(y)^2 int_0^T (delta_y * kappa_eps)(X_t) dt``.

    ``mean`` is extrapolated in ``eps`` (first order, last two levels) and in
    the step.  ``second_moment`` also removes the ``eps^2`` term when three or
    more levels are given, since a first-order fit leaves a bias of several
    1e-3 there.  ``levels`` and ``level_stderr`` hold the raw fine- and
    coarse-grid means per bandwidth.  ``richardson_pairs`` holds the two-level extrapolations of the
    mean from consecutive bandwidth pairs; ``bias_gate`` requires the last two
    to differ by less than one standard error.
    """

    mean: float
    stderr: float
    second_moment: float
    second_moment_stderr: float
    variance: float
    levels: tuple
    level_stderr: tuple
    richardson_pairs: tuple
    bias_gate: bool | None
    oracle_mean: float
    M: int
    eps: tuple
    K: int

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("levels", "level_stderr", "richardson_pairs", "eps"):
            d[k] = [list(v) if isinstance(v, tuple) else v for v in d[k]]
        return d


def mc_local_time(model: DiffusionModel, y: float, eps, M: int, grid, seed: int = 0,
                  batch_size: int = _DEFAULT_BATCH) -> LocalTimeEstimate:
    """Occupation-time estimate of the symmetric local time at ``y``.

    The time integral uses the trapezoidal rule on the grid (and on every other
    grid point for the step extrapolation).
    """
    e = _check_schedule(eps)
    ens = simulate(model, seed, M, grid, batch_size)
    g = ens.grid
    if ens.K % 2:
        raise ValueError("step extrapolation needs an even number of grid steps")
    sy2 = float(model.sigma(np.array(y))) ** 2
    dt = np.diff(g)
    tw = np.zeros(g.size)
    tw[:-1] += 0.5 * dt
    tw[1:] += 0.5 * dt
    gc = g[::2]
    dtc = np.diff(gc)
    twc = np.zeros(gc.size)
    twc[:-1] += 0.5 * dtc
    twc[1:] += 0.5 * dtc
    delta = DistributionSpec(Kind.DELTA, float(y))
    molls = [_mollifier(delta, float(x)) for x in e]
    q = 4 * e.size

    def columns(b: PathBatch) -> np.ndarray:
        out = np.empty((b.x.shape[0], q))
        for i, f in enumerate(molls):
            v = f(b.x)
            fine = sy2 * (v @ tw)
            coarse = sy2 * (v[:, ::2] @ twc)
            out[:, 4 * i: 4 * i + 4] = np.column_stack([fine, coarse, fine * fine, coarse * coarse])
        return out

    full, _ = _run_estimator(ens, columns, q)

    def weights(level_idx, moment, orders=(1,)):
        lam = richardson_weights(e[list(level_idx)], orders)
        w = np.zeros(q)
        for li, l in zip(level_idx, lam):
            w[4 * li + 2 * moment] += 2.0 * l
            w[4 * li + 2 * moment + 1] -= l
        return w

    last = (e.size - 2, e.size - 1)
    mean, se = full.combine(weights(last, 0))
    if e.size >= 3:
        m2, m2_se = full.combine(weights((e.size - 3, e.size - 2, e.size - 1), 1, (1, 2)))
    else:
        m2, m2_se = full.combine(weights(last, 1))
    pairs = tuple(full.combine(weights((i, i + 1), 0)) for i in range(e.size - 1))
    gate = None
    if len(pairs) >= 2:
        gate = bool(abs(pairs[-1][0] - pairs[-2][0]) < pairs[-1][1])
    levels = tuple((float(full.mean[4 * i]), float(full.mean[4 * i + 1])) for i in range(e.size))
    unit_col = np.eye(q)
    level_se = tuple((full.combine(unit_col[4 * i])[1], full.combine(unit_col[4 * i + 1])[1]) for i in range(e.size))
    from .localtime import occupation_mean

    oracle = math.sqrt(sy2) * float(occupation_mean(model, y, float(g[-1])))
    return LocalTimeEstimate(
        mean=mean, stderr=se, second_moment=m2, second_moment_stderr=m2_se,
        variance=m2 - mean * mean, levels=levels, level_stderr=level_se,
        richardson_pairs=tuple((float(v), float(s)) for v, s in pairs),
        bias_gate=gate, oracle_mean=oracle, M=full.n, eps=tuple(float(x) for x in e), K=ens.K,
    )
