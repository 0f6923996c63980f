"""Chaos norms of diffusion local times and Hoelder-continuity experiments.

For a Stratonovich-symmetric model, ``sigma(y) int_0^1 delta_y(X_t) dt`` is
the Brownian occupation density at ``a = psi(y)``.  Its n-th chaos has L2 norm
``K_n(a, a)`` where

    K_n(a, b) = (2/n!) int int_{0<u<v<1} u^n g_n^a(u) g_n^b(v) du dv,
    g_n^c(t) = t^{-(n+1)/2} H_n(c/sqrt(t)) phi(c/sqrt(t)).

The default route removes the inner integral exactly with the heat equation
(``g_n^b`` is the n-th space derivative of the heat kernel, so
``int_u^1 g_n^b = 2 [g_{n-2}^b(1) - g_{n-2}^b(u)]`` for ``n >= 2``), leaving a
1-D integral in ``tau = sqrt(u)`` that is evaluated for all orders in a single
Hermite recurrence.  A direct 2-D quadrature is kept as an independent check.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import erfc, gammaln

from .chaos import IndexEstimate, fit_tail_exponent
from .diffusion import DiffusionModel
from .hermite import iter_hermite_functions
from .quadrature import panel_rule

__all__ = [
    "HolderExperiment",
    "HolderBound",
    "LocalTimeNorm",
    "DensityHolderReport",
    "iterated_integral_l2",
    "cross_kernel_terms",
    "cross_kernel_term_quadrature",
    "local_time_terms",
    "local_time_chaos_norm",
    "holder_terms",
    "holder_term_quadrature",
    "holder_difference_norm",
    "holder_table",
    "holder_bound_terms",
    "holder_bound_constant",
    "choose_truncation",
    "occupation_mean",
    "density_holder_check",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)
LOCAL_TIME_CRITICAL_INDEX = 0.5


def iterated_integral_l2(n: int, t: float = 1.0) -> float:
    """``E[(int_{0<t_1<...<t_n<t} dw...dw)^2] = t^n / n!``."""
    if int(n) != n or n < 0 or not t > 0:
        raise ValueError("need integer n >= 0 and t > 0")
    return math.exp(n * math.log(t) - math.lgamma(n + 1.0)) if n else 1.0


def _heat_primitive(t, b: float):
    """``int_0^t p_v(b) dv`` for the standard heat kernel ``p_v``."""
    t = np.asarray(t, dtype=float)
    b = abs(b)
    return 2.0 * t * np.exp(-b * b / (2.0 * t)) / np.sqrt(2.0 * math.pi * t) - b * erfc(b / np.sqrt(2.0 * t))


def _tau_rule(cs, N: int, m: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Panels in ``tau = sqrt(u)`` that resolve ``psi_n(c/tau)`` for ``n <= N``.

    Below ``|c|/tau = 2 sqrt(N+1) + 14`` the Hermite functions decay like
    ``exp(-c^2/(4 tau^2))`` and the interval is covered geometrically.  In the
    oscillatory zone the local wavelength in ``tau`` is about
    ``tau^2 / (sqrt(N) |c|)``, and near ``tau = 1`` the factor ``tau^n`` needs
    panels of relative width ``1/N``.
    """
    cs = [abs(float(c)) for c in cs]
    edge = 2.0 * math.sqrt(N + 1.0) + 14.0
    nz = [c for c in cs if c > 0]
    t_lo = min(nz) / edge if nz else 1e-3
    t_lo = min(t_lo, 0.5)
    br = [0.0] + [t_lo * 2.0**-k for k in range(40, 0, -1)]
    thr = math.exp(-41.0 / max(N, 1))
    t = t_lo
    while t < 1.0:
        active = [c for c in cs if c / t < edge]
        c_eff = max(active) if active else 0.0
        h = 0.05
        if c_eff > 0:
            h = min(h, 4.0 * t * t / (math.sqrt(N + 1.0) * c_eff))
        if t + h > thr:
            h = min(h, max(8.0 * t / max(N, 1), thr - t))
        t = min(1.0, t + h)
        br.append(t)
    return panel_rule(np.array(br), m)


def cross_kernel_terms(cs, N: int) -> np.ndarray:
    """``K_n(c_i, c_j)`` for all pairs of Lamperti levels and ``n <= N``.

    Returns
    -------
    ndarray
        Shape ``(k, k, N + 1)`` for ``k = len(cs)``.
    """
    cs = np.asarray(cs, dtype=float).ravel()
    k = cs.size
    tau, W = _tau_rule(cs, N)
    out = np.zeros((k, k, N + 1))
    # n = 0: 2 int p_u(a) [F(1, b) - F(u, b)] du with u = tau^2
    pa = np.exp(-np.square(cs[:, None] / tau) / 2.0) / (_SQRT_2PI * tau)
    for j, b in enumerate(cs):
        inner = _heat_primitive(1.0, b) - _heat_primitive(tau * tau, b)
        out[:, j, 0] = 2.0 * (pa * (W * 2.0 * tau * inner)).sum(axis=1)
    grid_it = iter_hermite_functions(N, (cs[:, None] / tau).ravel())
    one_it = iter_hermite_functions(N, cs)
    hist = []
    hist_one = []
    w2t = 2.0 * tau * W
    for n in range(N + 1):
        p_grid = next(grid_it).reshape(k, -1)
        p_one = next(one_it)
        if n == 1:
            for j, b in enumerate(cs):
                q = math.copysign(1.0, b) * (erfc(abs(b) / math.sqrt(2.0)) - erfc(abs(b) / (math.sqrt(2.0) * tau)))
                out[:, j, 1] = 2.0 * (p_grid * (w2t * q)).sum(axis=1)
        elif n >= 2:
            q_grid, q_one = hist[0], hist_one[0]
            coef = 4.0 / math.sqrt(n * (n - 1.0))
            first = p_grid @ (W * 2.0 * tau**n)
            second = (p_grid * w2t) @ q_grid.T
            out[:, :, n] = coef * (first[:, None] * q_one[None, :] - second)
        hist.append(p_grid)
        hist_one.append(p_one)
        if len(hist) > 2:
            hist.pop(0)
            hist_one.pop(0)
    return out


def _g_hat(n: int, c: float, t: float) -> float:
    """``t^{-(n+1)/2} psi_n(c/sqrt(t))`` (``g_n^c`` divided by ``sqrt(n!)``)."""
    v = 0.0
    for v in iter_hermite_functions(n, np.array([c / math.sqrt(t)])):
        pass
    return float(v[0]) * t ** (-(n + 1) / 2.0)


def _dblquad_tau_rho(f, tol: float) -> float:
    val, err = integrate.dblquad(f, 0.0, 1.0, 0.0, 1.0, epsabs=tol, epsrel=tol)
    if not math.isfinite(val) or err > max(10 * tol, 10 * tol * abs(val)):
        raise RuntimeError(f"2-D time quadrature did not converge (error {err:.2e})")
    return val


def cross_kernel_term_quadrature(a: float, b: float, n: int, tol: float = 1e-11) -> float:
    """``K_n(a, b)`` by 2-D quadrature with ``(v, u) = (tau^2, tau^2 rho^2)``."""

    def f(rho, tau):
        u, v = (tau * rho) ** 2, tau * tau
        return 2.0 * u**n * _g_hat(n, a, u) * _g_hat(n, b, v) * 4.0 * tau**3 * rho

    return _dblquad_tau_rho(f, tol)


def _levels(model: DiffusionModel, *ys) -> list[float]:
    if model.drift != "stratonovich":
        raise ValueError("local-time kernels need the Stratonovich-symmetric drift")
    return [float(model.lamperti.forward(y)) for y in ys]


def local_time_terms(model: DiffusionModel, y: float, N: int) -> np.ndarray:
    """``||J_n(sigma(y) int_0^1 delta_y(X_t) dt)||_2^2`` for ``n <= N``."""
    (a,) = _levels(model, y)
    return cross_kernel_terms([a], N)[0, 0]


@dataclass(frozen=True)
class LocalTimeNorm:
    """Truncated Sobolev norm of a local time with convergence diagnostics.

    ``gaps`` are the last few increments of the squared partial sums.
    """

    value: float
    s: float
    N: int
    terms: np.ndarray = field(repr=False)
    divergent: bool
    gaps: np.ndarray = field(repr=False)
    estimate: IndexEstimate | None = field(default=None, repr=False)

    @property
    def mean_square(self) -> float:
        """Zeroth chaos, the squared mean."""
        return float(self.terms[0])


def local_time_chaos_norm(model: DiffusionModel, y: float, s: float, N: int, method: str = "reduced") -> LocalTimeNorm:
    """``||sigma(y) int_0^1 delta_y(X_t) dt||_{2,s}`` truncated at ``N``.

    Parameters
    ----------
    method : {"reduced", "quadrature"}
        Heat-equation reduction (all orders in one pass) or direct 2-D
        quadrature per order (small ``N`` only).

    Notes
    -----
    The series diverges for ``s >= 1/2``; the flag uses that threshold.  A
    fitted tail exponent is attached as a diagnostic when enough terms exist.
    """
    if method == "reduced":
        terms = local_time_terms(model, y, N)
    elif method == "quadrature":
        (a,) = _levels(model, y)
        terms = np.array([cross_kernel_term_quadrature(a, a, n) for n in range(N + 1)])
    else:
        raise ValueError(f"unknown method {method!r}")
    n = np.arange(N + 1, dtype=float)
    weighted = (1.0 + n) ** s * terms
    sq = math.fsum(weighted.tolist())
    est = None
    if N >= 40:
        try:
            est = fit_tail_exponent(terms)
        except ValueError:
            est = None
    return LocalTimeNorm(
        math.sqrt(sq), float(s), N, terms, s >= LOCAL_TIME_CRITICAL_INDEX, weighted[-min(N + 1, 8):], est
    )


def holder_terms(model: DiffusionModel, y: float, z: float, N: int) -> np.ndarray:
    """``I_n`` for ``n <= N`` from ``E[(X_n - Y_n)^2] = K(a,a) + K(b,b) - K(a,b) - K(b,a)``."""
    a, b = _levels(model, y, z)
    if a == b:
        return np.zeros(N + 1)
    K = cross_kernel_terms([a, b], N)
    return K[0, 0] + K[1, 1] - K[0, 1] - K[1, 0]


def holder_term_quadrature(model: DiffusionModel, y: float, z: float, n: int, tol: float = 1e-11) -> float:
    """``I_n = (2/n!) int int_{s<t} s^n h(s) h(t)`` with ``h = g^a - g^b``, by 2-D quadrature."""
    a, b = _levels(model, y, z)

    def f(rho, tau):
        u, v = (tau * rho) ** 2, tau * tau
        hu = _g_hat(n, a, u) - _g_hat(n, b, u)
        hv = _g_hat(n, a, v) - _g_hat(n, b, v)
        return 2.0 * u**n * hu * hv * 4.0 * tau**3 * rho

    return _dblquad_tau_rho(f, tol)


@dataclass(frozen=True)
class HolderExperiment:
    """Parameters of a Hoelder experiment on the unit time interval.

    Attributes
    ----------
    model : DiffusionModel
    s : float
        Sobolev index, ``s < 1/2``.
    beta : float
        Exponent in ``(0, min(1/2 - s, 1))``.
    pairs : tuple of (float, float)
    N : int
        Chaos truncation.
    lam : float, optional
        Ellipticity floor for the bound (default ``model.lam``).
    """

    model: DiffusionModel
    s: float
    beta: float
    pairs: tuple
    N: int = 2000
    lam: float | None = None

    def __post_init__(self):
        if not self.s + self.beta < 0.5:
            raise ValueError("need s + beta < 1/2")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        object.__setattr__(self, "pairs", tuple((float(y), float(z)) for y, z in self.pairs))


def _norm_from_terms(terms: np.ndarray, s: float) -> float:
    n = np.arange(terms.size, dtype=float)
    return math.sqrt(max(math.fsum(((1.0 + n) ** s * terms).tolist()), 0.0))


def holder_difference_norm(exp: HolderExperiment) -> np.ndarray:
    """``||sigma(y) int delta_y(X) - sigma(z) int delta_z(X)||_{2,s}`` for each pair."""
    return np.array([_norm_from_terms(holder_terms(exp.model, y, z, exp.N), exp.s) for y, z in exp.pairs])


def holder_bound_terms(s: float, beta: float, lam: float, N: int) -> np.ndarray:
    """``c_2^2/(1-beta) (1+n)^s 2^{n+beta+1} Gamma((n+beta+1)/2)^2 / (n! (n-beta+1))``."""
    n = np.arange(N + 1, dtype=float)
    log_c2sq = -2.0 * math.log(math.pi) - beta * math.log(lam)
    lt = (
        log_c2sq - math.log(1.0 - beta) + s * np.log1p(n) + (n + beta + 1.0) * math.log(2.0)
        + 2.0 * gammaln((n + beta + 1.0) / 2.0) - gammaln(n + 1.0) - np.log(n - beta + 1.0)
    )
    return np.exp(lt)


@dataclass(frozen=True)
class HolderBound:
    """``c(s, beta)`` with ``||diff||_{2,s} <= c |y - z|^beta``.

    ``squared`` is the truncated sum plus ``tail``, the bound on the omitted
    terms from their ``n^{s+beta-3/2}`` decay.
    """

    s: float
    beta: float
    lam: float
    N: int
    partial: float
    tail: float
    divergent: bool

    @property
    def squared(self) -> float:
        return self.partial + self.tail

    @property
    def value(self) -> float:
        return math.sqrt(self.squared)


def holder_bound_constant(s: float, beta: float, lam: float, N: int) -> HolderBound:
    """Explicit Hoelder constant, summed in log space with a tail bound.

    The terms decay like ``n^{s+beta-3/2}`` and are eventually decreasing, so
    ``sum_{n>N} term_n <= term_N * (N + 1) / (1/2 - s - beta)`` up to
    ``O(1/N)``; the factor ``(1 + 2/N)`` covers that correction.  For
    ``s + beta >= 1/2`` the series diverges and the result is flagged.
    """
    if not (0.0 < beta < 1.0) or not lam > 0:
        raise ValueError("need beta in (0, 1) and lam > 0")
    if s + beta >= 0.5:
        return HolderBound(s, beta, lam, N, math.inf, math.inf, True)
    t = holder_bound_terms(s, beta, lam, N)
    gap = 0.5 - s - beta
    tail = float(t[-1]) * (N + 1.0) / gap * (1.0 + 2.0 / max(N, 1))
    return HolderBound(s, beta, lam, N, math.fsum(t.tolist()), tail, False)


def choose_truncation(s: float, beta: float, lam: float = 1.0, rtol: float = 1e-6, n_max: int = 4000) -> tuple[int, float]:
    """Smallest ``N <= n_max`` whose bound tail is below ``rtol`` of the sum.

    Returns ``(N, achieved_ratio)``; when even ``n_max`` misses ``rtol`` (the
    tail decays like ``N^{s+beta-1/2}``) the ratio at ``n_max`` is returned.
    """
    t = holder_bound_terms(s, beta, lam, n_max)
    gap = 0.5 - s - beta
    if gap <= 0:
        raise ValueError("need s + beta < 1/2")
    cum = np.cumsum(t)
    n = np.arange(n_max + 1, dtype=float)
    ratio = t * (n + 1.0) / gap * (1.0 + 2.0 / np.maximum(n, 1.0)) / cum
    ok = np.nonzero(ratio[1:] < rtol)[0]
    if ok.size:
        N = int(ok[0]) + 1
        return N, float(ratio[N])
    return n_max, float(ratio[-1])


@dataclass(frozen=True)
class HolderRow:
    y: float
    z: float
    s: float
    beta: float
    norm: float
    bound: float
    ratio: float


def holder_table(exp: HolderExperiment) -> list[HolderRow]:
    """Norm, bound ``c |y - z|^beta`` and their ratio per pair."""
    lam = exp.model.lam if exp.lam is None else exp.lam
    c = holder_bound_constant(exp.s, exp.beta, lam, exp.N).value
    rows = []
    for (y, z), v in zip(exp.pairs, holder_difference_norm(exp)):
        b = c * abs(y - z) ** exp.beta
        rows.append(HolderRow(y, z, exp.s, exp.beta, float(v), b, float(v / b) if b > 0 else 0.0))
    return rows


def holder_rows_csv(rows: list[HolderRow]) -> str:
    """CSV with columns ``y, z, s, beta, norm, bound, ratio``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y", "z", "s", "beta", "norm", "bound", "ratio"])
    for r in rows:
        w.writerow([repr(float(getattr(r, k))) for k in ("y", "z", "s", "beta", "norm", "bound", "ratio")])
    return buf.getvalue()


def occupation_mean(model: DiffusionModel, y, T: float = 1.0):
    """``sigma(y) int_0^T p_t(x, y) dt`` by Gauss-Legendre quadrature in ``tau = sqrt(t)``."""
    a = np.atleast_1d(np.asarray(model.lamperti.forward(y), dtype=float))
    r = math.sqrt(T)
    vals = np.empty(a.size)
    for i, c in enumerate(np.abs(a)):
        # p_t dt = phi(a/tau)/tau * 2 tau dtau; extra breaks resolve the layer at tau ~ |a|
        # below 1e-13 r the layer changes the integral by less than rounding
        lo = 0.05 * c
        extra = np.geomspace(lo, r, int(math.log2(r / lo)) + 2) if 1e-13 * r < lo < r else np.empty(0)
        br = np.union1d(np.linspace(0.0, r, 41), extra[extra < r])
        tau, w = panel_rule(br, 24)
        vals[i] = 2.0 * np.exp(-0.5 * np.square(c / tau)) / _SQRT_2PI @ w
    return float(vals[0]) if np.ndim(y) == 0 else vals


@dataclass(frozen=True)
class DensityHolderReport:
    """Hoelder check of ``y -> sigma(y) int_0^1 p_t(x, y) dt``."""

    beta: float
    max_ratio: float
    exponent: float
    bounded: bool
    dominated: bool
    pairs: tuple = field(repr=False)
    deltas: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta, "max_ratio": self.max_ratio, "exponent": self.exponent,
            "bounded": self.bounded, "dominated": self.dominated,
            "pairs": [list(p) for p in self.pairs],
            "delta": self.deltas.tolist(), "norm_s_minus_half": self.norms.tolist(),
        }


def density_holder_check(model: DiffusionModel, pairs, beta: float, N: int = 200) -> DensityHolderReport:
    """Hoelder ratios of the occupation density mean and domination by the ``s = -1/2`` norm.

    ``bounded`` holds when ``|Delta|`` scales at least like ``|y - z|^{beta}``
    (fitted log-log exponent ``>= beta - 0.05`` over the pairs with distinct
    separations) so the ratio cannot blow up as the points merge.
    """
    if not beta < 1:
        raise ValueError("beta must be < 1")
    pairs = tuple((float(y), float(z)) for y, z in pairs)
    ys = np.array([p[0] for p in pairs])
    zs = np.array([p[1] for p in pairs])
    d = np.abs(occupation_mean(model, ys) - occupation_mean(model, zs))
    sep = np.abs(ys - zs)
    mask = sep > 0
    ratio = np.where(mask, d / np.where(mask, sep, 1.0) ** beta, 0.0)
    if np.unique(sep[mask]).size >= 2 and np.all(d[mask] > 0):
        expo = float(np.polyfit(np.log(sep[mask]), np.log(d[mask]), 1)[0])
    else:
        expo = math.nan
    norms = np.array([_norm_from_terms(holder_terms(model, y, z, N), -0.5) for y, z in pairs])
    dominated = bool(np.all(d <= norms * (1 + 1e-12) + 1e-15))
    bounded = bool(np.isfinite(ratio).all() and (math.isnan(expo) or expo >= beta - 0.05))
    return DensityHolderReport(float(beta), float(ratio.max()), expo, bounded, dominated, pairs, d, norms)
