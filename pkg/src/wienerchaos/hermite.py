"""Probabilists' Hermite polynomials, Hermite functions and Gauss-Hermite rules.

Conventions
-----------
``H_n`` are the probabilists' polynomials, ``H_0 = 1``, ``H_1 = x`` and
``H_n = x H_{n-1} - (n-1) H_{n-2}``, orthogonal for the standard Gaussian
density ``phi`` with ``E[H_n(Z)^2] = n!``.

``H_n(x)`` grows like ``sqrt(n!) * exp(x^2/4)``, so the raw polynomial overflows
double precision near ``n ~ 170`` away from the origin.  Chaos computations use
the normalized Hermite *functions* ``psi_n = H_n phi / sqrt(n!)`` instead, which
are bounded by roughly ``exp(-x^2/4)`` for every ``n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import gammaln

__all__ = [
    "LONGDOUBLE_SWITCH",
    "HermiteEvaluator",
    "GaussHermiteRule",
    "hermite_eval",
    "hermite_zero_value",
    "gauss_hermite_rule",
    "iter_hermite_functions",
    "hermite_function_table",
    "log_factorial",
    "log_double_factorial",
]

# Orders above this are evaluated with extended-precision accumulators.
LONGDOUBLE_SWITCH = 300

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_RESCALE = 1e100
_LOG_RESCALE = 100.0 * math.log(10.0)


def log_factorial(n):
    """``log(n!)`` for scalar or array ``n >= 0``."""
    return gammaln(np.asarray(n, dtype=float) + 1.0)


def log_double_factorial(n):
    """``log(n!!)`` for integers ``n >= -1`` (with ``0!! = (-1)!! = 1``)."""
    n = np.asarray(n, dtype=float)
    even = np.mod(n, 2) == 0
    k = np.floor((n + 1) / 2)
    # n = 2k: 2^k k!;  n = 2k-1: (2k)! / (2^k k!)
    ev = k * math.log(2.0) + gammaln(k + 1)
    od = gammaln(2 * k + 1) - k * math.log(2.0) - gammaln(k + 1)
    out = np.where(even, ev, od)
    return float(out) if out.ndim == 0 else out


def _check_order(n) -> int:
    if isinstance(n, bool) or int(n) != n:
        raise ValueError(f"order must be an integer, got {n!r}")
    n = int(n)
    if n < 0:
        raise ValueError(f"order must be nonnegative, got {n}")
    return n


def hermite_eval(n: int, x, *, extended: bool = False):
    """Evaluate ``H_n(x)`` by the upward three-term recurrence.

    Parameters
    ----------
    n : int
        Order, ``n >= 0``.
    x : float or array_like
        Finite evaluation points.
    extended : bool
        Return the ``np.longdouble`` accumulator instead of rounding to double.

    Returns
    -------
    float or ndarray
        ``H_n(x)``.  For ``n > LONGDOUBLE_SWITCH`` the recurrence runs in
        ``np.longdouble`` and the result is rounded back to double, which may
        overflow to ``inf`` once ``|H_n(x)|`` exceeds the double range.
    """
    n = _check_order(n)
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)):
        raise ValueError("x must be finite")
    dtype = np.longdouble if n > LONGDOUBLE_SWITCH else np.float64
    xv = xa.astype(dtype)
    h_prev = np.ones_like(xv)
    if n == 0:
        out = h_prev
    else:
        h = xv.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(2, n + 1):
                h, h_prev = xv * h - (k - 1) * h_prev, h
        out = h
    if extended:
        return out[()] if out.ndim == 0 else out
    with np.errstate(over="ignore"):
        out = out.astype(np.float64)
    return float(out) if out.ndim == 0 else out


def hermite_zero_value(n: int) -> float:
    """``H_n(0)`` in closed form: 0 for odd ``n``, ``(-1)^k (2k-1)!!`` for ``n = 2k``."""
    n = _check_order(n)
    if n % 2:
        return 0.0
    k = n // 2
    sign = -1.0 if k % 2 else 1.0
    if k <= 150:
        return sign * float(math.prod(range(2 * k - 1, 0, -2)))
    lv = log_double_factorial(2 * k - 1)
    return sign * (math.exp(lv) if lv < 709.0 else math.inf)


@dataclass(frozen=True)
class HermiteEvaluator:
    """Reusable evaluator for ``H_0..H_{max_order}``.

    Parameters
    ----------
    max_order : int
        Largest order supported.
    cache : bool
        Precompute monomial coefficient tables (only sensible for small orders,
        they suffer catastrophic cancellation beyond ``n ~ 40``).
    """

    max_order: int
    cache: bool = False
    _coeffs: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        _check_order(self.max_order)
        if self.cache:
            if self.max_order > 40:
                raise ValueError("coefficient caching is limited to max_order <= 40")
            table = []
            prev, cur = np.array([1.0]), np.array([0.0, 1.0])
            table.append(prev)
            if self.max_order >= 1:
                table.append(cur)
            for k in range(2, self.max_order + 1):
                nxt = np.zeros(k + 1)
                nxt[1:] = cur
                nxt[: k - 1] -= (k - 1) * prev
                prev, cur = cur, nxt
                table.append(cur)
            object.__setattr__(self, "_coeffs", tuple(table))

    def __call__(self, n: int, x):
        n = _check_order(n)
        if n > self.max_order:
            raise ValueError(f"order {n} exceeds max_order {self.max_order}")
        if self.cache:
            xa = np.asarray(x, dtype=float)
            out = np.polynomial.polynomial.polyval(xa, self._coeffs[n])
            return float(out) if np.ndim(out) == 0 else out
        return hermite_eval(n, x)

    def table(self, x) -> np.ndarray:
        """All orders ``0..max_order`` at ``x``, shape ``(max_order + 1,) + x.shape``."""
        xa = np.asarray(x, dtype=float)
        out = np.empty((self.max_order + 1,) + xa.shape)
        out[0] = 1.0
        if self.max_order >= 1:
            out[1] = xa
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(2, self.max_order + 1):
                out[k] = xa * out[k - 1] - (k - 1) * out[k - 2]
        return out


def iter_hermite_functions(n_max: int, x) -> Iterator[np.ndarray]:
    """Yield ``psi_n(x) = H_n(x) phi(x) / sqrt(n!)`` for ``n = 0..n_max``.

    The recurrence runs on ``u_n = psi_n / sqrt(phi)`` with a per-point log
    scale that is bumped whenever ``|u|`` exceeds ``1e100``; this keeps every
    order finite for ``|x|`` well beyond the oscillatory region.
    """
    n_max = _check_order(n_max)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    log_f = -0.25 * x * x - 0.5 * _LOG_SQRT_2PI
    f0 = np.exp(log_f)
    f = f0.copy()
    u_prev = np.zeros_like(x)
    u = np.ones_like(x)
    yield u * f * f0
    for n in range(1, n_max + 1):
        u, u_prev = (x * u - math.sqrt(n - 1) * u_prev) / math.sqrt(n), u
        big = np.abs(u) > _RESCALE
        if big.any():
            u[big] /= _RESCALE
            u_prev[big] /= _RESCALE
            log_f[big] += _LOG_RESCALE
            f[big] = np.exp(log_f[big])
        yield u * f * f0


def hermite_function_table(n_max: int, x) -> np.ndarray:
    """``psi_n(x)`` for all ``n <= n_max``, shape ``(n_max + 1, len(x))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((n_max + 1, x.size))
    for n, row in enumerate(iter_hermite_functions(n_max, x)):
        out[n] = row
    return out


@dataclass(frozen=True)
class GaussHermiteRule:
    """Gauss rule for the standard Gaussian weight.

    Attributes
    ----------
    nodes : ndarray
        Nodes ``xi_i`` in increasing order.
    weights : ndarray
        Weights summing to one.
    log_weights : ndarray
        ``log(weights)``; finite even where ``weights`` underflows.
    """

    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray

    @property
    def m(self) -> int:
        return int(self.nodes.size)

    def expect(self, f) -> float:
        """``E[f(Z)]`` by the rule."""
        vals = np.asarray(f(self.nodes), dtype=float)
        return math.fsum(self.weights * vals)


def _log_christoffel(m: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Newton ratio ``He_m / He_m'`` and ``log sum_{k<m} psi_k^2`` at ``x``."""
    log_f = np.zeros_like(x)
    u_prev = np.zeros_like(x)
    u = np.ones_like(x)
    acc = np.ones_like(x)
    for n in range(1, m + 1):
        u, u_prev = (x * u - math.sqrt(n - 1) * u_prev) / math.sqrt(n), u
        if n < m:
            acc = acc + u * u
        big = np.abs(u) > _RESCALE
        if big.any():
            u[big] /= _RESCALE
            u_prev[big] /= _RESCALE
            acc[big] /= _RESCALE**2
            log_f[big] += _LOG_RESCALE
    # normalized polynomial derivative: d/dx Hhat_m = sqrt(m) Hhat_{m-1}
    ratio = u / (math.sqrt(m) * u_prev)
    return ratio, np.log(acc) + 2.0 * log_f


def gauss_hermite_rule(m: int) -> GaussHermiteRule:
    """Gauss-Hermite rule with ``m`` nodes for the standard Gaussian density.

    Nodes are eigenvalues of the symmetric Jacobi matrix (Golub-Welsch) refined
    by two Newton steps; weights come from the Christoffel function
    ``1 / sum_{k<m} Hhat_k(xi)^2`` evaluated in log space, then normalized.

    Raises
    ------
    ValueError
        If ``m <= 0``.
    RuntimeError
        If the tridiagonal eigenproblem fails.
    """
    if int(m) != m or m <= 0:
        raise ValueError(f"node count must be a positive integer, got {m!r}")
    m = int(m)
    if m == 1:
        return GaussHermiteRule(np.zeros(1), np.ones(1), np.zeros(1))
    off = np.sqrt(np.arange(1, m, dtype=float))
    try:
        x = eigh_tridiagonal(np.zeros(m), off, eigvals_only=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RuntimeError("Jacobi eigenproblem did not converge") from exc
    x = np.sort(x)
    for _ in range(2):
        ratio, _ = _log_christoffel(m, x)
        x = x - ratio
    # exact symmetry
    x = 0.5 * (x - x[::-1])
    _, log_acc = _log_christoffel(m, x)
    logw = -log_acc
    logw -= np.logaddexp.reduce(logw)
    w = np.exp(logw)
    return GaussHermiteRule(x, w, logw)
