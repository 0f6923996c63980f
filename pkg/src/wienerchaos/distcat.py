"""One-dimensional tempered distributions and their Gaussian pairings.

For a distribution ``Lambda`` and a scale ``c > 0`` the *pairing* of order
``n`` is ``a_n = E[Lambda(c Z) H_n(Z)]`` with ``Z`` standard Gaussian.  Because
``a_n`` grows like ``sqrt(n!)`` the vectorized routines return the normalized
values ``b_n = a_n / sqrt(n!)``; ``b_n**2`` is the L2 norm of the ``n``-th
chaos of ``Lambda(c Z)``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import dawsn, digamma, gammaln, ndtr

from .hermite import gauss_hermite_rule, iter_hermite_functions, log_factorial
from .quadrature import panel_rule

__all__ = [
    "Kind",
    "DistributionSpec",
    "PairingTable",
    "QuadratureError",
    "parse_spec",
    "smooth",
    "pair_gaussian",
    "gaussian_pairings",
    "mollified_eval",
    "expected_log_abs_shifted",
]

EULER_GAMMA = 0.5772156649015329
# Hermite functions psi_n are below exp(-x^2/4) * 1.1, so 14 cuts at ~1e-21.
_X_CUT = 14.0
_PANEL = 0.25
_PV_EPS = 1e-6
_ROUNDING = 4.0 * np.finfo(float).eps
_QUAD_TOL = 1e-9


class QuadratureError(RuntimeError):
    """Raised when a pairing quadrature misses its tolerance.

    Attributes
    ----------
    achieved : float
        The error estimate that was reached.
    """

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3e})")
        self.achieved = achieved


class Kind:
    DELTA = "delta"
    DDELTA = "ddelta"
    HEAVISIDE = "heaviside"
    LOGABS = "logabs"
    PV = "pv1x"
    XLOGABS = "xlogabs"
    SMOOTH = "smooth"

    ALL = (DELTA, DDELTA, HEAVISIDE, LOGABS, PV, XLOGABS, SMOOTH)
    LOCATED = (DELTA, DDELTA, HEAVISIDE)


def _fmt(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


@dataclass(frozen=True)
class DistributionSpec:
    """Tagged description of a distribution on the real line.

    Parameters
    ----------
    kind : str
        One of ``Kind.ALL``.
    y : float
        Location for delta, delta derivative and Heaviside kinds.  The
        Heaviside kind is the indicator of ``(-inf, y)``.
    order : int
        Derivative order ``k >= 1`` for the delta derivative kind.
    func : callable, optional
        Vectorized function for the smooth kind.
    growth : tuple of float
        ``(C, a)`` with ``|func(x)| <= C exp(a |x|)`` for the smooth kind.
    name : str
        Registry name of a smooth function, used in the text form.
    """

    kind: str
    y: float = 0.0
    order: int = 0
    func: Callable | None = field(default=None, compare=False, repr=False)
    growth: tuple = (1.0, 0.0)
    name: str = ""

    def __post_init__(self):
        if self.kind not in Kind.ALL:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not math.isfinite(self.y):
            raise ValueError("location must be finite")
        if self.kind == Kind.DDELTA and (int(self.order) != self.order or self.order < 1):
            raise ValueError("delta derivative order must be an integer >= 1")
        if self.kind == Kind.SMOOTH:
            if self.func is None:
                raise ValueError("smooth kind requires a callable")
            if len(self.growth) != 2 or self.growth[0] < 0 or self.growth[1] < 0:
                raise ValueError("growth bound must be (C >= 0, a >= 0)")
        object.__setattr__(self, "y", float(self.y))

    @property
    def is_positive(self) -> bool:
        """True for the positive distributions (delta and Heaviside)."""
        return self.kind in (Kind.DELTA, Kind.HEAVISIDE)

    def to_text(self) -> str:
        """Canonical text form, inverse of :func:`parse_spec`."""
        if self.kind == Kind.DELTA:
            return f"delta@{_fmt(self.y)}"
        if self.kind == Kind.DDELTA:
            return f"ddelta^{self.order}@{_fmt(self.y)}"
        if self.kind == Kind.HEAVISIDE:
            return f"heaviside@{_fmt(self.y)}"
        if self.kind == Kind.SMOOTH:
            return f"smooth:{self.name or 'custom'}"
        return self.kind

    def __str__(self) -> str:
        return self.to_text()


_SMOOTH_REGISTRY = {
    "sin": (np.sin, (1.0, 0.0)),
    "cos": (np.cos, (1.0, 0.0)),
    "tanh": (np.tanh, (1.0, 0.0)),
    "exp": (np.exp, (1.0, 1.0)),
    "square": (np.square, (2.0, 1.0)),
}


def smooth(func: Callable | str, growth: tuple = (1.0, 0.0), name: str = "") -> DistributionSpec:
    """Smooth-kind spec from a callable or a registry name (sin, cos, tanh, exp, square)."""
    if isinstance(func, str):
        if func not in _SMOOTH_REGISTRY:
            raise ValueError(f"unknown smooth function {func!r}")
        f, g = _SMOOTH_REGISTRY[func]
        return DistributionSpec(Kind.SMOOTH, func=f, growth=g, name=func)
    return DistributionSpec(Kind.SMOOTH, func=func, growth=tuple(growth), name=name)


_LOC_RE = re.compile(r"^(delta|heaviside)(?:@(.+))?$")
_DDELTA_RE = re.compile(r"^ddelta\^(\d+)(?:@(.+))?$")


def parse_spec(text: str) -> DistributionSpec:
    """Parse ``delta@0.5``, ``ddelta^2@0.0``, ``heaviside@-1``, ``pv1x``,
    ``logabs``, ``xlogabs`` or ``smooth:<name>``; a missing location means 0."""
    t = text.strip().lower()
    try:
        m = _LOC_RE.match(t)
        if m:
            return DistributionSpec(m.group(1), y=float(m.group(2) or 0.0))
        m = _DDELTA_RE.match(t)
        if m:
            return DistributionSpec(Kind.DDELTA, y=float(m.group(2) or 0.0), order=int(m.group(1)))
    except ValueError as exc:
        raise ValueError(f"cannot parse distribution {text!r}: {exc}") from None
    if t in (Kind.LOGABS, Kind.PV, Kind.XLOGABS):
        return DistributionSpec(t)
    if t.startswith("smooth:"):
        return smooth(t.split(":", 1)[1])
    raise ValueError(f"cannot parse distribution {text!r}")


@dataclass(frozen=True)
class PairingTable:
    """Normalized pairings ``b_n = a_n / sqrt(n!)`` for ``n = 0..N`` with errors."""

    spec: DistributionSpec
    scale: float
    normalized: np.ndarray
    err: np.ndarray

    @property
    def N(self) -> int:
        return int(self.normalized.size - 1)

    def pairing(self, n: int) -> float:
        """Unnormalized ``a_n``; ``inf`` once it leaves the double range."""
        b = self.normalized[n]
        if b == 0.0:
            return 0.0
        lg = math.log(abs(b)) + 0.5 * float(log_factorial(n))
        return math.copysign(math.exp(lg) if lg < 709.0 else math.inf, b)


# --- closed-form kinds -------------------------------------------------------


def _psi_at(u: float, n_max: int) -> np.ndarray:
    out = np.empty(n_max + 1)
    for n, v in enumerate(iter_hermite_functions(n_max, np.array([u]))):
        out[n] = v[0]
    return out


def _closed_form(spec: DistributionSpec, c: float, N: int) -> np.ndarray:
    u = spec.y / c
    n = np.arange(N + 1)
    if spec.kind == Kind.DELTA:
        return _psi_at(u, N) / c
    if spec.kind == Kind.DDELTA:
        k = spec.order
        psi = _psi_at(u, N + k)[k:]
        ratio = np.exp(0.5 * (gammaln(n + k + 1.0) - gammaln(n + 1.0)))
        return psi * ratio * c ** (-(k + 1.0))
    # Heaviside: b_0 = Phi(u), b_n = -psi_{n-1}(u) / sqrt(n)
    out = np.empty(N + 1)
    out[0] = ndtr(u)
    if N >= 1:
        out[1:] = -_psi_at(u, N - 1) / np.sqrt(n[1:])
    return out


# --- quadrature kinds --------------------------------------------------------


def _half_line_rule(m: int, lo_breaks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    br = np.concatenate([lo_breaks, np.arange(_PANEL, _X_CUT + 1e-12, _PANEL)])
    return panel_rule(br, m)


def _log_breaks() -> np.ndarray:
    return np.concatenate([[0.0], _PANEL * 2.0 ** -np.arange(50, 0, -1, dtype=float)])


def _pv_breaks(eps: float) -> np.ndarray:
    g = eps * 2.0 ** np.arange(0, 80, dtype=float)
    return g[g < _PANEL]


def _odd_even_moments(g: np.ndarray, X: np.ndarray, W: np.ndarray, N: int, parity: int) -> np.ndarray:
    """``2 * int_0^inf g(x) psi_n(x) dx`` for ``n`` of the given parity, zero otherwise."""
    out = np.zeros(N + 1)
    gw = g * W
    for n, p in enumerate(iter_hermite_functions(N, X)):
        if n % 2 == parity:
            out[n] = 2.0 * float(np.dot(gw, p))
    return out


def _quad_kind(spec: DistributionSpec, c: float, N: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    if spec.kind == Kind.LOGABS:
        X, W = _half_line_rule(m, _log_breaks())
        b = _odd_even_moments(np.log(X), X, W, N, 0)
        b[0] += math.log(c)
        return b, np.zeros_like(b)
    if spec.kind == Kind.XLOGABS:
        X, W = _half_line_rule(m, _log_breaks())
        cx = c * X
        return _odd_even_moments(cx * np.log(cx) - cx, X, W, N, 1), np.zeros(N + 1)
    # principal value: symmetric truncation |x| > eps, Richardson in eps
    levels = []
    for eps in (_PV_EPS, 0.5 * _PV_EPS):
        X, W = _half_line_rule(m, _pv_breaks(eps))
        levels.append(_odd_even_moments(1.0 / X, X, W, N, 1) / c)
    rich = 2.0 * levels[1] - levels[0]
    return rich, np.abs(rich - levels[1]) * _PV_EPS


def _smooth_kind(spec: DistributionSpec, c: float, N: int, m: int) -> np.ndarray:
    rule = gauss_hermite_rule(m)
    xi = rule.nodes
    with np.errstate(over="ignore", invalid="ignore"):
        fv = np.asarray(spec.func(c * xi), dtype=float) * np.exp(0.5 * rule.log_weights)
    fv = np.where(np.isfinite(fv), fv, 0.0)
    # v_n = sqrt(w) * Hhat_n(xi) are rows of an orthogonal matrix, hence bounded
    out = np.empty(N + 1)
    v_prev = np.zeros_like(xi)
    v = np.exp(0.5 * rule.log_weights)
    out[0] = float(np.dot(fv, v))
    for n in range(1, N + 1):
        v, v_prev = (xi * v - math.sqrt(n - 1) * v_prev) / math.sqrt(n), v
        out[n] = float(np.dot(fv, v))
    return out


_SMOOTH_MAX_EXPONENT = 8.0
_SMOOTH_MAX_ORDER = 4000


def gaussian_pairings(spec: DistributionSpec, c: float, N: int, *, nodes: int | None = None) -> PairingTable:
    """Normalized pairings ``E[Lambda(c Z) H_n(Z)] / sqrt(n!)`` for ``n <= N``.

    Parameters
    ----------
    spec : DistributionSpec
    c : float
        Scale, ``c > 0``.
    N : int
        Largest order.
    nodes : int, optional
        Gauss-Hermite node count for the smooth kind (default ``N + 32``).

    Returns
    -------
    PairingTable

    Raises
    ------
    QuadratureError
        If a quadrature kind misses ``1e-9`` absolute accuracy on some order.
    ValueError
        For invalid scale or order, or a smooth kind whose growth bound is too
        steep for the scale.
    """
    c = float(c)
    if not (c > 0 and math.isfinite(c)):
        raise ValueError(f"scale must be positive and finite, got {c}")
    if int(N) != N or N < 0:
        raise ValueError(f"truncation must be a nonnegative integer, got {N}")
    N = int(N)
    n = np.arange(N + 1)
    if spec.kind in Kind.LOCATED:
        b = _closed_form(spec, c, N)
        err = _ROUNDING * (1.0 + n) * np.abs(b)
    elif spec.kind == Kind.SMOOTH:
        if spec.growth[1] * c > _SMOOTH_MAX_EXPONENT:
            raise ValueError(
                f"growth rate {spec.growth[1]} at scale {c} exceeds exponent {_SMOOTH_MAX_EXPONENT}"
            )
        if N > _SMOOTH_MAX_ORDER:
            raise ValueError(f"smooth pairings are supported up to order {_SMOOTH_MAX_ORDER}")
        m = nodes if nodes is not None else N + 32
        b = _smooth_kind(spec, c, N, m)
        # node-count difference plus a rounding floor of the length-m dot products
        floor = _ROUNDING * (1.0 + n) * math.sqrt(float(np.dot(b, b)))
        err = np.abs(b - _smooth_kind(spec, c, N, m + 16)) + floor
    else:
        b, extra = _quad_kind(spec, c, N, 24)
        coarse, _ = _quad_kind(spec, c, N, 20)
        err = np.abs(b - coarse) + extra + _ROUNDING * np.abs(b)
        worst = float(err.max())
        if worst > _QUAD_TOL:
            raise QuadratureError(f"{spec.to_text()} pairing quadrature", worst)
    return PairingTable(spec, c, b, err)


def pair_gaussian(spec: DistributionSpec, c: float, n: int) -> float:
    """``E[Lambda(c Z) H_n(Z)]`` (unnormalized; may be ``inf`` for huge ``n``)."""
    if int(n) != n or n < 0:
        raise ValueError(f"order must be a nonnegative integer, got {n}")
    return gaussian_pairings(spec, c, int(n)).pairing(int(n))


# --- mollifiers --------------------------------------------------------------


def expected_log_abs_shifted(m):
    """``G(m) = E[log|m + Z|]`` for standard Gaussian ``Z``.

    Uses the noncentral chi-square series for ``|m| <= 10`` and the asymptotic
    expansion ``log|m| - sum (2k-1)!! / (2k m^(2k))`` beyond.
    """
    m = np.abs(np.asarray(m, dtype=float))
    out = np.empty_like(m)
    small = m <= 10.0
    if small.any():
        mu = 0.5 * m[small] ** 2
        j = np.arange(0, 260, dtype=float)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            logw = j * np.log(mu)[None, :] - mu[None, :] - gammaln(j + 1)
        logw[0, mu == 0] = 0.0
        out[small] = 0.5 * (math.log(2.0) + np.sum(np.exp(logw) * digamma(j + 0.5), axis=0))
    big = ~small
    if big.any():
        mb = m[big]
        acc = np.log(mb)
        inv2 = 1.0 / mb**2
        term_df = 1.0
        powk = np.ones_like(mb)
        for k in range(1, 40):
            term_df *= 2 * k - 1
            powk = powk * inv2
            acc = acc - term_df / (2 * k) * powk
        out[big] = acc
    return float(out) if out.ndim == 0 else out


def mollified_eval(spec: DistributionSpec, eps: float, x):
    """``(Lambda * kappa_eps)(x)`` with ``kappa_eps`` the ``N(0, eps^2)`` density.

    Closed forms: Gaussian density (delta), its derivatives through Hermite
    polynomials, ``Phi((y - x)/eps)`` (Heaviside), ``sqrt(2) D(x/(sqrt(2) eps))/eps``
    with ``D`` the Dawson function (principal value), ``log eps + G(x/eps)``
    (log), and the antiderivative of the latter for ``x log|x| - x``.
    """
    eps = float(eps)
    if not eps > 0:
        raise ValueError(f"bandwidth must be positive, got {eps}")
    x = np.asarray(x, dtype=float)
    k = spec.kind
    if k == Kind.DELTA:
        u = (x - spec.y) / eps
        out = np.exp(-0.5 * u * u) / (eps * math.sqrt(2.0 * math.pi))
    elif k == Kind.DDELTA:
        from .hermite import hermite_eval

        u = (x - spec.y) / eps
        sign = -1.0 if spec.order % 2 else 1.0
        out = sign * hermite_eval(spec.order, u) * np.exp(-0.5 * u * u)
        out = out / (math.sqrt(2.0 * math.pi) * eps ** (spec.order + 1))
    elif k == Kind.HEAVISIDE:
        with np.errstate(over="ignore", invalid="ignore"):
            out = ndtr((spec.y - x) / eps)
    elif k == Kind.PV:
        out = math.sqrt(2.0) / eps * dawsn(x / (math.sqrt(2.0) * eps))
    elif k == Kind.LOGABS:
        out = math.log(eps) + expected_log_abs_shifted(x / eps)
    elif k == Kind.XLOGABS:
        m = x / eps
        out = eps * (m * math.log(eps) + m * expected_log_abs_shifted(m)
                     + math.sqrt(2.0) * dawsn(m / math.sqrt(2.0)) - m)
    else:
        rule = gauss_hermite_rule(64)
        out = np.sum(rule.weights * spec.func(x[..., None] + eps * rule.nodes), axis=-1)
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out
