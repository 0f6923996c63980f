"""Chaos vectors, Sobolev-Watanabe norms and critical-index estimation.

A chaos vector holds the chaos decomposition of a functional ``F(Z)`` of one
standard Gaussian ``Z = w(t)/sqrt(t)``::

    F = sum_n (a_n / n!) H_n(Z),     ||J_n F||_2^2 = a_n^2 / n!.

Pairings ``a_n`` are stored normalized, ``b_n = a_n / sqrt(n!)``, so that
``b_n**2`` is the L2 norm of the n-th chaos and nothing overflows.  The
Sobolev-Watanabe norm for ``p = 2`` is ``sum (1+n)^s b_n^2``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .distcat import DistributionSpec, gaussian_pairings, parse_spec
from .hermite import log_factorial

__all__ = [
    "ChaosVector",
    "SobolevIndex",
    "IndexEstimate",
    "NormResult",
    "SmoothingPair",
    "expand",
    "sobolev_norm",
    "scaled_norm_identity",
    "time_integral_chaos_l2",
    "smoothing_norm",
    "fit_tail_exponent",
    "estimate_critical_index",
    "format_pairing",
]


def _clean(v: float) -> float:
    return float(v) + 0.0


def format_pairing(b: float, n: int) -> str:
    """Text of ``a_n = b * sqrt(n!)``; beyond the double range as ``<mantissa>e<exp>``."""
    if b == 0.0:
        return "0.0"
    lg10 = (math.log(abs(b)) + 0.5 * float(log_factorial(n))) / math.log(10.0)
    if lg10 < 300.0:
        return repr(_clean(b * math.exp(0.5 * float(log_factorial(n)))))
    e = math.floor(lg10)
    mant = math.copysign(10.0 ** (lg10 - e), b)
    return f"{mant:.15f}e{e}"


@dataclass(frozen=True)
class ChaosVector:
    """Truncated chaos coefficients of a functional along ``w(t)/sqrt(t)``.

    Attributes
    ----------
    normalized : ndarray
        ``b_n = a_n / sqrt(n!)`` for ``n = 0..N``.
    err : ndarray
        Absolute error estimates on ``b_n``.
    scale : float
        ``c`` in ``a_n = E[Lambda(c Z) H_n(Z)]``.
    t, T : float
        Direction time and horizon; ``scale = sqrt(T)`` for :func:`expand`.
    spec_text : str
        Canonical text of the generating distribution, if any.
    """

    normalized: np.ndarray
    err: np.ndarray
    scale: float = 1.0
    t: float = 1.0
    T: float = 1.0
    spec_text: str = ""

    def __post_init__(self):
        b = np.asarray(self.normalized, dtype=float)
        e = np.asarray(self.err, dtype=float)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("coefficients must be a nonempty 1-d array")
        if e.shape != b.shape:
            raise ValueError("error estimates must match the coefficients")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(e))):
            raise ValueError("chaos entries must be finite")
        if np.any(e < 0):
            raise ValueError("error estimates must be nonnegative")
        object.__setattr__(self, "normalized", b)
        object.__setattr__(self, "err", e)

    @classmethod
    def from_pairings(cls, pairings, err=None, **kw) -> "ChaosVector":
        """Build from unnormalized pairings ``a_n`` (moderate ``n`` only)."""
        a = np.asarray(pairings, dtype=float)
        scale = np.exp(-0.5 * log_factorial(np.arange(a.size)))
        e = np.zeros_like(a) if err is None else np.asarray(err, dtype=float) * scale
        return cls(a * scale, e, **kw)

    @classmethod
    def zeros(cls, N: int, **kw) -> "ChaosVector":
        return cls(np.zeros(N + 1), np.zeros(N + 1), **kw)

    @property
    def N(self) -> int:
        return int(self.normalized.size - 1)

    @property
    def l2_terms(self) -> np.ndarray:
        """``||J_n F||_2^2 = a_n^2 / n!``."""
        return self.normalized**2

    @property
    def l2_term_err(self) -> np.ndarray:
        return 2.0 * np.abs(self.normalized) * self.err + self.err**2

    def pairings(self) -> np.ndarray:
        """Unnormalized ``a_n`` (``inf`` where they leave the double range)."""
        lg = 0.5 * log_factorial(np.arange(self.N + 1))
        with np.errstate(over="ignore"):
            return self.normalized * np.exp(lg)

    def scaled(self, k: float) -> "ChaosVector":
        """Chaos vector of ``k * F``."""
        return ChaosVector(k * self.normalized, abs(k) * self.err, self.scale, self.t, self.T, self.spec_text)

    def truncate(self, N: int) -> "ChaosVector":
        return ChaosVector(self.normalized[: N + 1], self.err[: N + 1], self.scale, self.t, self.T, self.spec_text)

    def rows(self) -> list[dict]:
        return [
            {
                "n": n,
                "pairing": format_pairing(float(b), n),
                "l2_term": repr(_clean(b * b)),
                "err_est": repr(_clean(e)),
            }
            for n, (b, e) in enumerate(zip(self.normalized, self.l2_term_err))
        ]

    def to_csv(self) -> str:
        """CSV with columns ``n, pairing, l2_term, err_est`` (``err_est`` is on ``l2_term``)."""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["n", "pairing", "l2_term", "err_est"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_text,
            "t": self.t,
            "T": self.T,
            "N": self.N,
            "scale": self.scale,
            "terms": self.rows(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class SobolevIndex:
    """Sobolev-Watanabe index ``(s, p)``; only ``p = 2`` is supported."""

    s: float
    p: int = 2

    def __post_init__(self):
        if self.p != 2:
            raise ValueError("only p = 2 norms are computed")
        if not math.isfinite(self.s):
            raise ValueError("s must be finite")


@dataclass(frozen=True)
class IndexEstimate:
    """Log-log tail fit ``||J_n||^2 ~ C n^(-alpha)`` with ``s* = alpha - 1``."""

    alpha: float
    s_star: float
    stderr: float
    window: tuple
    residual: float
    parity: str
    n_points: int
    log_c: float

    def tail_bound(self, s: float, N: int) -> float:
        """Estimated ``sum_{n > N} (1+n)^s ||J_n||^2`` for ``s < s*``."""
        if s >= self.s_star:
            return math.inf
        frac = 0.5 if self.parity in ("even", "odd") else 1.0
        return frac * math.exp(self.log_c) * N ** (s - self.s_star) / (self.s_star - s)


@dataclass(frozen=True)
class NormResult:
    """Truncated ``||F||_{2,s}`` with divergence diagnostics.

    ``divergent`` is ``None`` when the tail could not be classified (too few
    terms).  ``tail_bound`` bounds the squared norm beyond ``N``.
    """

    value: float
    squared: float
    s: float
    N: int
    divergent: bool | None
    tail_bound: float
    estimate: IndexEstimate | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "value": self.value,
            "squared": self.squared,
            "s": self.s,
            "N": self.N,
            "divergent": self.divergent,
            "tail_bound": self.tail_bound,
        }
        if self.estimate is not None:
            d["s_star"] = self.estimate.s_star
            d["s_star_stderr"] = self.estimate.stderr
        return d


def expand(spec: DistributionSpec | str, t: float, T: float, N: int) -> ChaosVector:
    """Chaos vector of ``Lambda(sqrt(T/t) w(t))`` along ``w(t)/sqrt(t)``.

    The argument is ``sqrt(T/t) * sqrt(t) * Z``, so the pairings coincide with
    those of ``Lambda(w(T))`` along ``w(T)/sqrt(T)``; only the recorded
    direction ``t`` differs.
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    if not (0 < t <= T) or not math.isfinite(T):
        raise ValueError(f"need 0 < t <= T, got t={t}, T={T}")
    c = math.sqrt(T / t) * math.sqrt(t)
    tab = gaussian_pairings(spec, c, N)
    return ChaosVector(tab.normalized, tab.err, c, float(t), float(T), spec.to_text())


def _weighted_sum(weights: np.ndarray, terms: np.ndarray) -> float:
    return math.fsum((weights * terms).tolist())


def _parity(b: np.ndarray, idx: np.ndarray) -> str:
    tiny = 1e-13 * float(np.max(np.abs(b[idx]))) if idx.size else 0.0
    nz = np.abs(b[idx]) > tiny
    odd = idx % 2 == 1
    if nz.any() and not nz[odd].any():
        return "even"
    if nz.any() and not nz[~odd].any():
        return "odd"
    return "all"


def _wls(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float, float, float]:
    W = w / w.sum()
    xm, ym = np.dot(W, x), np.dot(W, y)
    sxx = np.dot(W, (x - xm) ** 2)
    slope = np.dot(W, (x - xm) * (y - ym)) / sxx
    icpt = ym - slope * xm
    r = y - icpt - slope * x
    n = x.size
    var = np.dot(W, r * r) * n / max(n - 2, 1)
    se = math.sqrt(var / (sxx * n)) if n > 2 else math.inf
    return float(slope), float(icpt), float(se), float(math.sqrt(np.dot(W, r * r)))


def fit_tail_exponent(l2_terms, window: tuple | None = None, *, coefficients=None) -> IndexEstimate:
    """Weighted log-log fit of ``l2_terms[n] ~ C n^(-alpha)`` over ``window``.

    Parameters
    ----------
    l2_terms : array_like
        ``||J_n||^2`` for ``n = 0..N``.
    window : (int, int), optional
        Inclusive fit range, default ``(max(10, N // 10), N)``.
    coefficients : array_like, optional
        Signed coefficients used to detect the parity pattern (defaults to
        ``sqrt(l2_terms)``).

    Notes
    -----
    If all odd (even) orders in the window vanish only the even (odd)
    subsequence is fitted.  Weights ``1/n`` give each log-interval equal
    influence.  The reported ``stderr`` combines the regression standard error
    with the drift between the full-window slope and the upper-half slope, which
    captures slowly decaying corrections to the power law.

    Raises
    ------
    ValueError
        On an all-zero tail, a window with fewer than 10 usable points, or an
        ill-conditioned fit.
    """
    y = np.asarray(l2_terms, dtype=float)
    N = y.size - 1
    lo, hi = window if window is not None else (max(10, N // 10), N)
    lo, hi = int(lo), int(hi)
    if lo < 1 or hi > N or hi - lo + 1 < 10:
        raise ValueError(f"fit window [{lo}, {hi}] must lie in [1, {N}] and hold >= 10 points")
    b = np.sqrt(y) if coefficients is None else np.asarray(coefficients, dtype=float)
    idx = np.arange(lo, hi + 1)
    if not np.any(y[idx] > 0):
        raise ValueError("all-zero tail")
    parity = _parity(b, idx)
    if parity == "even":
        idx = idx[idx % 2 == 0]
    elif parity == "odd":
        idx = idx[idx % 2 == 1]
    idx = idx[y[idx] > 0]
    if idx.size < 10:
        raise ValueError("fewer than 10 nonzero terms in the fit window")
    x = np.log(idx.astype(float))
    ly = np.log(y[idx])
    w = 1.0 / idx
    if np.ptp(x) < 1e-3:
        raise ValueError("ill-conditioned fit: window too narrow in log scale")
    slope, icpt, se, resid = _wls(x, ly, w)
    upper = x >= 0.5 * (x[0] + x[-1])
    drift = 0.0
    if upper.sum() >= 5:
        slope_u, _, _, _ = _wls(x[upper], ly[upper], w[upper])
        drift = abs(slope_u - slope)
    alpha = -slope
    return IndexEstimate(
        alpha=alpha,
        s_star=alpha - 1.0,
        stderr=math.hypot(se, drift),
        window=(lo, hi),
        residual=resid,
        parity=parity,
        n_points=int(idx.size),
        log_c=icpt,
    )


def _classify(v: ChaosVector, s: float) -> tuple[bool | None, float, IndexEstimate | None]:
    nz = np.nonzero(v.normalized)[0]
    if nz.size == 0:
        return False, 0.0, None
    if v.N >= 20 and nz[-1] <= v.N // 2:
        # finite chaos: nothing beyond the last nonzero order
        return False, 0.0, None
    try:
        est = fit_tail_exponent(v.l2_terms, coefficients=v.normalized)
    except ValueError:
        return None, math.nan, None
    if s >= est.s_star - 2.0 * est.stderr:
        return True, math.inf, est
    return False, est.tail_bound(s, v.N), est


def sobolev_norm(v: ChaosVector, idx: SobolevIndex | float) -> NormResult:
    """``(sum_{n<=N} (1+n)^s a_n^2/n!)^(1/2)`` with a tail-divergence flag.

    The flag is raised when the fitted critical index satisfies
    ``s >= s* - 2 stderr``; otherwise the fitted tail bound
    ``C N^(s - s*) / (s* - s)`` is attached.
    """
    if not isinstance(idx, SobolevIndex):
        idx = SobolevIndex(float(idx))
    s = idx.s
    n = np.arange(v.N + 1, dtype=float)
    sq = _weighted_sum((1.0 + n) ** s, v.l2_terms)
    # rescale by the largest coefficient so the root survives underflow of the squares
    big = float(np.max(np.abs(v.normalized))) if v.N >= 0 else 0.0
    if big > 0.0 and np.isfinite(big):
        norm = big * math.sqrt(_weighted_sum((1.0 + n) ** s, (v.normalized / big) ** 2))
    else:
        norm = math.sqrt(sq)
    divergent, tail, est = _classify(v, s)
    return NormResult(norm, sq, s, v.N, divergent, tail, est)


def scaled_norm_identity(spec: DistributionSpec | str, t: float, T: float, s: float, N: int) -> tuple[float, float]:
    """Both sides of ``||(T/t)^(1/2) Lambda((T/t)^(1/2) w(t))||_{2,s} = (T/t)^(1/2) ||Lambda(w(T))||_{2,s}``.

    The left side expands along ``w(t)/sqrt(t)`` and scales the functional; the
    right side expands ``Lambda(w(T))`` and scales the norm.
    """
    k = math.sqrt(T / t)
    lhs = sobolev_norm(expand(spec, t, T, N).scaled(k), s).value
    rhs = k * sobolev_norm(expand(spec, T, T, N), s).value
    return lhs, rhs


def _time_kernel_quadrature(n: int, T: float) -> float:
    """``2 n! int int_{0<t<s<T} (t/s)^(n/2) / sqrt(t s)`` via ``t = tau^2, s = sigma^2``.

    The factor 2 accounts for the two orderings of ``(t, s)`` in the square of
    the time integral.  Returns the value divided by ``n!``.
    """

    def f(tau, sig):
        t, s = tau * tau, sig * sig
        return (t / s) ** (0.5 * n) / math.sqrt(t * s) * 4.0 * tau * sig

    r = math.sqrt(T)
    val, err = integrate.dblquad(f, 0.0, r, 0.0, lambda sig: sig, epsabs=0.0, epsrel=1e-12)
    if not math.isfinite(val) or err > 1e-9 * abs(val):
        raise RuntimeError(f"time-kernel quadrature did not converge (error {err:.2e})")
    return 2.0 * val


def time_integral_chaos_l2(n: int, T: float, method: str = "closed", normalized: bool = False) -> float:
    """``E[(int_0^T t^(-1/2) H_n(w(t)/sqrt(t)) dt)^2] = 4 T n!/(n+1)``.

    Parameters
    ----------
    n : int
    T : float
    method : {"closed", "quadrature"}
        Closed form, or 2-D quadrature of the covariance kernel.
    normalized : bool
        Return the value divided by ``n!``.
    """
    if int(n) != n or n < 0:
        raise ValueError("order must be a nonnegative integer")
    if not T > 0:
        raise ValueError("horizon must be positive")
    n = int(n)
    if method == "closed":
        base = 4.0 * T / (n + 1)
    elif method == "quadrature":
        base = _time_kernel_quadrature(n, T)
    else:
        raise ValueError(f"unknown method {method!r}")
    if normalized:
        return base
    return base * math.exp(float(log_factorial(n))) if n > 20 else base * math.factorial(n)


@dataclass(frozen=True)
class SmoothingPair:
    """``(||int_0^T sqrt(T/t) Lambda(...) dt||^2_{2,s+1}, 4 T^2 ||Lambda(w(T))||^2_{2,s})``."""

    integral_sq: float
    base_sq: float
    integral_terms: np.ndarray = field(repr=False)
    base_terms: np.ndarray = field(repr=False)
    divergent: bool | None
    tail_bound: float

    @property
    def ratio(self) -> float:
        return self.integral_sq / self.base_sq if self.base_sq else math.nan

    def __iter__(self):
        return iter((self.integral_sq, self.base_sq))


def smoothing_norm(spec: DistributionSpec | str, s: float, T: float, N: int) -> SmoothingPair:
    """Both sides of the smoothing identity, term by term.

    The time integral has n-th chaos ``(a_n/n!) sqrt(T) int t^(-1/2) H_n dt``,
    whose squared L2 norm is ``T (b_n^2 / n!) E[(int t^(-1/2) H_n)^2]``; it is
    weighted by ``(1+n)^(s+1)``.  The right side is ``4 T^2 (1+n)^s b_n^2``.
    """
    base = expand(spec, T, T, N)
    n = np.arange(N + 1, dtype=float)
    b2 = base.l2_terms
    kern = np.array([time_integral_chaos_l2(k, T, normalized=True) for k in range(N + 1)])
    left = (1.0 + n) ** (s + 1.0) * T * b2 * kern
    right = 4.0 * T * T * (1.0 + n) ** s * b2
    divergent, tail, _ = _classify(base, s)
    return SmoothingPair(
        math.fsum(left.tolist()), math.fsum(right.tolist()), left, right, divergent, 4.0 * T * T * tail
    )


def estimate_critical_index(spec: DistributionSpec | str, N: int, window: tuple | None = None, T: float = 1.0) -> IndexEstimate:
    """Critical Sobolev index of ``Lambda(w(T))`` from the decay of its chaos norms."""
    v = expand(spec, T, T, N)
    return fit_tail_exponent(v.l2_terms, window, coefficients=v.normalized)
