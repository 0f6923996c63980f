"""One-dimensional diffusions ``dX = sigma(X) o dw`` and their kernels.

In the Stratonovich-symmetric case (Ito drift ``b = sigma sigma' / 2``) the
Lamperti map ``psi(a) = int_x^a dz / sigma(z)`` turns ``X`` into Brownian
motion, ``X_t = psi^{-1}(w_t)``, so every kernel reduces to Gaussian ones:

    p_t(x, a) = phi(psi(a)/sqrt(t)) / (sqrt(t) sigma(a)),
    A_x^n p_t(x, a) = t^{-(n+1)/2} H_n(psi(a)/sqrt(t)) phi(psi(a)/sqrt(t)) / sigma(a)

with ``A = sigma d/dx`` acting on the start point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.special import gamma, kv

from .hermite import iter_hermite_functions, log_factorial
from .quadrature import legendre_rule

__all__ = [
    "DiffusionModel",
    "LampertiMap",
    "ScaleSpeed",
    "FundamentalSolution",
    "LpTrend",
    "model_from_string",
    "tabulated_model",
    "lamperti",
    "flow",
    "kv_kernel",
    "transition_density",
    "density_mass",
    "scale_speed",
    "fundamental_solution",
    "bessel_delta_kernel",
    "bessel_delta_kernel_closed_form",
    "bessel_short_distance_exponent",
    "bessel_lp_trend",
]

# Gaussian tail beyond this many standard deviations is below 1e-14.
_Z_CUT = 8.5
_GL_M = 24


def _gl_integrate(f: Callable, a, b) -> np.ndarray:
    """Vectorized 24-point Gauss-Legendre ``int_a^b f`` for arrays of end points."""
    x, w = legendre_rule(_GL_M)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[..., None] + half[..., None] * x
    return half * np.sum(w * f(nodes), axis=-1)


class _Cumulative:
    """``F(z) = int_{z0}^z f`` from a checkpoint table plus one local panel."""

    def __init__(self, f: Callable, breaks: np.ndarray, z0: float):
        self.f = f
        br = np.asarray(breaks, dtype=float)
        if not (br[0] <= z0 <= br[-1]):
            raise ValueError("reference point outside the working domain")
        # anchor the table at z0 so that values near z0 carry no cancellation
        br = np.union1d(br, [z0])
        self.breaks = br
        incr = _gl_integrate(f, br[:-1], br[1:])
        i0 = int(np.searchsorted(br, z0))
        cum = np.zeros(br.size)
        cum[i0 + 1:] = np.cumsum(incr[i0:])
        cum[:i0] = -np.cumsum(incr[:i0][::-1])[::-1]
        self._table = cum

    @property
    def lo(self) -> float:
        return float(self.breaks[0])

    @property
    def hi(self) -> float:
        return float(self.breaks[-1])

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < self.lo - 1e-12) or np.any(z > self.hi + 1e-12):
            raise ValueError(f"point outside the working domain [{self.lo:.6g}, {self.hi:.6g}]")
        k = np.clip(np.searchsorted(self.breaks, z, side="right") - 1, 0, self.breaks.size - 2)
        return self._table[k] + _gl_integrate(self.f, self.breaks[k], z)


def _march_breaks(inv_sigma: Callable, x: float, target: float, fixed: np.ndarray, direction: int) -> list:
    """Panel ends from ``x`` outward until ``int 1/sigma`` exceeds ``target``."""
    pts = [x]
    acc = 0.0
    z = x
    fixed = np.sort(fixed[(fixed - x) * direction > 0]) if fixed.size else fixed
    if direction < 0:
        fixed = fixed[::-1]
    j = 0
    while acc < target:
        h = 0.5 + 0.25 * abs(z)
        while True:
            nz = z + direction * h
            if j < fixed.size and (fixed[j] - nz) * direction <= 0:
                nz = float(fixed[j])
            a, b = min(z, nz), max(z, nz)
            fine = float(_gl_integrate(inv_sigma, a, b))
            # accept the panel once the 24-point rule agrees with a split rule
            mid = 0.5 * (a + b)
            split = float(_gl_integrate(inv_sigma, a, mid) + _gl_integrate(inv_sigma, mid, b))
            if abs(fine - split) <= 1e-15 * abs(fine) or h < 1e-6:
                break
            h *= 0.5
        if j < fixed.size and nz == fixed[j]:
            j += 1
        acc += abs(fine)
        z = nz
        pts.append(z)
        if len(pts) > 100000:
            raise RuntimeError("working domain did not close; sigma grows too fast")
    return pts


class DiffusionModel:
    """Diffusion coefficient, drift convention and start point.

    Parameters
    ----------
    sigma : callable
        Vectorized diffusion coefficient.
    dsigma : callable
        Its derivative (needed for the Stratonovich drift ``sigma sigma'/2``).
    x : float
        Start point.
    lam, kappa : float, optional
        Ellipticity floor and ceiling for ``sigma^2``; ``kappa`` defaults to the
        maximum of ``sigma^2`` on the working domain.
    drift : {"stratonovich", "general"}
        ``"general"`` uses the Ito drift ``b`` and is only supported by the
        scale/speed routines and Euler simulation.
    b : callable, optional
        Ito drift for the general mode.
    horizon : float
        Largest time the working domain must cover.
    breakpoints : array_like, optional
        Points where ``sigma`` is only piecewise smooth (table knots).
    name : str
    """

    def __init__(
        self,
        sigma: Callable,
        dsigma: Callable | None,
        x: float = 0.0,
        lam: float = 1.0,
        kappa: float | None = None,
        drift: str = "stratonovich",
        b: Callable | None = None,
        horizon: float = 1.0,
        breakpoints=(),
        name: str = "custom",
    ):
        if drift not in ("stratonovich", "general"):
            raise ValueError(f"unknown drift mode {drift!r}")
        if drift == "general" and b is None:
            raise ValueError("general drift mode needs a drift callable")
        if drift == "stratonovich" and dsigma is None:
            raise ValueError("Stratonovich drift needs the derivative of sigma")
        if not (lam > 0 and math.isfinite(x) and horizon > 0):
            raise ValueError("need lam > 0, finite x and positive horizon")
        self.sigma = sigma
        self.dsigma = dsigma
        self.x = float(x)
        self.lam = float(lam)
        self.drift = drift
        self._b = b
        self.horizon = float(horizon)
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.name = name
        grid = np.linspace(*self.domain, 4001)
        s2 = np.asarray(sigma(grid), dtype=float) ** 2
        if np.any(s2 < self.lam * (1 - 1e-12)):
            raise ValueError(f"sigma^2 falls below lam = {self.lam} on the working domain")
        self.kappa = float(s2.max()) if kappa is None else float(kappa)
        if np.any(s2 > self.kappa * (1 + 1e-12)):
            raise ValueError(f"sigma^2 exceeds kappa = {self.kappa} on the working domain")

    def __repr__(self) -> str:
        return f"DiffusionModel(name={self.name!r}, x={self.x!r}, drift={self.drift!r})"

    def drift_fn(self, z):
        """Ito drift ``b(z)``."""
        if self.drift == "general":
            return np.asarray(self._b(z), dtype=float) * np.ones_like(np.asarray(z, dtype=float))
        return 0.5 * np.asarray(self.sigma(z)) * np.asarray(self.dsigma(z))

    @property
    def lamperti_exact(self) -> bool:
        return self.drift == "stratonovich"

    def with_start(self, x: float) -> "DiffusionModel":
        """Same coefficients started at ``x``."""
        return DiffusionModel(
            self.sigma, self.dsigma, x, self.lam, None, self.drift, self._b,
            self.horizon, self.breakpoints, self.name,
        )

    @cached_property
    def _breaks(self) -> np.ndarray:
        inv = lambda z: 1.0 / np.asarray(self.sigma(z), dtype=float)
        target = _Z_CUT * math.sqrt(self.horizon) + 1.0
        right = _march_breaks(inv, self.x, target, self.breakpoints, +1)
        left = _march_breaks(inv, self.x, target, self.breakpoints, -1)
        return np.array(left[::-1] + right[1:])

    @property
    def domain(self) -> tuple[float, float]:
        """Working interval; its Lamperti image covers ``8.5 sqrt(horizon)`` each side."""
        return float(self._breaks[0]), float(self._breaks[-1])

    @cached_property
    def lamperti(self) -> "LampertiMap":
        return LampertiMap(self)


def _const(v: float) -> Callable:
    return lambda z: np.full_like(np.asarray(z, dtype=float), v)


_CATALOG = {
    "unit": (_const(1.0), _const(0.0), 1.0),
    "sqrt1pz2": (lambda z: np.sqrt(1.0 + np.square(z)), lambda z: z / np.sqrt(1.0 + np.square(z)), 1.0),
    "sin2": (lambda z: 2.0 + np.sin(z), np.cos, 1.0),
}


def tabulated_model(path: str, x: float = 0.0, **kw) -> DiffusionModel:
    """Model with ``sigma`` read from a two-column ``z, sigma`` CSV table.

    ``sigma`` is interpolated by a monotone cubic (PCHIP) and held constant
    outside the table.
    """
    try:
        data = np.genfromtxt(path, delimiter=",", dtype=float)
    except OSError as exc:
        raise ValueError(f"cannot read sigma table {path!r}: {exc}") from None
    data = np.atleast_2d(data)
    data = data[~np.isnan(data).any(axis=1)]
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 2:
        raise ValueError(f"sigma table {path!r} must have two numeric columns and >= 2 rows")
    z, s = data[:, 0], data[:, 1]
    if np.any(np.diff(z) <= 0):
        raise ValueError("sigma table abscissae must be strictly increasing")
    if np.any(s <= 0):
        raise ValueError("sigma table values must be positive")
    p = PchipInterpolator(z, s)
    dp = p.derivative()
    lo, hi = z[0], z[-1]

    def sigma(v):
        v = np.asarray(v, dtype=float)
        return p(np.clip(v, lo, hi))

    def dsigma(v):
        v = np.asarray(v, dtype=float)
        return np.where((v > lo) & (v < hi), dp(np.clip(v, lo, hi)), 0.0)

    kw.setdefault("lam", float(np.min(p(np.linspace(lo, hi, 20001)))) ** 2)
    return DiffusionModel(sigma, dsigma, x, breakpoints=z, name=f"table:{path}", **kw)


def model_from_string(text: str, x: float = 0.0, **kw) -> DiffusionModel:
    """``unit``, ``sqrt1pz2``, ``sin2`` or a path to a ``z, sigma`` CSV table."""
    if text in _CATALOG:
        s, ds, lam = _CATALOG[text]
        kw.setdefault("lam", lam)
        return DiffusionModel(s, ds, x, name=text, **kw)
    if text.endswith(".csv"):
        return tabulated_model(text, x, **kw)
    raise ValueError(f"unknown model {text!r}; expected unit, sqrt1pz2, sin2 or a .csv table")


class LampertiMap:
    """``psi(a) = int_x^a dz / sigma(z)`` with its inverse.

    Attributes
    ----------
    domain : (float, float)
    max_roundtrip_error : float
        ``max |psi(psi^{-1}(u)) - u|`` over a test grid of the image.
    """

    def __init__(self, model: DiffusionModel):
        self.model = model
        inv = lambda z: 1.0 / np.asarray(model.sigma(z), dtype=float)
        self._cum = _Cumulative(inv, model._breaks, model.x)
        self._knots = self._cum(model._breaks)
        if np.any(np.diff(self._knots) <= 0):
            raise ValueError("numerical Lamperti map is not increasing; check the ellipticity floor")
        self.domain = model.domain
        # dense table of psi^{-1} with slopes sigma: cubic Hermite starting values for Newton
        ut = np.linspace(self._knots[0], self._knots[-1], 4097)
        at = self._newton(ut, self._bracket_guess(ut))
        self._guess = CubicHermiteSpline(ut, at, np.asarray(model.sigma(at), dtype=float))
        u = np.linspace(self._knots[0], self._knots[-1], 2001)[1:-1]
        self.max_roundtrip_error = float(np.max(np.abs(self.forward(self.inverse(u)) - u)))

    @property
    def image(self) -> tuple[float, float]:
        return float(self._knots[0]), float(self._knots[-1])

    def forward(self, a):
        """``psi(a)``."""
        out = self._cum(a)
        return float(out) if np.ndim(out) == 0 else out

    __call__ = forward

    def _bracket_guess(self, u: np.ndarray) -> np.ndarray:
        k = np.clip(np.searchsorted(self._knots, u, side="right") - 1, 0, self._knots.size - 2)
        br = self.model._breaks
        return br[k] + (br[k + 1] - br[k]) * (u - self._knots[k]) / (self._knots[k + 1] - self._knots[k])

    def _newton(self, u: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Safeguarded Newton for ``psi(a) = u`` inside the panel bracketing each ``u``."""
        br = self.model._breaks
        k = np.clip(np.searchsorted(self._knots, u, side="right") - 1, 0, br.size - 2)
        a_lo, a_hi = br[k], br[k + 1]
        a = np.clip(a, a_lo, a_hi)
        # iterate only on the points that have not converged yet
        act = np.arange(a.size)
        for _ in range(60):
            aa = a[act]
            step = (self._cum(aa) - u[act]) * np.asarray(self.model.sigma(aa), dtype=float)
            a_new = np.clip(aa - step, a_lo[act], a_hi[act])
            a[act] = a_new
            act = act[np.abs(a_new - aa) > 1e-15 * (1.0 + np.abs(aa))]
            if act.size == 0:
                break
        return a

    def inverse(self, u):
        """``psi^{-1}(u)`` by Newton iteration from a cubic Hermite starting value."""
        u = np.asarray(u, dtype=float)
        lo_u, hi_u = self.image
        if np.any(u < lo_u - 1e-12) or np.any(u > hi_u + 1e-12):
            raise ValueError(f"value outside the Lamperti image [{lo_u:.6g}, {hi_u:.6g}]")
        uu = np.ravel(u)
        a = self._newton(uu, self._guess(uu))
        return float(a[0]) if u.ndim == 0 else a.reshape(u.shape)


def lamperti(model: DiffusionModel) -> LampertiMap:
    """Lamperti map of ``model`` (built once per model)."""
    return model.lamperti


def flow(model: DiffusionModel, u: float, x: float | None = None) -> float:
    """``e^{uA}(x)``: solution at time ``u`` of ``d phi/du = sigma(phi)``, ``phi(0) = x``."""
    x0 = model.x if x is None else float(x)
    if not math.isfinite(u):
        raise ValueError("flow time must be finite")
    if u == 0:
        return x0
    sol = integrate.solve_ivp(
        lambda _, y: np.asarray(model.sigma(y), dtype=float),
        (0.0, float(u)), [x0], method="DOP853", rtol=1e-13, atol=1e-13,
    )
    if sol.status != 0:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return float(sol.y[0, -1])


def _hermite_gauss(n: int, z: np.ndarray) -> np.ndarray:
    """``H_n(z) phi(z)`` through normalized Hermite functions."""
    for k, v in enumerate(iter_hermite_functions(n, z)):
        if k == n:
            return v * math.exp(0.5 * float(log_factorial(n)))
    raise AssertionError  # pragma: no cover


def kv_kernel(model: DiffusionModel, n: int, t: float, a):
    """``A_x^n p_t(x, a)`` for the Stratonovich-symmetric model.

    Parameters
    ----------
    model : DiffusionModel
    n : int
        Order; ``n = 0`` gives the transition density.
    t : float
        Time, ``t > 0``.
    a : float or array_like
        Target points in the working domain.
    """
    if model.drift != "stratonovich":
        raise ValueError("kernel formula needs the Stratonovich-symmetric drift")
    if int(n) != n or n < 0 or not t > 0:
        raise ValueError("need integer n >= 0 and t > 0")
    a = np.asarray(a, dtype=float)
    z = np.atleast_1d(model.lamperti.forward(a)) / math.sqrt(t)
    sig = np.atleast_1d(np.asarray(model.sigma(a), dtype=float))
    out = t ** (-(n + 1) / 2.0) * _hermite_gauss(int(n), z) / sig
    return float(out[0]) if a.ndim == 0 else out.reshape(a.shape)


def transition_density(model: DiffusionModel, t: float, a):
    """``p_t(x, a)`` (the ``n = 0`` kernel)."""
    return kv_kernel(model, 0, t, a)


def density_mass(model: DiffusionModel, t: float, n: int = 0) -> float:
    """``int kv_kernel(model, n, t, a) da`` over the working domain panels."""
    br = model._breaks
    vals = _gl_integrate(lambda a: kv_kernel(model, n, t, a), br[:-1], br[1:])
    return math.fsum(vals.tolist())


@dataclass(frozen=True)
class ScaleSpeed:
    """Scale function ``s`` (``s(0) = 0``), its density ``s'`` and speed density ``m'``."""

    model: DiffusionModel
    _inner: _Cumulative
    _scale: _Cumulative

    def scale_density(self, z):
        """``s'(z) = exp(-int_0^z 2 b / sigma^2)``."""
        return np.exp(-self._inner(z))

    def scale(self, z):
        return self._scale(z)

    def speed_density(self, z):
        """``m'(z) = 2 / (sigma(z)^2 s'(z))``."""
        return 2.0 / (np.asarray(self.model.sigma(z), dtype=float) ** 2 * self.scale_density(z))

    def log_scale_ratio(self, z, y):
        """``-int_y^z 2 b / sigma^2`` = ``log(s'(z)/s'(y))``."""
        return self._inner(y) - self._inner(z)


def scale_speed(model: DiffusionModel) -> ScaleSpeed:
    """Scale and speed objects by nested checkpointed quadrature (reference point 0)."""
    br = model._breaks
    if not (br[0] <= 0.0 <= br[-1]):
        raise ValueError("the working domain must contain the reference point 0")
    ratio = lambda z: 2.0 * model.drift_fn(z) / np.asarray(model.sigma(z), dtype=float) ** 2
    inner = _Cumulative(ratio, br, 0.0)
    outer = _Cumulative(lambda z: np.exp(-inner(z)), br, 0.0)
    dens = np.exp(-inner(br))
    if not np.all(np.isfinite(dens)) or np.any(dens <= 0):
        raise ValueError("scale density is not finite and positive on the working domain")
    return ScaleSpeed(model, inner, outer)


@dataclass(frozen=True)
class FundamentalSolution:
    """``u(z) = m'(y)/2 |s(z) - s(y)|`` and ``A u`` with ``L u = delta_y``.

    ``Au`` at the kink ``z = y`` returns the right limit; ``kink_right_limit``
    records that convention.
    """

    y: float
    u: Callable
    Au: Callable
    kink_right_limit: bool = True


def fundamental_solution(model: DiffusionModel, y: float) -> FundamentalSolution:
    """Fundamental solution of the generator at level ``y``."""
    ss = scale_speed(model)
    y = float(y)
    sy = float(ss.scale(y))
    half_m = 0.5 * float(ss.speed_density(y))
    sig_y2 = float(model.sigma(np.array(y))) ** 2

    def u(z):
        z = np.asarray(z, dtype=float)
        out = half_m * np.abs(ss.scale(z) - sy)
        out = np.where(z == y, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def Au(z):
        z = np.asarray(z, dtype=float)
        sgn = np.where(z >= y, 1.0, -1.0)
        out = sgn * np.exp(ss.log_scale_ratio(z, y)) * np.asarray(model.sigma(z), dtype=float) / sig_y2
        return float(out) if out.ndim == 0 else out

    return FundamentalSolution(y, u, Au)


# --- Bessel potential of a point mass ---------------------------------------


def _check_bessel(s: float, r: float) -> None:
    if not (-1.0 < s < 0.0):
        raise ValueError("index must satisfy -1 < s < 0 in one dimension")
    if r == 0:
        raise ValueError("kernel is singular at x = y")


def bessel_delta_kernel(s: float, y: float, x: float) -> float:
    """``(1 - Laplacian)^{s/2} delta_y (x)`` on the line by its time integral.

    ``(1/Gamma(-s/2)) int_0^inf t^{-s/2-1} e^{-t} (4 pi t)^{-1/2} e^{-r^2/(4t)} dt``
    with ``r = |x - y|``, evaluated in the variable ``v = log t``.
    """
    r = abs(float(x) - float(y))
    _check_bessel(s, r)
    nu = -(s + 1.0) / 2.0
    c = 0.25 * r * r

    def f(v):
        return math.exp(nu * v - math.exp(v) - c * math.exp(-v))

    # peak of nu*v - e^v - c e^-v, then generous cut-offs on both sides
    v_pk = math.log(2.0 * c / (math.sqrt(nu * nu + 4.0 * c) - nu)) if c > 0 else 0.0
    lo = min(math.log(c) - 4.0, v_pk - 40.0) if c > 0 else -60.0
    hi = max(4.0, v_pk + 4.0)
    val, err = integrate.quad(f, lo, hi, points=[v_pk], epsabs=0.0, epsrel=1e-12, limit=400)
    if not math.isfinite(val) or err > 1e-9 * abs(val):
        raise RuntimeError(f"Bessel kernel quadrature did not converge (error {err:.2e})")
    return val / (math.sqrt(4.0 * math.pi) * gamma(-s / 2.0))


def bessel_delta_kernel_closed_form(s: float, y: float, x: float) -> float:
    """Same kernel through ``2 (r/2)^nu K_nu(r)``, ``nu = -(s+1)/2``."""
    r = abs(float(x) - float(y))
    _check_bessel(s, r)
    nu = -(s + 1.0) / 2.0
    return 2.0 * (r / 2.0) ** nu * kv(nu, r) / (math.sqrt(4.0 * math.pi) * gamma(-s / 2.0))


def bessel_short_distance_exponent(s: float, r_range: tuple = (1e-8, 1e-5)) -> float:
    """Fitted exponent ``e`` in ``kernel ~ r^e`` near the pole; expected ``-(1+s)``."""
    r = np.geomspace(r_range[0], r_range[1], 13)
    k = np.array([bessel_delta_kernel(s, 0.0, v) for v in r])
    return float(np.polyfit(np.log(r), np.log(k), 1)[0])


@dataclass(frozen=True)
class LpTrend:
    """Small-distance behaviour of ``int_{|x-y| > d} |kernel|^p dx``.

    ``exponent`` is the fitted power ``e`` in ``d |kernel(d)|^p ~ d^e``: the
    contribution of each dyadic shell near the pole.  The integral stays
    bounded as ``d -> 0`` iff ``e > 0``.
    """

    s: float
    p: float
    exponent: float
    finite: bool
    cutoffs: tuple
    partial_integrals: tuple

    def to_dict(self) -> dict:
        return {
            "s": self.s, "p": self.p, "exponent": self.exponent, "finite": self.finite,
            "cutoffs": list(self.cutoffs), "partial_integrals": list(self.partial_integrals),
        }


def bessel_lp_trend(s: float, p: float, cutoffs=None, outer: float = 40.0) -> LpTrend:
    """Trend of the truncated ``L_p`` norm of the kernel as the cut-off shrinks.

    The threshold is ``p < 1/(1+s)``; the shell exponent is ``1 - p(1+s)``.
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    d = np.geomspace(1e-4, 1e-10, 13) if cutoffs is None else np.asarray(cutoffs, dtype=float)
    shell = np.array([v * abs(bessel_delta_kernel(s, 0.0, v)) ** p for v in d])
    e = float(np.polyfit(np.log(d), np.log(shell), 1)[0])
    # int_{d}^{outer} |k(r)|^p dr in log r, doubled for both sides
    g = lambda lr: math.exp(lr) * abs(bessel_delta_kernel(s, 0.0, math.exp(lr))) ** p
    parts = []
    acc = 2.0 * integrate.quad(g, math.log(d[0]), math.log(outer), epsrel=1e-10, limit=200)[0]
    parts.append(acc)
    for a, b in zip(d[1:], d[:-1]):
        acc += 2.0 * integrate.quad(g, math.log(a), math.log(b), epsrel=1e-10, limit=200)[0]
        parts.append(acc)
    return LpTrend(float(s), float(p), e, e > 0, tuple(float(v) for v in d), tuple(parts))
