"""Composite Gauss-Legendre panel rules shared by the pairing and kernel code."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["legendre_rule", "panel_rule", "graded_breaks"]


@lru_cache(maxsize=16)
def legendre_rule(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on ``[-1, 1]`` (cached, read-only)."""
    x, w = np.polynomial.legendre.leggauss(m)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_rule(breaks, m: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Composite ``m``-point Gauss-Legendre rule on consecutive panels.

    Parameters
    ----------
    breaks : array_like
        Increasing panel end points.
    m : int
        Nodes per panel.

    Returns
    -------
    nodes, weights : ndarray
        Flattened in panel order.
    """
    br = np.asarray(breaks, dtype=float)
    if br.ndim != 1 or br.size < 2 or np.any(np.diff(br) <= 0):
        raise ValueError("breaks must be strictly increasing with at least two points")
    x, w = legendre_rule(m)
    a, b = br[:-1, None], br[1:, None]
    half = 0.5 * (b - a)
    nodes = 0.5 * (a + b) + half * x
    weights = half * w
    return nodes.ravel(), weights.ravel()


def graded_breaks(lo: float, hi: float, h: float, levels: int = 50) -> np.ndarray:
    """Panels on ``[lo, hi]``: geometric refinement toward ``lo`` then width ``h``.

    The first uniform panel ``[lo, lo + h]`` is split dyadically ``levels``
    times toward ``lo``, which resolves integrable end-point singularities such
    as ``log(x - lo)`` or ``(x - lo)^(-1/2)`` to near machine precision.
    """
    fine = lo + h * 2.0 ** -np.arange(levels, 0, -1, dtype=float)
    n_uniform = max(1, int(np.ceil((hi - lo) / h - 1e-9)))
    uniform = np.linspace(lo + h, lo + n_uniform * h, n_uniform)
    uniform[-1] = hi
    uniform = uniform[uniform > fine[-1]]
    return np.concatenate([[lo], fine, uniform])
