"""Width-regime helpers: splitting a function into two mirror-symmetric
parts, and least-squares fits of even profiles by dilated kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..kernels import Kernel1D


def symmetric_parts(h, z1: float, z2: float, a: float, b: float):
    """Callables ``(h1, h2)`` with ``h1 + h2 = h`` on ``[a, b]``.

    ``h1`` is even about ``z1`` and ``h2`` even about ``z2``.  On
    ``[z1, 2*z2 - z1]`` (symmetric about ``z2``) ``h2`` is zero; beyond it
    the value is pushed outwards one period ``2*(z2 - z1)`` at a time.
    ``h`` is extended by clamping outside ``[a, b]``.
    """
    if z1 == z2:
        raise ValueError("z1 and z2 must differ")
    if z1 > z2:
        g2, g1 = symmetric_parts(h, z2, z1, a, b)
        return g1, g2
    if not a <= z1 < z2 <= b:
        raise ValueError("need a <= z1 < z2 <= b")
    period = 2.0 * (z2 - z1)
    top = z1 + period

    def hx(x):
        return float(h(min(max(x, a), b)))

    def h1(x):
        x = float(x)
        if x < z1:
            x = 2.0 * z1 - x
        terms = []
        while x > top:
            terms += [hx(x), -hx(2.0 * z2 - x)]
            x -= period
        terms.append(hx(x))
        return math.fsum(terms)

    def h2(x):
        return hx(x) - h1(x)

    return h1, h2


def decompose_symmetric(h, z1: float, z2: float, sample_grid, interval=None):
    """Sample the mirror-symmetric split of ``h`` on ``sample_grid``.

    Returns ``(h1_samples, h2_samples)``; ``interval`` defaults to the
    grid's range.
    """
    xs = np.asarray(sample_grid, dtype=float).ravel()
    if xs.size == 0:
        raise ValueError("empty sample grid")
    a, b = (float(xs.min()), float(xs.max())) if interval is None else map(float, interval)
    h1, h2 = symmetric_parts(h, z1, z2, a, b)
    s1 = np.array([h1(x) for x in xs])
    s2 = np.array([h(x) for x in xs], dtype=float) - s1
    return s1, s2


@dataclass(frozen=True)
class EvenProfileFit:
    widths: np.ndarray
    coefficients: np.ndarray
    sup_error: float
    kernel: Kernel1D

    def __call__(self, x) -> np.ndarray:
        x = np.abs(np.asarray(x, dtype=float))
        return self.kernel.profile(self.kernel.epsilon * np.multiply.outer(x, self.widths)) @ self.coefficients


def fit_even_profile(target, widths, kernel: Kernel1D, radius: float = 1.0, n_grid: int = 2001) -> EvenProfileFit:
    """Minimum-norm least-squares fit of ``sum_j c_j phi(eps*w_j*|x|)`` on ``[-radius, radius]``."""
    w = np.asarray(widths, dtype=float).ravel()
    if w.size == 0:
        raise ValueError("empty dictionary")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("widths must be finite and nonnegative")
    if len(np.unique(w)) < w.size:
        raise ValueError("duplicate widths make the dictionary degenerate")
    if not kernel.is_radial:
        raise ValueError("a radial kernel is required")
    x = np.linspace(-radius, radius, n_grid)
    y = np.asarray(target(x), dtype=float)
    A = kernel.profile(kernel.epsilon * np.multiply.outer(np.abs(x), w))
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    err = float(np.max(np.abs(A @ coef - y)))
    return EvenProfileFit(w, coef, err, kernel)
