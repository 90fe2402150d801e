"""Univariate kernels, Gram matrices and flat-limit interpolation.

Radial kernels are ``k(x, y) = phi(eps * |x - y|)`` for a profile ``phi``.
Every profile also exposes ``phi(r) - phi(0)`` computed without cancellation;
near the flat limit the kernel values all sit within ``eps**2`` of ``phi(0)``
and the information lives entirely in that difference.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import mpmath
import numpy as np
from scipy.linalg import block_diag

__all__ = [
    "KernelFamily",
    "Kernel1D",
    "TaylorAdmissibility",
    "FlatLimitInterpolant",
    "InadmissibleKernelError",
    "SingularSystemError",
    "eval_kernel",
    "gram_matrix",
    "single_dim_gram",
    "taylor_admissibility",
    "interpolation_coefficients",
    "flat_limit_interpolant",
    "conditioning_diagnostic",
]

# working precision (decimal digits) for the small, nearly singular
# interpolation systems of the flat limit
MP_DIGITS = 60


class InadmissibleKernelError(ValueError):
    """Kernel profile violates the flat-limit requirements."""


class SingularSystemError(ValueError):
    """Interpolation system is singular (coincident nodes)."""


class KernelFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    MATERN0 = "matern0"
    MATERN_QUADRATIC = "matern_quadratic"
    WENDLAND0 = "wendland0"
    LINEAR = "linear"


# Taylor coefficients of (3 + 3r + r^2) exp(-r): (-1)^n (n-1)(n-3) / n!
_MQ_SERIES = np.array(
    [(-1) ** n * (n - 1) * (n - 3) / math.factorial(n) for n in range(0, 30)]
)


def _mq_minus_zero(r: np.ndarray) -> np.ndarray:
    out = np.empty_like(r)
    small = r < 0.5
    rs = r[small]
    # Horner on the series without the constant term
    acc = np.zeros_like(rs)
    for c in _MQ_SERIES[:0:-1]:
        acc = acc * rs + c
    out[small] = acc * rs
    rl = r[~small]
    out[~small] = (3.0 + 3.0 * rl + rl * rl) * np.exp(-rl) - 3.0
    return out


@dataclass(frozen=True)
class Kernel1D:
    """A univariate kernel: a family tag plus a shape parameter.

    ``epsilon`` is ignored by the linear family, whose value is ``x * y``.
    """

    family: KernelFamily = KernelFamily.GAUSSIAN
    epsilon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        eps = float(self.epsilon)
        if self.is_radial and not (eps > 0 and math.isfinite(eps)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon!r}")
        object.__setattr__(self, "epsilon", eps)

    @property
    def is_radial(self) -> bool:
        return self.family is not KernelFamily.LINEAR

    def with_epsilon(self, epsilon: float) -> "Kernel1D":
        return Kernel1D(self.family, epsilon)

    # -- radial profile -------------------------------------------------
    @property
    def phi0(self) -> float:
        return 3.0 if self.family is KernelFamily.MATERN_QUADRATIC else 1.0

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        fam = self.family
        if fam is KernelFamily.GAUSSIAN:
            return np.exp(-r * r)
        if fam is KernelFamily.MATERN0:
            return np.exp(-r)
        if fam is KernelFamily.MATERN_QUADRATIC:
            return (3.0 + 3.0 * r + r * r) * np.exp(-r)
        if fam is KernelFamily.WENDLAND0:
            return np.maximum(1.0 - r, 0.0)
        raise TypeError("linear kernel has no radial profile")

    def profile_minus_zero(self, r):
        """``phi(r) - phi(0)`` with full relative accuracy for small ``r``."""
        r = np.asarray(r, dtype=float)
        fam = self.family
        if fam is KernelFamily.GAUSSIAN:
            return np.expm1(-r * r)
        if fam is KernelFamily.MATERN0:
            return np.expm1(-r)
        if fam is KernelFamily.MATERN_QUADRATIC:
            return _mq_minus_zero(np.atleast_1d(r)).reshape(r.shape)
        if fam is KernelFamily.WENDLAND0:
            return -np.minimum(r, 1.0)
        raise TypeError("linear kernel has no radial profile")

    def profile_derivative(self, r):
        r = np.asarray(r, dtype=float)
        fam = self.family
        if fam is KernelFamily.GAUSSIAN:
            return -2.0 * r * np.exp(-r * r)
        if fam is KernelFamily.MATERN0:
            return -np.exp(-r)
        if fam is KernelFamily.MATERN_QUADRATIC:
            return -r * (1.0 + r) * np.exp(-r)
        if fam is KernelFamily.WENDLAND0:
            return np.where(r < 1.0, -1.0, 0.0)
        raise TypeError("linear kernel has no radial profile")

    def profile_mp(self, r):
        fam = self.family
        if fam is KernelFamily.GAUSSIAN:
            return mpmath.exp(-r * r)
        if fam is KernelFamily.MATERN0:
            return mpmath.exp(-r)
        if fam is KernelFamily.MATERN_QUADRATIC:
            return (3 + 3 * r + r * r) * mpmath.exp(-r)
        if fam is KernelFamily.WENDLAND0:
            return max(1 - r, mpmath.mpf(0))
        raise TypeError("linear kernel has no radial profile")

    # -- kernel evaluation (broadcasting) ---------------------------------
    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not self.is_radial:
            return x * y
        return self.profile(self.epsilon * np.abs(x - y))

    def minus_zero(self, x, y):
        """``k(x, y) - phi(0)``; radial kernels only."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return self.profile_minus_zero(self.epsilon * np.abs(d))

    def dx(self, x, y):
        """Partial derivative of ``k(x, y)`` with respect to ``x``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not self.is_radial:
            return np.broadcast_to(y, np.broadcast(x, y).shape).copy()
        d = x - y
        return self.epsilon * self.profile_derivative(self.epsilon * np.abs(d)) * np.sign(d)

    def __str__(self):
        if not self.is_radial:
            return self.family.value
        return f"{self.family.value}:{self.epsilon!r}"

    @classmethod
    def parse(cls, text: str) -> "Kernel1D":
        """Inverse of ``str``: ``"gaussian:0.5"`` or ``"linear"``."""
        name, _, eps = text.strip().partition(":")
        return cls(KernelFamily(name.strip().lower()), float(eps) if eps else 1.0)


def eval_kernel(kernel: Kernel1D, x: float, y: float) -> float:
    return float(kernel(float(x), float(y)))


def gram_matrix(kernel: Kernel1D, X: Sequence[float], Z: Sequence[float]) -> np.ndarray:
    X = np.asarray(X, dtype=float).ravel()
    Z = np.asarray(Z, dtype=float).ravel()
    if X.size == 0 or Z.size == 0:
        raise ValueError("gram_matrix needs non-empty point lists")
    return kernel(X[:, None], Z[None, :])


def single_dim_gram(kernels: Sequence[Kernel1D], X, Z) -> np.ndarray:
    """Block-diagonal Gram matrix of the single-dimensional matrix kernel.

    Block ``j`` is the Gram matrix of ``kernels[j]`` over coordinate ``j``
    of the points, so the result has shape ``(d*len(X), d*len(Z))``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    d = len(kernels)
    if X.shape[1] != d or Z.shape[1] != d:
        raise ValueError(
            f"points have dimension {X.shape[1]}/{Z.shape[1]}, expected {d} (one kernel per dimension)"
        )
    return block_diag(*(gram_matrix(k, X[:, j], Z[:, j]) for j, k in enumerate(kernels)))


@dataclass(frozen=True)
class TaylorAdmissibility:
    a0: float
    a1: float
    a2: float
    admissible_n2: bool
    admissible_n3: bool
    odd_coefficients: tuple = ()


# relative threshold separating a genuine Taylor coefficient from fit noise
_COEF_TOL = 1e-12


@functools.lru_cache(maxsize=None)
def _taylor_fit(family: KernelFamily, h: float = 0.5, degree: int = 24) -> tuple:
    """Power-series coefficients of the unit-shape profile from a 40-digit Chebyshev fit on ``[0, h]``."""
    k = Kernel1D(family, 1.0)
    with mpmath.workdps(40):
        poly = mpmath.chebyfit(k.profile_mp, [0, mpmath.mpf(h)], degree)
    return tuple(float(c) for c in poly[::-1])


def taylor_admissibility(kernel: Kernel1D) -> TaylorAdmissibility:
    """Estimate the expansion of ``phi`` at 0 and check the flat-limit conditions.

    ``phi(r) = a0 + a1 r^2 + a2 r^4 + ...`` is estimated by a 40-digit
    Chebyshev fit on ``[0, 0.5]`` (in the unit-shape variable). An odd power ``r^k`` below ``r^(2N-1)`` makes the profile
    inadmissible for ``N`` nodes.
    """
    if not kernel.is_radial:
        raise InadmissibleKernelError("linear kernel has no radial profile")
    c = _taylor_fit(kernel.family)
    scale = max(abs(c[0]), 1.0)

    def present(k):
        return abs(c[k]) > _COEF_TOL * scale

    a0, a1, a2 = c[0], c[2], c[4]
    odd = tuple(k for k in (1, 3) if present(k))
    nonzero = lambda v: abs(v) > _COEF_TOL * scale  # noqa: E731
    n2 = nonzero(a0) and nonzero(a1) and not present(1)
    n3 = nonzero(a1) and nonzero(6 * a0 * a2 - a1 * a1) and not odd
    return TaylorAdmissibility(a0, a1, a2, bool(n2), bool(n3), odd)


def _check_admissible(kernel: Kernel1D, n_nodes: int) -> None:
    adm = taylor_admissibility(kernel)
    ok = adm.admissible_n2 if n_nodes == 2 else adm.admissible_n3
    if not ok:
        raise InadmissibleKernelError(
            f"{kernel.family.value} kernel is not admissible for {n_nodes}-node flat limits"
        )


def interpolation_coefficients(kernel: Kernel1D, nodes, values, scale: float = 1.0):
    """Solve ``sum_i alpha_i k(scale*x_m, scale*x_i) = values_m`` in extended precision.

    Returns ``(alpha, alpha_sum)`` as float64; ``alpha_sum`` is the exact sum
    rounded once, which is what a cancellation-free evaluation needs.
    """
    nodes = [float(v) for v in np.ravel(nodes)]
    values = [float(v) for v in np.ravel(values)]
    n = len(nodes)
    if len(values) != n:
        raise ValueError("nodes and values differ in length")
    if len(set(nodes)) < n:
        raise SingularSystemError("interpolation nodes are not pairwise distinct")
    with mpmath.workdps(MP_DIGITS):
        s = mpmath.mpf(scale) * mpmath.mpf(kernel.epsilon)
        K = mpmath.matrix(n, n)
        for i in range(n):
            for j in range(n):
                K[i, j] = kernel.profile_mp(s * abs(mpmath.mpf(nodes[i]) - mpmath.mpf(nodes[j])))
        try:
            alpha = mpmath.lu_solve(K, mpmath.matrix(values))
        except ZeroDivisionError as exc:
            raise SingularSystemError("interpolation matrix is singular") from exc
        alpha_sum = mpmath.fsum(alpha)
        return np.array([float(a) for a in alpha]), float(alpha_sum)


def _split_eval(kernel: Kernel1D, x, nodes, alpha, alpha_sum, phi0):
    # fixed per-point operation order, so equal inputs round identically
    km1 = kernel.minus_zero(x[..., None], nodes)
    acc = phi0 * alpha_sum
    for i in range(len(nodes)):
        acc = acc + km1[..., i] * alpha[i]
    return acc


@dataclass(frozen=True)
class FlatLimitInterpolant:
    """``s(x) = sum_i alpha_i k(eps x, eps x_i)`` through 2 or 3 nodes.

    The coefficients are of order ``eps**-2(N-1)``, so ``s`` is evaluated
    as ``phi(0) * sum(alpha) + sum_i alpha_i (phi(r_i) - phi(0))`` with the
    exact coefficient sum, plus a second expansion ``correction`` that
    absorbs the float64 residual at the nodes.
    """

    kernel: Kernel1D
    nodes: np.ndarray
    values: np.ndarray
    eps: float
    coefficients: np.ndarray
    coefficient_sum: float
    correction: np.ndarray = None
    correction_sum: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.kernel.with_epsilon(self.kernel.epsilon * self.eps)
        phi0 = self.kernel.phi0
        out = _split_eval(k, x, self.nodes, self.coefficients, self.coefficient_sum, phi0)
        if self.correction is not None:
            out = out + _split_eval(k, x, self.nodes, self.correction, self.correction_sum, phi0)
        return out


def flat_limit_interpolant(kernel: Kernel1D, nodes, values, eps: float) -> FlatLimitInterpolant:
    nodes = np.asarray(nodes, dtype=float).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if nodes.size not in (2, 3):
        raise ValueError("flat-limit interpolation takes 2 or 3 nodes")
    if values.size != nodes.size:
        raise ValueError("nodes and values differ in length")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if len(np.unique(nodes)) < nodes.size:
        raise SingularSystemError("interpolation nodes are not pairwise distinct")
    _check_admissible(kernel, nodes.size)
    alpha, alpha_sum = interpolation_coefficients(kernel, nodes, values, scale=eps)
    first = FlatLimitInterpolant(kernel, nodes, values, float(eps), alpha, alpha_sum)
    beta, beta_sum = interpolation_coefficients(kernel, nodes, values - first(nodes), scale=eps)
    return FlatLimitInterpolant(kernel, nodes, values, float(eps), alpha, alpha_sum, beta, beta_sum)


def conditioning_diagnostic(kernel: Kernel1D, nodes) -> float:
    """2-norm condition number of the Gram matrix; ``inf`` when singular."""
    nodes = np.asarray(nodes, dtype=float).ravel()
    if nodes.size < 2:
        raise ValueError("need at least two nodes")
    if len(np.unique(nodes)) < nodes.size:
        return math.inf
    s = np.linalg.svd(gram_matrix(kernel, nodes, nodes), compute_uv=False)
    if s[-1] <= 0.0:
        return math.inf
    return float(s[0] / s[-1])
