"""Structured deep kernel networks: layers, forward/backward passes, deep kernel.

A model alternates linear-kernel layers (plain matrices, no bias) and
single-dimensional kernel layers whose coordinate ``j`` is the trainable
activation ``x -> sum_i alpha[i, j] * k_j(x, c_i)``.  The anchors ``c_i`` are
the model centers pushed through all preceding layers, so centers and data
travel through the network together and share every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import Kernel1D, KernelFamily

__all__ = [
    "LinearLayer",
    "ActivationLayer",
    "SdknModel",
    "ForwardTrace",
    "NotRealizableError",
    "activation_forward",
    "forward",
    "backward",
    "features",
    "deep_kernel_eval",
    "realize_linear_from_centers",
    "linear_from_center_coefficients",
    "init_model",
]


@dataclass
class LinearLayer:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.weights


@dataclass
class ActivationLayer:
    """Coordinate-wise kernel expansion over the propagated centers.

    ``coefficients`` has shape ``(M, d)``; column ``j`` holds the expansion
    coefficients of activation ``j`` which uses ``kernels[j]``.
    """

    coefficients: np.ndarray
    kernels: tuple = ()

    def __post_init__(self):
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        d = self.coefficients.shape[1]
        if isinstance(self.kernels, Kernel1D):
            self.kernels = (self.kernels,) * d
        elif not self.kernels:
            self.kernels = (Kernel1D(),) * d
        self.kernels = tuple(self.kernels)
        if len(self.kernels) != d:
            raise ValueError(f"need {d} kernels, got {len(self.kernels)}")
        if any(not k.is_radial for k in self.kernels):
            raise ValueError("activation kernels must be radial")

    @property
    def d_in(self) -> int:
        return self.coefficients.shape[1]

    d_out = d_in

    @property
    def num_centers(self) -> int:
        return self.coefficients.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.coefficients

    def kernel_groups(self):
        """Yield ``(kernel, column_indices)`` for each distinct kernel."""
        groups: dict = {}
        for j, k in enumerate(self.kernels):
            groups.setdefault(k, []).append(j)
        for k, cols in groups.items():
            yield k, np.asarray(cols)


@dataclass
class SdknModel:
    layers: list
    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.layers = list(self.layers)

    @property
    def dims(self) -> list:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def depth(self) -> int:
        return sum(isinstance(layer, ActivationLayer) for layer in self.layers)

    @property
    def width(self) -> int:
        return max(self.dims)

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def parameters(self) -> list:
        return [layer.params for layer in self.layers]

    def copy(self) -> "SdknModel":
        layers = []
        for layer in self.layers:
            if isinstance(layer, LinearLayer):
                layers.append(LinearLayer(layer.weights.copy()))
            else:
                layers.append(ActivationLayer(layer.coefficients.copy(), layer.kernels))
        return SdknModel(layers, self.centers.copy())

    def validate(self) -> "SdknModel":
        if not self.layers or len(self.layers) % 2 == 0:
            raise ValueError("an SDKN has 2L+1 layers")
        for pos, layer in enumerate(self.layers):
            expected = LinearLayer if pos % 2 == 0 else ActivationLayer
            if not isinstance(layer, expected):
                raise ValueError(f"layer {pos} must be {expected.__name__}")
            if not np.all(np.isfinite(layer.params)):
                raise ValueError(f"layer {pos} has non-finite parameters")
            if pos and layer.d_in != self.layers[pos - 1].d_out:
                raise ValueError(
                    f"layer {pos} expects {layer.d_in} inputs, previous layer gives {self.layers[pos - 1].d_out}"
                )
            if isinstance(layer, ActivationLayer):
                if layer.num_centers != self.num_centers:
                    raise ValueError(
                        f"layer {pos} has {layer.num_centers} coefficient rows for {self.num_centers} centers"
                    )
                if len(layer.kernels) != layer.d_in:
                    raise ValueError(f"layer {pos} needs one kernel per coordinate")
                if any(not k.is_radial for k in layer.kernels):
                    raise ValueError(f"layer {pos} uses a non-radial activation kernel")
        if self.centers.shape[1] != self.d_in:
            raise ValueError(f"centers have dimension {self.centers.shape[1]}, model input is {self.d_in}")
        if self.num_centers < 1:
            raise ValueError("at least one center is required")
        return self


@dataclass
class ForwardTrace:
    """Values entering each layer (plus the final output).

    ``values[l]`` stacks the batch rows on top of the propagated centers,
    shape ``(n_batch + M, d_l)``.
    """

    values: list
    n_batch: int
    shapes: list = field(default_factory=list)

    def batch(self, l: int) -> np.ndarray:
        return self.values[l][: self.n_batch]

    def centers(self, l: int) -> np.ndarray:
        return self.values[l][self.n_batch :]

    @property
    def output(self) -> np.ndarray:
        return self.batch(-1)


def _column_sum(alpha: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(col) for col in alpha.T])


def activation_forward(layer: ActivationLayer, X, Zprop) -> np.ndarray:
    """Evaluate the activation layer at rows of ``X`` with anchors ``Zprop``.

    Uses ``phi(0) * sum_i alpha_i + sum_i alpha_i (k_i - phi(0))``, which is
    the same function but keeps accuracy when kernel values crowd around
    ``phi(0)`` (the flat limit).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zprop = np.atleast_2d(np.asarray(Zprop, dtype=float))
    alpha = layer.coefficients
    if X.shape[1] != layer.d_in or Zprop.shape != alpha.shape:
        raise ValueError(
            f"shape mismatch: inputs {X.shape}, centers {Zprop.shape}, coefficients {alpha.shape}"
        )
    out = np.empty((X.shape[0], layer.d_in))
    colsum = _column_sum(alpha)
    for kernel, cols in layer.kernel_groups():
        diff = X[:, None, cols] - Zprop[None, :, cols]
        km1 = kernel.minus_zero(diff, 0.0)
        out[:, cols] = kernel.phi0 * colsum[cols] + np.einsum("nmc,mc->nc", km1, alpha[:, cols])
    return out


def forward(model: SdknModel, X):
    """Run the batch and the centers through every layer.

    Returns ``(outputs, trace)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.d_in:
        raise ValueError(f"input dimension {X.shape[1]} does not match model input {model.d_in}")
    n = X.shape[0]
    h = np.vstack([X, model.centers])
    values = [h]
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            h = h @ layer.weights.T
        else:
            h = activation_forward(layer, h, h[n:])
        values.append(h)
    trace = ForwardTrace(values, n, [layer.params.shape for layer in model.layers])
    return h[:n], trace


def _activation_backward(layer: ActivationLayer, H: np.ndarray, n_batch: int, G: np.ndarray):
    alpha = layer.coefficients
    Zp = H[n_batch:]
    dalpha = np.zeros_like(alpha)
    dH = np.zeros_like(H)
    for kernel, cols in layer.kernel_groups():
        a = alpha[:, cols]
        Hc = H[:, None, cols]
        Zc = Zp[None, :, cols]
        K = kernel(Hc, Zc)  # (rows, M, c)
        Kd = kernel.dx(Hc, Zc)
        g = G[:, cols]
        dalpha[:, cols] = np.einsum("nc,nmc->mc", g, K)
        weighted = g[:, None, :] * a[None, :, :] * Kd  # (rows, M, c)
        dH[:, cols] += weighted.sum(axis=1)
        # radial kernels: d/dz k(x, z) = -d/dx k(x, z)
        dH[n_batch:, cols] -= weighted.sum(axis=0)
    return dalpha, dH


def backward(model: SdknModel, trace: ForwardTrace, output_cotangent, extra_cotangents=None):
    """Reverse-mode gradients of a scalar objective.

    ``output_cotangent`` is the derivative of the objective with respect to
    the batch outputs.  ``extra_cotangents`` optionally maps an index ``l``
    of ``trace.values`` to a cotangent of the same shape (used by penalties
    that depend on propagated centers).  Returns one gradient array per
    layer, shaped like that layer's parameters.
    """
    if trace.shapes and trace.shapes != [layer.params.shape for layer in model.layers]:
        raise ValueError("trace was produced by a different model")
    if len(trace.values) != len(model.layers) + 1:
        raise ValueError("trace does not match the model depth")
    G_out = np.atleast_2d(np.asarray(output_cotangent, dtype=float))
    n = trace.n_batch
    final = trace.values[-1]
    if G_out.shape != (n, final.shape[1]):
        raise ValueError(f"cotangent shape {G_out.shape} does not match outputs {(n, final.shape[1])}")
    extra = extra_cotangents or {}
    G = np.zeros_like(final)
    G[:n] = G_out
    grads = [None] * len(model.layers)
    for l in range(len(model.layers) - 1, -1, -1):
        if l + 1 in extra:
            G = G + extra[l + 1]
        layer = model.layers[l]
        H = trace.values[l]
        if isinstance(layer, LinearLayer):
            grads[l] = G.T @ H
            G = G @ layer.weights
        else:
            grads[l], G = _activation_backward(layer, H, n, G)
    return grads


def features(model: SdknModel, X) -> np.ndarray:
    """Feature map of the deep kernel: all layers except the final linear one."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(model.layers) == 1:
        if X.shape[1] != model.d_in:
            raise ValueError("dimension mismatch")
        return X
    inner = SdknModel(model.layers[:-1], model.centers)
    out, _ = forward(inner, X)
    return out


def deep_kernel_eval(model: SdknModel, outer: Kernel1D, x, y) -> float:
    """``K(x, y) = outer(F(x), F(y))`` with ``F`` the learned feature map.

    Radial outer kernels act on the Euclidean distance of the features; the
    linear family uses their inner product.
    """
    F = features(model, np.vstack([np.ravel(x), np.ravel(y)]))
    if not outer.is_radial:
        return float(F[0] @ F[1])
    return float(outer.profile(outer.epsilon * np.linalg.norm(F[0] - F[1])))


class NotRealizableError(ValueError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def realize_linear_from_centers(A, Z, data=None, rtol: float = 1e-8) -> np.ndarray:
    """Coefficients ``alpha_i`` with ``sum_i alpha_i <x, z_i> = A x``.

    Returns the minimum-norm solution as an ``(M, b)`` array (row ``i`` is
    ``alpha_i``).  Without ``data`` the identity must hold for every ``x``,
    which requires the row space of ``A`` to lie in ``span(Z)``.  With
    ``data`` (rows are points) it only has to hold on those points, so
    directions along which the data carry no information are free.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.size == 0:
        raise ValueError("need at least one center")
    if Z.shape[1] != A.shape[1]:
        raise ValueError(f"centers have dimension {Z.shape[1]}, A has {A.shape[1]} columns")
    if data is None:
        lhs, rhs = Z.T, A.T  # Z^T C = A^T
    else:
        X = np.atleast_2d(np.asarray(data, dtype=float))
        lhs, rhs = (Z @ X.T).T, X @ A.T
    C = np.linalg.pinv(lhs) @ rhs
    residual = float(np.linalg.norm(lhs @ C - rhs))
    scale = float(np.linalg.norm(rhs))
    if residual > rtol * max(scale, np.finfo(float).tiny):
        raise NotRealizableError(
            f"row space of A is not spanned by the centers (residual {residual:.3g})", residual
        )
    return C


def linear_from_center_coefficients(C, Z) -> np.ndarray:
    """Matrix of the linear map ``x -> sum_i alpha_i <x, z_i>``."""
    return np.atleast_2d(C).T @ np.atleast_2d(Z)


def init_model(
    d_in: int,
    widths: Sequence[int],
    d_out: int,
    centers,
    kernel: Kernel1D | Sequence[Kernel1D] = Kernel1D(KernelFamily.GAUSSIAN, 1.0),
    seed: int | np.random.Generator = 0,
) -> SdknModel:
    """Random model ``Lin, Act, Lin, ..., Act, Lin`` with hidden ``widths``.

    Linear weights are uniform on ``[-1/sqrt(d_in), 1/sqrt(d_in)]``,
    activation coefficients normal with standard deviation ``1/sqrt(M)``.
    ``kernel`` may be one kernel for every activation layer or a list with
    one entry per layer.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    M = centers.shape[0]
    if any(w < 1 for w in widths):
        raise ValueError("widths must be positive")
    kernels = [kernel] * len(widths) if isinstance(kernel, Kernel1D) else list(kernel)
    if len(kernels) != len(widths):
        raise ValueError("need one kernel per activation layer")
    layers: list = []
    prev = d_in
    for w, k in zip(widths, kernels):
        bound = 1.0 / math.sqrt(prev)
        layers.append(LinearLayer(rng.uniform(-bound, bound, size=(w, prev))))
        layers.append(ActivationLayer(rng.normal(0.0, 1.0 / math.sqrt(M), size=(M, w)), (k,) * w))
        prev = w
    bound = 1.0 / math.sqrt(prev)
    layers.append(LinearLayer(rng.uniform(-bound, bound, size=(d_out, prev))))
    return SdknModel(layers, centers).validate()
