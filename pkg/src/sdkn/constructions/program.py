"""Stage programs: the symbolic layer plan behind every constructed SDKN.

A program is a list of stages.  Stage ``l`` applies a linear map ``pre_l``
to the previous activation outputs (or to the inputs), scales it by the
flat-limit parameter ``sigma`` and feeds every coordinate to a univariate
kernel expansion over the three propagated centers.  Each coordinate is
tagged with the operation its expansion interpolates: ``id`` (u -> u),
``sq`` (u -> u**2) or ``one`` (u -> 1).  Three interpolation nodes make the
expansion converge to that polynomial as ``sigma -> 0``.

:class:`Net` builds programs out of symbolic values (``Val``): linear
readouts of the current state together with their exact values at the
centers.  :func:`realize` turns a program into an :class:`SdknModel`,
solving every expansion against the centers as the float64 network
actually propagates them.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..kernels import Kernel1D, interpolation_coefficients
from ..network import ActivationLayer, LinearLayer, SdknModel, activation_forward

MARGIN = 1e-8
COLLINEAR_TOL = 1e-10
BETA_CANDIDATES = tuple(1.0 / k for k in range(1, 1001))


class CenterCollapseError(ValueError):
    """Propagated centers stopped being pairwise distinct."""


def margin(values) -> float:
    """Smallest pairwise gap relative to the largest magnitude."""
    v = np.asarray(values, dtype=float).ravel()
    scale = np.max(np.abs(v))
    if scale == 0.0:
        return 0.0
    gaps = [abs(a - b) for a, b in itertools.combinations(v, 2)]
    return float(min(gaps) / scale)


@dataclass
class Stage:
    pre: np.ndarray
    ops: list


@dataclass
class Program:
    d_in: int
    stages: list
    out: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def widths(self) -> list:
        return [self.d_in] + [len(s.ops) for s in self.stages] + [self.out.shape[0]]


@dataclass
class Val:
    """A linear readout of the network state at one generation."""

    readout: np.ndarray
    centers: np.ndarray
    generation: int

    def _coerce(self, other):
        if other.generation != self.generation:
            raise ValueError("values from different stages cannot be combined")

    def __add__(self, other):
        self._coerce(other)
        return Val(self.readout + other.readout, self.centers + other.centers, self.generation)

    def __sub__(self, other):
        self._coerce(other)
        return Val(self.readout - other.readout, self.centers - other.centers, self.generation)

    def __mul__(self, c: float):
        return Val(self.readout * c, self.centers * c, self.generation)

    __rmul__ = __mul__

    @property
    def is_zero(self) -> bool:
        return not np.any(self.readout)


class Net:
    """Incremental builder for a :class:`Program`.

    ``stage(requests)`` appends one activation stage.  Requests are
    ``("id", v)``, ``("sq", v)``, ``("prod", v, w)`` or ``("one", v)``
    where ``v``, ``w`` are values of the current generation; the return
    value holds the resulting values of the next generation in request
    order.  A product occupies three squaring coordinates,
    ``v*w = ((v + b w)^2 - v^2 - b^2 w^2) / (2 b)``.
    """

    def __init__(self, center_values):
        cv = np.atleast_2d(np.asarray(center_values, dtype=float))
        self.d_in = cv.shape[1]
        self.center_values = cv
        self.stages: list = []
        self._width = self.d_in
        self.notes: list = []

    @property
    def generation(self) -> int:
        return len(self.stages)

    def input(self, j: int) -> Val:
        if self.generation:
            raise ValueError("inputs are only available before the first stage")
        r = np.zeros(self.d_in)
        r[j] = 1.0
        return Val(r, self.center_values[:, j].copy(), 0)

    def zero(self) -> Val:
        return Val(np.zeros(self._width), np.zeros(self.center_values.shape[0]), self.generation)

    def checkpoint(self):
        return len(self.stages), self._width, len(self.notes)

    def restore(self, cp) -> None:
        n, w, k = cp
        del self.stages[n:]
        del self.notes[k:]
        self._width = w

    def _check(self, v: Val) -> None:
        if v.generation != self.generation:
            raise ValueError("stale value: built before the latest stage")

    @staticmethod
    def _require_distinct(centers, what: str) -> None:
        m = margin(centers)
        if m < MARGIN:
            raise CenterCollapseError(f"{what}: propagated centers collapse (margin {m:.3g})")

    def _product_plan(self, v: Val, w: Val):
        """Return ``("pair", beta)`` or ``("square", which, factor)``."""
        A = np.column_stack([v.centers, w.centers])
        s = np.linalg.svd(A, compute_uv=False)
        if s[0] == 0.0:
            return ("zero",)
        if s[1] <= COLLINEAR_TOL * s[0]:
            # w = c v (or v = c w) on the centers: v*w = c v^2
            if np.linalg.norm(v.centers) >= np.linalg.norm(w.centers):
                c = float(v.centers @ w.centers / (v.centers @ v.centers))
                which = 0
            else:
                c = float(v.centers @ w.centers / (w.centers @ w.centers))
                which = 1
            warnings.warn("collinear product inputs on the centers; using the squaring fallback")
            self.notes.append("collinear product fallback")
            return ("square", which, c)
        for beta in BETA_CANDIDATES:
            if margin(v.centers + beta * w.centers) >= MARGIN:
                return ("pair", beta)
        raise CenterCollapseError("no beta keeps v + beta*w distinct on the centers")

    def stage(self, requests) -> list:
        rows: list = []
        ops: list = []
        plans: list = []

        def emit(readout, op, centers, what):
            if op != "one":
                self._require_distinct(centers, what)
            rows.append(np.asarray(readout, dtype=float))
            ops.append(op)
            return len(rows) - 1

        for req in requests:
            kind, v = req[0], req[1]
            self._check(v)
            if kind in ("id", "sq"):
                if v.is_zero:
                    plans.append(("zero",))
                    continue
                idx = emit(v.readout, kind, v.centers, kind)
                vals = v.centers if kind == "id" else v.centers**2
                plans.append(("coord", idx, 1.0, vals))
            elif kind == "one":
                idx = emit(v.readout, "one", v.centers, "one")
                self._require_distinct(v.centers, "one")
                plans.append(("coord", idx, 1.0, np.ones_like(v.centers)))
            elif kind == "prod":
                w = req[2]
                self._check(w)
                if v.is_zero or w.is_zero:
                    plans.append(("zero",))
                    continue
                plan = self._product_plan(v, w)
                vals = v.centers * w.centers
                if plan[0] == "zero":
                    plans.append(("zero",))
                elif plan[0] == "square":
                    _, which, c = plan
                    base = v if which == 0 else w
                    idx = emit(base.readout, "sq", base.centers, "product fallback")
                    plans.append(("coord", idx, c, vals))
                else:
                    beta = plan[1]
                    i0 = emit(v.readout, "sq", v.centers, "product factor")
                    i1 = emit(w.readout, "sq", w.centers, "product factor")
                    i2 = emit(v.readout + beta * w.readout, "sq", v.centers + beta * w.centers, "product sum")
                    coef = {i0: -1.0 / (2 * beta), i1: -beta / 2.0, i2: 1.0 / (2 * beta)}
                    plans.append(("combo", coef, vals))
            else:
                raise ValueError(f"unknown request {kind!r}")

        pre = np.vstack(rows) if rows else np.zeros((0, self._width))
        self.stages.append(Stage(pre, ops))
        width = len(ops)
        self._width = width
        gen = self.generation
        out = []
        for plan in plans:
            r = np.zeros(width)
            if plan[0] == "zero":
                out.append(Val(r, np.zeros(self.center_values.shape[0]), gen))
            elif plan[0] == "coord":
                _, idx, c, vals = plan
                r[idx] = c
                out.append(Val(r, np.asarray(vals, dtype=float), gen))
            else:
                _, coef, vals = plan
                for i, c in coef.items():
                    r[i] = c
                out.append(Val(r, np.asarray(vals, dtype=float), gen))
        return out

    def carry(self, values) -> list:
        """One identity stage for every value."""
        return self.stage([("id", v) for v in values])

    def program(self, outputs) -> Program:
        for v in outputs:
            self._check(v)
        out = np.vstack([v.readout for v in outputs]) if outputs else np.zeros((0, self._width))
        return Program(self.d_in, list(self.stages), out)


@dataclass(eq=False)
class Fragment(SdknModel):
    """An :class:`SdknModel` built by a construction, plus its provenance."""

    sigma: float = 1e-3
    kernel: Kernel1D = field(default_factory=Kernel1D)
    center_targets: np.ndarray | None = None
    program: Program | None = None
    beta: float | None = None
    notes: list = field(default_factory=list)


def _apply_op(op: str, u: np.ndarray) -> np.ndarray:
    if op == "id":
        return u
    if op == "sq":
        return u * u
    if op == "one":
        return np.ones_like(u)
    raise ValueError(op)


def _solve_stage(kernel, nodes, targets):
    alpha = np.empty_like(nodes)
    for j in range(nodes.shape[1]):
        alpha[:, j], _ = interpolation_coefficients(kernel, nodes[:, j], targets[:, j])
    return alpha


def realize(program: Program, centers, kernel: Kernel1D, sigma: float, correct_offset: bool = True) -> Fragment:
    """Build the network for ``program``.

    Expansions are solved in extended precision against the float64
    propagated centers, with exact targets.  Any constant offset left by
    rounding the coefficients only shifts the next layer's inputs and the
    centers alike, which translation-invariant kernels ignore; at the
    output it is cancelled by one extra coordinate interpolating the
    constant 1.  Re-solving an existing coordinate would not help: the
    squaring coefficients are of order ``sigma**-4`` and round to the same
    offset scale.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.shape[1] != program.d_in:
        raise ValueError("centers do not match the program input dimension")
    return extend(
        [], centers, centers, centers, program.stages, program.out, kernel, sigma,
        correct_offset=correct_offset, program=program,
    )


def extend(
    prefix, centers, h_float, h_ideal, stages, out, kernel, sigma, *, correct_offset=True, program=None, first_inputs=None
) -> Fragment:
    """Append ``stages`` and the readout ``out`` after the layers ``prefix``.

    ``h_float`` and ``h_ideal`` are the prefix's state at the centers as
    computed in float64 and exactly.  ``first_inputs`` optionally overrides
    the exact inputs of the first stage (used when only the outputs of the
    prefix are known exactly).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    layers = list(prefix)
    stage_data = []
    for s_idx, st in enumerate(stages):
        W = sigma * st.pre
        u_float = h_float @ W.T
        u_ideal = first_inputs if (s_idx == 0 and first_inputs is not None) else h_ideal @ st.pre.T
        targets = np.column_stack([_apply_op(op, u_ideal[:, j]) for j, op in enumerate(st.ops)])
        for j, op in enumerate(st.ops):
            if op != "one" and margin(u_ideal[:, j]) < MARGIN:
                raise CenterCollapseError(f"stage {s_idx + 1}, coordinate {j}: centers collapse")
        alpha = _solve_stage(kernel, u_float, targets)
        act = ActivationLayer(alpha, (kernel,) * len(st.ops))
        layers += [LinearLayer(W), act]
        stage_data.append((u_float, targets))
        h_float = activation_forward(act, u_float, u_float)
        h_ideal = targets
    out = np.array(out, dtype=float)
    ideal_out = h_ideal @ out.T
    layers.append(LinearLayer(out))
    model = Fragment(layers, centers, sigma=sigma, kernel=kernel, center_targets=ideal_out, program=program)
    if correct_offset and stages:
        _correct_output_offset(model, stages[-1].ops, stage_data[-1], kernel)
    return model.validate()


def _correct_output_offset(model: Fragment, ops, last_stage, kernel) -> None:
    last_act: ActivationLayer = model.layers[-2]
    u_float, _ = last_stage
    out = model.layers[-1].weights
    h = activation_forward(last_act, u_float, u_float)
    offset = (h @ out.T - model.center_targets).mean(axis=0)
    if not np.any(offset):
        return
    alpha = last_act.coefficients
    scale = np.maximum(1.0, np.abs(model.center_targets).max(axis=0))
    needs_extra = [k for k, c in enumerate(offset) if abs(c) > 1e-14 * scale[k]]
    if not needs_extra:
        return
    # one extra coordinate interpolating the constant 1 on the best-separated input row
    j_best = max(
        (j for j, op in enumerate(ops) if op != "one"),
        key=lambda j: margin(u_float[:, j]),
    )
    W_prev = model.layers[-3].weights
    a_one, _ = interpolation_coefficients(kernel, u_float[:, j_best], np.ones(u_float.shape[0]))
    model.layers[-3] = LinearLayer(np.vstack([W_prev, W_prev[j_best]]))
    model.layers[-2] = ActivationLayer(
        np.column_stack([alpha, a_one]), last_act.kernels + (kernel,)
    )
    col = np.zeros((out.shape[0], 1))
    for k in needs_extra:
        col[k, 0] = -offset[k]
    model.layers[-1] = LinearLayer(np.hstack([out, col]))
    model.notes.append("constant coordinate appended to cancel output rounding offset")
