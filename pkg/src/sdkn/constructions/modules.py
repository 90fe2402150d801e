"""Identity, squaring, product, monomial and addition modules, and the
polynomial compiler that stacks them."""

from __future__ import annotations

import enum
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..kernels import Kernel1D, KernelFamily, _check_admissible
from ..network import ActivationLayer, LinearLayer, SdknModel, forward
from .program import (
    BETA_CANDIDATES,
    MARGIN,
    CenterCollapseError,
    Fragment,
    Net,
    Stage,
    extend,
    margin,
    realize,
)

DEFAULT_SIGMA = 1e-3
DEFAULT_KERNEL = Kernel1D(KernelFamily.GAUSSIAN, 1.0)
_TRIPLE = (0.1, 0.5, 0.9)


class DegenerateTermWarning(UserWarning):
    """An addition module was asked for an all-zero multi-index."""


@dataclass(frozen=True)
class CenterTriple:
    """Three points whose coordinates are pairwise distinct, one coordinate at a time."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] != 3:
            if pts.shape[1] == 3 and pts.shape[0] == 1:
                pts = pts.T
            else:
                raise ValueError("a center triple holds exactly three points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("centers must be finite")
        if np.any(pts < 0):
            raise ValueError("centers must have nonnegative coordinates")
        for j in range(pts.shape[1]):
            if margin(pts[:, j]) < MARGIN:
                raise ValueError(f"center coordinate {j} is not pairwise distinct")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def default(cls, d: int, box=None) -> "CenterTriple":
        """Permutations of (0.1, 0.5, 0.9) per coordinate, mapped into ``box``."""
        perms = list(itertools.permutations(range(3)))
        cols = []
        for j in range(d):
            p = perms[[0, 3, 4, 1, 2, 5][j % 6]]
            cols.append(np.array([_TRIPLE[i] for i in p]) + 0.03 * (j // 6))
        pts = np.column_stack(cols)
        if box is not None:
            lo, hi = _box_arrays(box, d)
            pts = lo + (hi - lo) * pts
        return cls(pts)


def _as_triple(centers, d: int) -> CenterTriple:
    if centers is None:
        return CenterTriple.default(d)
    if not isinstance(centers, CenterTriple):
        centers = CenterTriple(centers)
    if centers.dim != d:
        raise ValueError(f"expected {d}-dimensional centers, got {centers.dim}")
    return centers


def _admissible(kernel: Kernel1D) -> Kernel1D:
    _check_admissible(kernel, 3)
    return kernel


# ---------------------------------------------------------------------------
# power chains


def _bits(n: int) -> list:
    return [int(b) for b in reversed(bin(n)[2:])]


def power_jobs(net: Net, jobs, keep=()):
    """Compute ``carry * base**n`` for every job by binary exponentiation.

    Jobs run in lockstep and share the squaring chain of a common base
    (same ``Val`` object).  Stage ``s`` handles bit ``s`` of every exponent:
    a set bit multiplies the carry by ``base**(2**s)``.  A job without a
    carry whose remaining work is its top bit takes the chain value
    directly, so ``x**n`` alone needs ``ceil(log2 n)`` stages and a carried
    product needs ``floor(log2 n) + 1``.  Values in ``keep`` are passed
    through every stage unchanged.  Returns ``(results, kept)`` at the
    final generation.
    """
    state = []
    for base, n, carry in jobs:
        if n < 1:
            raise ValueError("exponents must be >= 1")
        state.append({"base": id(base), "bits": _bits(n), "carry": carry, "result": None})
    chains = {}
    for base, _, _ in jobs:
        chains[id(base)] = base
    keep = list(keep)
    s = 0
    while True:
        for st in state:
            if st["result"] is None and st["carry"] is None and s == len(st["bits"]) - 1:
                st["result"] = chains[st["base"]]
        if all(st["result"] is not None for st in state):
            break
        requests = [("id", v) for v in keep]
        slots = []
        for st in state:
            if st["result"] is not None:
                requests.append(("id", st["result"]))
                slots.append(("result", st))
                continue
            p = chains[st["base"]]
            if st["bits"][s]:
                requests.append(("id", p) if st["carry"] is None else ("prod", st["carry"], p))
                slots.append(("carry", st))
            elif st["carry"] is not None:
                requests.append(("id", st["carry"]))
                slots.append(("carry", st))
            else:
                slots.append(None)
        chain_keys = [
            key
            for key in chains
            if any(st["result"] is None and st["base"] == key and len(st["bits"]) - 1 > s for st in state)
        ]
        for key in chain_keys:
            requests.append(("sq", chains[key]))
        vals = net.stage(requests)
        keep = vals[: len(keep)]
        pos = len(keep)
        for slot in slots:
            if slot is None:
                continue
            kind, st = slot
            v = vals[pos]
            pos += 1
            if kind == "result":
                st["result"] = v
            else:
                last = s == len(st["bits"]) - 1
                if last:
                    st["result"] = v
                else:
                    st["carry"] = v
        new_chains = {}
        for key in chain_keys:
            new_chains[key] = vals[pos]
            pos += 1
        chains = new_chains
        s += 1
    return [st["result"] for st in state], keep


# ---------------------------------------------------------------------------
# module programs on a shared builder


def _addition_steps(net: Net, xs, S, n, alpha, beta):
    """Append one addition module; return ``(xs, S_new)``."""
    J = [j for j, nj in enumerate(n) if nj > 0]
    if not J:
        warnings.warn("all-zero multi-index: adding a constant through the constant path", DegenerateTermWarning)
        net.notes.append("constant path for an all-zero multi-index")
        anchor = xs[-1]
        vals = net.stage([("id", x) for x in xs] + [("id", S), ("one", anchor)])
        xs, S, one = vals[: len(xs)], vals[len(xs)], vals[len(xs) + 1]
        return xs, S + alpha * one + beta * xs[-1]
    d = len(xs)
    res, kept = power_jobs(net, [(xs[J[0]], n[J[0]], None)], keep=list(xs) + [S])
    xs, S = kept[:d], kept[d]
    if len(J) == 1:
        return xs, S + alpha * res[0] + beta * xs[-1]
    r = res[0] + beta * xs[J[1]]
    for t in range(1, len(J)):
        j = J[t]
        base = xs[j]
        jobs = [(base, n[j], r)]
        if beta:
            jobs.append((base, n[j] + 1, None))
        res, kept = power_jobs(net, jobs, keep=list(xs) + [S])
        xs, S = kept[:d], kept[d]
        part = res[0] - beta * res[1] if beta else res[0]
        if t < len(J) - 1:
            r = part + beta * xs[J[t + 1]]
        else:
            return xs, S + alpha * part + beta * xs[-1]
    raise AssertionError("unreachable")


def _pick_beta(attempt, beta):
    """Run ``attempt(beta)``; with ``beta=None`` search 1, 1/2, 1/3, ..."""
    if beta is not None:
        return attempt(beta), beta
    last = None
    for b in BETA_CANDIDATES:
        try:
            return attempt(b), b
        except CenterCollapseError as exc:
            last = exc
    raise CenterCollapseError(f"no beta keeps the propagated centers distinct ({last})")


def _finish(program, centers, kernel, sigma, beta=None, notes=()) -> Fragment:
    frag = realize(program, centers, kernel, sigma)
    frag.beta = beta
    frag.notes = list(notes) + frag.notes
    return frag


# ---------------------------------------------------------------------------
# public builders


class ModuleKind(str, enum.Enum):
    IDENTITY = "identity"
    SQUARING = "squaring"
    PRODUCT = "product"
    UNIVARIATE_MONOMIAL = "univariate_monomial"
    BIVARIATE_MONOMIAL = "bivariate_monomial"
    ADDITION = "addition"
    DEPTH_PAD = "depth_pad"


@dataclass(frozen=True)
class ModuleBlueprint:
    """Declarative description of one module; ``build_module`` realizes it."""

    kind: ModuleKind
    sigma: float = DEFAULT_SIGMA
    n: int = 1
    a: int = 1
    b: int = 1
    multiindex: tuple = ()
    alpha: float = 1.0
    beta: float | None = None
    extra_depth: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModuleKind(self.kind))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if min(self.n, self.a, self.b) < 1:
            raise ValueError("exponents must be >= 1")
        if any(v < 0 for v in self.multiindex):
            raise ValueError("multi-index entries must be nonnegative")
        if self.extra_depth < 0:
            raise ValueError("extra depth must be nonnegative")


def build_module(bp: ModuleBlueprint, centers=None, kernel=DEFAULT_KERNEL, base: SdknModel | None = None) -> SdknModel:
    k = bp.kind
    if k in (ModuleKind.IDENTITY, ModuleKind.SQUARING):
        return build_identity_or_squaring(k, centers, bp.sigma, kernel)
    if k == ModuleKind.PRODUCT:
        return build_product_module(centers, bp.beta, bp.sigma, kernel)
    if k == ModuleKind.UNIVARIATE_MONOMIAL:
        return build_univariate_monomial(bp.n, centers, bp.sigma, kernel)
    if k == ModuleKind.BIVARIATE_MONOMIAL:
        return build_bivariate_monomial(bp.a, bp.b, bp.beta or 0.0, centers, bp.sigma, kernel)
    if k == ModuleKind.ADDITION:
        return build_addition_module(bp.multiindex, bp.alpha, bp.beta, centers, bp.sigma, kernel)
    if base is None:
        raise ValueError("depth padding needs a base fragment")
    return adjust_depth(base, base.depth + bp.extra_depth, bp.sigma, kernel)


def build_identity_or_squaring(kind, centers=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL) -> Fragment:
    kind = ModuleKind(kind)
    if kind not in (ModuleKind.IDENTITY, ModuleKind.SQUARING):
        raise ValueError("kind must be identity or squaring")
    kernel = _admissible(kernel)
    c = _as_triple(centers, 1)
    net = Net(c.points)
    (v,) = net.stage([("id" if kind == ModuleKind.IDENTITY else "sq", net.input(0))])
    return _finish(net.program([v]), c.points, kernel, sigma)


def build_product_module(centers=None, beta=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL) -> Fragment:
    """``(x, y) -> x*y`` through three squaring coordinates.

    ``beta=None`` picks the first of 1, 1/2, 1/3, ... keeping
    ``x + beta*y`` distinct on the centers; an explicit ``beta`` that
    collapses them raises :class:`CenterCollapseError`.
    """
    kernel = _admissible(kernel)
    c = _as_triple(centers, 2)
    if beta is not None and beta == 0:
        raise ValueError("beta must be nonzero")

    net = Net(c.points)
    x, y = net.input(0), net.input(1)
    plan = net._product_plan(x, y)
    if beta is not None and plan[0] == "pair":
        if margin(x.centers + beta * y.centers) < MARGIN:
            raise CenterCollapseError(f"beta={beta} collapses x + beta*y on the centers")
        sq = net.stage([("sq", x), ("sq", y), ("sq", x + beta * y)])
        out = (-1.0 / (2 * beta)) * sq[0] + (-beta / 2.0) * sq[1] + (1.0 / (2 * beta)) * sq[2]
        b = beta
    else:
        (out,) = net.stage([("prod", x, y)])
        b = plan[1] if plan[0] == "pair" else None
    return _finish(net.program([out]), c.points, kernel, sigma, beta=b, notes=net.notes)


def build_univariate_monomial(n: int, centers=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL) -> Fragment:
    """``x -> x**n`` with depth ``max(ceil(log2 n), 1)``."""
    if int(n) != n or n < 1:
        raise ValueError("n must be an integer >= 1")
    n = int(n)
    kernel = _admissible(kernel)
    c = _as_triple(centers, 1)
    net = Net(c.points)
    (v,), _ = power_jobs(net, [(net.input(0), n, None)])
    if net.generation == 0:
        (v,) = net.carry([v])
    return _finish(net.program([v]), c.points, kernel, sigma, notes=net.notes)


def build_bivariate_monomial(
    a: int, b: int, beta: float = 0.0, centers=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL, extended=None
) -> Fragment:
    """``(x, y[, z]) -> x**a * y**b [+ beta*z]``.

    Depth ``ceil(log2 max(a, b)) + 1``.  The extended variant (three
    inputs) is selected by 3-dimensional centers or ``extended=True``.
    """
    for e in (a, b):
        if int(e) != e or e < 1:
            raise ValueError("exponents must be integers >= 1")
    a, b = int(a), int(b)
    kernel = _admissible(kernel)
    if extended is None:
        extended = centers is not None and np.atleast_2d(np.asarray(getattr(centers, "points", centers))).shape[1] == 3
    c = _as_triple(centers, 3 if extended else 2)
    net = Net(c.points)
    x, y = net.input(0), net.input(1)
    keep = [net.input(2)] if extended else []
    target = max(math.ceil(math.log2(max(a, b))), 0)
    (xa, yb), keep = power_jobs(net, [(x, a, None), (y, b, None)], keep=keep)
    while net.generation < target:
        vals = net.carry([xa, yb] + keep)
        xa, yb, keep = vals[0], vals[1], vals[2:]
    vals = net.stage([("prod", xa, yb)] + [("id", v) for v in keep])
    out = vals[0]
    if extended:
        out = out + beta * vals[1]
    return _finish(net.program([out]), c.points, kernel, sigma, beta=beta, notes=net.notes)


def build_addition_module(
    multiindex, alpha: float = 1.0, beta=None, centers=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL
) -> Fragment:
    """State ``(x_1..x_d[, S]) -> (x_1..x_d, S + alpha*prod x_j**n_j + beta*x_d)``.

    ``d+1``-dimensional centers make the last input the running sum ``S``;
    ``d``-dimensional centers mean ``S = 0``.  ``beta=None`` selects the
    first of 1, 1/2, ... that keeps every propagated center distinct.
    """
    n = [int(v) for v in multiindex]
    if any(v < 0 for v in n) or any(v != w for v, w in zip(n, multiindex)):
        raise ValueError("multi-index entries must be nonnegative integers")
    d = len(n)
    if d < 1:
        raise ValueError("empty multi-index")
    kernel = _admissible(kernel)
    pts = None if centers is None else np.atleast_2d(np.asarray(getattr(centers, "points", centers), dtype=float))
    with_sum = pts is not None and pts.shape[1] == d + 1
    c = _as_triple(pts, d + 1 if with_sum else d)

    def attempt(b):
        net = Net(c.points)
        xs = [net.input(j) for j in range(d)]
        S = net.input(d) if with_sum else net.zero()
        xs, S_new = _addition_steps(net, xs, S, n, alpha, b)
        if margin(S_new.centers) < MARGIN and b != 0:
            raise CenterCollapseError("running sum collapses on the centers")
        return net, xs, S_new

    (net, xs, S_new), b = _pick_beta(attempt, beta)
    if net.generation == 0:
        vals = net.carry(list(xs) + [S_new])
        xs, S_new = vals[:d], vals[d]
    return _finish(net.program(list(xs) + [S_new]), c.points, kernel, sigma, beta=b, notes=net.notes)


def adjust_depth(fragment: SdknModel, target_L: int, sigma=None, kernel=None) -> SdknModel:
    """Pad ``fragment`` with identity stages until it has depth ``target_L``."""
    L = fragment.depth
    if target_L < L:
        raise ValueError(f"target depth {target_L} is below the current depth {L}")
    if target_L == L:
        return fragment
    if sigma is None:
        sigma = getattr(fragment, "sigma", DEFAULT_SIGMA)
    if kernel is None:
        kernel = getattr(fragment, "kernel", None)
        if kernel is None:
            acts = [ly for ly in fragment.layers if isinstance(ly, ActivationLayer)]
            kernel = acts[-1].kernels[0] if acts else DEFAULT_KERNEL
    kernel = _admissible(kernel)
    Z = fragment.centers
    _, trace = forward(fragment, Z)
    targets = getattr(fragment, "center_targets", None)
    if targets is None:
        targets = trace.output
    W_out = fragment.layers[-1].weights
    h_float = trace.batch(len(fragment.layers) - 1)
    k = W_out.shape[0]
    stages = [Stage(W_out.copy(), ["id"] * k)] + [Stage(np.eye(k), ["id"] * k) for _ in range(target_L - L - 1)]
    out = extend(
        fragment.layers[:-1], Z, h_float, None, stages, np.eye(k), kernel, sigma, first_inputs=np.asarray(targets)
    )
    out.notes = list(getattr(fragment, "notes", [])) + [f"padded by {target_L - L} identity stages"]
    out.beta = getattr(fragment, "beta", None)
    return out


# ---------------------------------------------------------------------------
# polynomials


class PolynomialSpecError(ValueError):
    pass


def _box_arrays(box, d):
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        arr = np.tile(arr, (d, 1))
    if arr.shape != (d, 2):
        raise ValueError(f"box must be (lo, hi) or {d} such pairs")
    return arr[:, 0], arr[:, 1]


@dataclass
class PolynomialSpec:
    """Sparse polynomial: multi-index -> coefficient, on a box in the nonnegative orthant."""

    terms: dict
    dim: int
    box: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dim < 1:
            raise PolynomialSpecError("dimension must be at least 1")
        clean = {}
        for idx, coeff in self.terms.items():
            idx = tuple(int(v) for v in idx)
            if len(idx) != self.dim or any(v < 0 for v in idx):
                raise PolynomialSpecError(f"bad multi-index {idx}")
            if not math.isfinite(coeff):
                raise PolynomialSpecError(f"non-finite coefficient for {idx}")
            clean[idx] = clean.get(idx, 0.0) + float(coeff)
        self.terms = clean
        if self.box is None:
            self.box = np.tile([0.0, 1.0], (self.dim, 1))
        lo, hi = _box_arrays(self.box, self.dim)
        if np.any(lo < 0) or np.any(hi <= lo) or not np.all(np.isfinite(hi)):
            raise PolynomialSpecError("box must be compact with nonnegative coordinates")
        self.box = np.column_stack([lo, hi])

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        for idx, coeff in self.terms.items():
            out += coeff * np.prod(X ** np.asarray(idx, dtype=float), axis=1)
        return out


def parse_polynomial_spec(text: str, box=None, dim=None) -> PolynomialSpec:
    """Parse lines ``coeff : n1 n2 ... nd``; ``#`` starts a comment."""
    terms: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise PolynomialSpecError(f"line {lineno}: expected 'coeff : n1 ... nd'")
        lhs, rhs = line.split(":", 1)
        try:
            coeff = float(lhs)
            idx = tuple(int(t) for t in rhs.split())
        except ValueError as exc:
            raise PolynomialSpecError(f"line {lineno}: {exc}") from None
        if not idx:
            raise PolynomialSpecError(f"line {lineno}: missing exponents")
        if dim is None:
            dim = len(idx)
        elif len(idx) != dim:
            raise PolynomialSpecError(f"line {lineno}: expected {dim} exponents, got {len(idx)}")
        if any(v < 0 for v in idx):
            raise PolynomialSpecError(f"line {lineno}: negative exponent")
        terms[idx] = terms.get(idx, 0.0) + coeff
    if dim is None:
        dim = 1 if box is None else len(_box_arrays(box, np.atleast_2d(box).shape[0])[0])
    return PolynomialSpec(terms, dim, box)


def compile_polynomial(spec: PolynomialSpec, centers=None, sigma=DEFAULT_SIGMA, kernel=DEFAULT_KERNEL) -> Fragment:
    """Stack one addition module per term; the beta carries telescope away.

    Width stays within ``d + 8`` and the model keeps three centers.
    """
    d = spec.dim
    c = CenterTriple.default(d, spec.box) if centers is None else _as_triple(centers, d)
    terms = [(idx, a) for idx, a in spec.terms.items() if a != 0.0]
    if not terms:
        out = np.zeros((1, d))
        return Fragment([LinearLayer(out)], c.points, sigma=sigma, kernel=kernel, center_targets=np.zeros((3, 1)))
    kernel = _admissible(kernel)
    net = Net(c.points)
    xs = [net.input(j) for j in range(d)]
    S = net.zero()
    betas = []
    for t, (idx, a) in enumerate(terms):
        last = t == len(terms) - 1
        cp = net.checkpoint()

        def attempt(b, xs=xs, S=S, idx=idx, a=a, last=last, cp=cp):
            net.restore(cp)
            xs2, S2 = _addition_steps(net, xs, S, idx, a, b)
            if not last and margin(S2.centers) < MARGIN:
                raise CenterCollapseError("running sum collapses on the centers")
            return xs2, S2

        (xs_new, S_new), b = _pick_beta(attempt, None)
        betas.append(b)
        xs, S = xs_new, S_new
    if net.generation == 0:
        vals = net.carry(list(xs) + [S])
        xs, S = vals[:d], vals[d]
    result = S - sum(betas) * xs[-1]
    frag = _finish(net.program([result]), c.points, kernel, sigma, notes=net.notes)
    frag.beta = betas[0] if len(set(betas)) == 1 else None
    frag.notes.append("betas " + " ".join(f"{b:.6g}" for b in betas))
    return frag


# ---------------------------------------------------------------------------
# grid errors


def grid(box, points_per_dim: int) -> np.ndarray:
    box = np.atleast_2d(np.asarray(box, dtype=float))
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def sup_error(model: SdknModel, target, box, points_per_dim: int, output: int = 0) -> float:
    """Max deviation of output ``output`` from ``target`` on a tensor grid."""
    X = grid(box, points_per_dim)
    pred, _ = forward(model, X)
    return float(np.max(np.abs(pred[:, output] - np.asarray(target(X), dtype=float).ravel())))


def refine_sigma(build, error, sigma0: float = DEFAULT_SIGMA, max_halvings: int = 6, rtol: float = 0.05):
    """Halve sigma while the grid error keeps improving by more than ``rtol``.

    ``build(sigma)`` returns a model and ``error(model)`` its grid error.
    Returns ``(best_model, best_sigma, history)`` with history a list of
    ``(sigma, error)`` pairs.
    """
    sigma = sigma0
    model = build(sigma)
    err = error(model)
    best = (model, sigma, err)
    history = [(sigma, err)]
    for _ in range(max_halvings):
        sigma /= 2
        model = build(sigma)
        err = error(model)
        history.append((sigma, err))
        if err < best[2] * (1 - rtol):
            best = (model, sigma, err)
        else:
            break
    return best[0], best[1], history


def propagated_center_margins(model: SdknModel) -> list:
    """Smallest per-coordinate margin of the propagated centers at every activation input."""
    _, trace = forward(model, model.centers)
    out = []
    for pos, layer in enumerate(model.layers):
        if isinstance(layer, ActivationLayer):
            Zp = trace.batch(pos)
            out.append(min(margin(Zp[:, j]) for j in range(Zp.shape[1])))
    return out
