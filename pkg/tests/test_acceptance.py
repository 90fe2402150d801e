"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or directly as a script.
"""

import math
import sys
import time

import numpy as np

from _util import random_model, report, worst_gradient_mismatch
from sdkn.constructions import (
    MARGIN,
    build_addition_module,
    build_product_module,
    build_univariate_monomial,
    compile_polynomial,
    decompose_symmetric,
    parse_polynomial_spec,
    propagated_center_margins,
    sup_error,
)
from sdkn.kernels import Kernel1D, KernelFamily, flat_limit_interpolant, single_dim_gram, taylor_admissibility
from sdkn.network import (
    LinearLayer,
    NotRealizableError,
    SdknModel,
    init_model,
    linear_from_center_coefficients,
    realize_linear_from_centers,
)
from sdkn.serialize import dumps
from sdkn.training import Dataset, TrainConfig, select_centers, train

GAUSS = Kernel1D(KernelFamily.GAUSSIAN, 1.0)


def test_criterion_1_two_point_spectrum():
    t0 = time.perf_counter()
    k = Kernel1D(KernelFamily.WENDLAND0, 1.0)
    X = [(1.0, -0.2), (1.0, -0.9)]
    lam = np.sort(np.linalg.eigvalsh(single_dim_gram([k, k], X, X)))
    dev = float(np.abs(lam - [0.0, 0.7, 1.3, 2.0]).max())
    dt = time.perf_counter() - t0
    report(1, dev < 1e-12 and dt < 1, f"eigenvalues {np.round(lam, 12).tolist()}, max deviation {dev:.1e}, {dt:.2f}s")


def test_criterion_2_flat_limit():
    t0 = time.perf_counter()
    x = np.linspace(0, 1, 1000)
    errs = []
    for eps in (1.0, 1e-1, 1e-2, 1e-3):
        s = flat_limit_interpolant(GAUSS, [0.0, 0.5, 1.0], [0.0, 0.25, 1.0], eps)
        errs.append(float(np.max(np.abs(s(x) - x**2))))
    dt = time.perf_counter() - t0
    ok = errs[-1] < 1e-3 and all(a > b for a, b in zip(errs, errs[1:])) and dt < 1
    report(2, ok, "sup errors " + ", ".join(f"{e:.3e}" for e in errs) + f", {dt:.2f}s")


def test_criterion_3_admissibility():
    g = taylor_admissibility(GAUSS)
    m0 = taylor_admissibility(Kernel1D(KernelFamily.MATERN0, 1.0))
    w0 = taylor_admissibility(Kernel1D(KernelFamily.WENDLAND0, 1.0))
    disc = 6 * g.a0 * g.a2 - g.a1**2
    ok = (
        g.admissible_n2
        and g.admissible_n3
        and abs(disc - 2) < 1e-9
        and not (m0.admissible_n2 or m0.admissible_n3)
        and not (w0.admissible_n2 or w0.admissible_n3)
    )
    report(3, ok, f"gaussian 6a0a2-a1^2={disc:.12g}; matern0 and wendland0 flagged")


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad, worst, n_params = 0, 0.0, 0
    for _ in range(20):
        model = random_model(rng, max_width=5, max_centers=4)
        assert model.depth <= 3 and model.width <= 5 and model.num_centers <= 4
        X = rng.normal(size=(5, model.d_in))
        Y = rng.normal(size=(5, model.d_out))
        b, w = worst_gradient_mismatch(model, X, Y, rtol=1e-5, atol=1e-7)
        bad += b
        worst = max(worst, w)
        n_params += sum(p.size for p in model.parameters())
    dt = time.perf_counter() - t0
    report(4, bad == 0 and dt < 30, f"{n_params} entries over 20 models, {bad} mismatches, worst error/tolerance {worst:.2f}, {dt:.1f}s")


def _construction_suite():
    product = build_product_module(sigma=1e-3)
    e_prod = sup_error(product, lambda X: X[:, 0] * X[:, 1], [(0, 1), (0, 1)], 50)
    mono = build_univariate_monomial(11, sigma=1e-3)
    e_mono = sup_error(mono, lambda X: X[:, 0] ** 11, [(0, 1)], 100)

    rng = np.random.default_rng(5)
    additions, depth_ok = [], True
    for _ in range(12):
        d = int(rng.integers(1, 4))
        n = [int(v) for v in rng.integers(0, 9, size=d)]
        if not any(n):
            n[-1] = 1
        f = build_addition_module(n, alpha=float(rng.uniform(0.5, 2.0)))
        depth_ok &= f.depth <= d * math.ceil(math.log2(max(n) + 1))
        additions.append(f)

    sq = parse_polynomial_spec("1 : 2")
    mixed = parse_polynomial_spec("1 : 1 1\n1 : 2 0")
    sigmas = (2e-3, 1e-3, 5e-4)
    sq_models = [compile_polynomial(sq, sigma=s) for s in sigmas]
    mixed_models = [compile_polynomial(mixed, sigma=s) for s in sigmas]
    e_sq = [sup_error(m, sq, [(0, 1)], 1000) for m in sq_models]
    e_mixed = [sup_error(m, mixed, [(0, 1), (0, 1)], 50) for m in mixed_models]
    models = [product, mono] + additions + sq_models + mixed_models
    return e_prod, mono.depth, e_mono, depth_ok, e_sq, e_mixed, models


_SUITE = {}


def _suite():
    if not _SUITE:
        t0 = time.perf_counter()
        _SUITE["result"] = _construction_suite()
        _SUITE["seconds"] = time.perf_counter() - t0
    return _SUITE["result"], _SUITE["seconds"]


def test_criterion_5_constructions():
    (e_prod, depth11, e_mono, depth_ok, e_sq, e_mixed, _), dt = _suite()
    decreasing = all(a > b for a, b in zip(e_sq, e_sq[1:])) and all(a > b for a, b in zip(e_mixed, e_mixed[1:]))
    ok = (
        e_prod < 1e-4
        and depth11 == 4
        and e_mono < 1e-4
        and depth_ok
        and e_sq[1] < 1e-3
        and e_mixed[1] < 1e-2
        and decreasing
        and dt < 60
    )
    detail = (
        f"product {e_prod:.1e}; x^11 depth {depth11} error {e_mono:.1e}; addition depths within bound: {depth_ok}; "
        f"x^2 {' > '.join(f'{e:.1e}' for e in e_sq)}; xy+x^2 {' > '.join(f'{e:.1e}' for e in e_mixed)}; {dt:.1f}s"
    )
    report(5, ok, detail)


def test_criterion_6_center_preservation():
    (*_, models), _ = _suite()
    worst = min(min(propagated_center_margins(m)) for m in models)
    report(6, worst >= MARGIN, f"{len(models)} modules, smallest relative center margin {worst:.3e}")


def test_criterion_7_symmetric_decomposition():
    t0 = time.perf_counter()
    h = lambda x: np.sin(3 * x)  # noqa: E731
    xs = np.linspace(0, 1, 1000)
    s1, s2 = decompose_symmetric(h, 0.3, 0.5, xs)
    recon = float(np.abs(s1 + s2 - h(xs)).max())
    # grid with 0.3 and 0.5 on it so reflected pairs are grid pairs
    ys = np.linspace(0, 1, 1001)
    t1, t2 = decompose_symmetric(h, 0.3, 0.5, ys)
    sym = 0.0
    for centre, vals in ((300, t1), (500, t2)):
        k = np.arange(1, min(centre, 1000 - centre) + 1)
        sym = max(sym, float(np.abs(vals[centre + k] - vals[centre - k]).max()))
    dt = time.perf_counter() - t0
    report(7, recon < 1e-12 and sym < 1e-12 and dt < 1, f"reconstruction {recon:.1e}, symmetry {sym:.1e}, {dt:.2f}s")


def test_criterion_8_training():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(2, 3))
    X = rng.normal(size=(64, 3))
    lin = SdknModel([LinearLayer(np.zeros((2, 3)))], np.zeros((1, 3)))
    rate = 1.0 / np.linalg.eigvalsh(2 * X.T @ X / 64).max()
    _, hist = train(lin, Dataset(X, X @ A.T), TrainConfig(optimizer="sgd", learning_rate=rate, epochs=500, num_centers=1))
    lin_mse = hist[-1]["loss"]

    x = np.linspace(0, 1, 256)
    data = Dataset(x[:, None], np.sin(2 * np.pi * x))
    cfg = TrainConfig(epochs=500, learning_rate=1e-2, num_centers=16, center_rule="random", seed=0)
    runs = []
    t0 = time.perf_counter()
    for _ in range(2):
        model = init_model(1, [8, 8], 1, select_centers(data, cfg), GAUSS, cfg.seed)
        model, h = train(model, data, cfg)
        runs.append((h, dumps(model)))
    dt = (time.perf_counter() - t0) / 2
    sin_mse = runs[0][0][-1]["loss"]
    same = runs[0] == runs[1]
    ok = lin_mse < 1e-8 and sin_mse < 1e-3 and dt < 60 and same
    report(8, ok, f"linear mse {lin_mse:.1e}; sin mse {sin_mse:.1e} in {dt:.1f}s; identical reruns: {same}")


def test_criterion_9_linear_realization():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(10):
        A, Z = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
        C = realize_linear_from_centers(A, Z)
        worst = max(worst, float(np.abs(linear_from_center_coefficients(C, Z) - A).max()))
    try:
        realize_linear_from_centers([[0.0, 1.0]], [[1.0, 0.0]])
        residual = None
    except NotRealizableError as exc:
        residual = exc.residual
    ok = worst < 1e-10 and residual is not None and abs(residual - 1.0) < 1e-12
    report(9, ok, f"round trip {worst:.1e}; out-of-span residual {residual}")


if __name__ == "__main__":
    import pytest

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
