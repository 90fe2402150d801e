import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import random_model, worst_gradient_mismatch
from sdkn.kernels import Kernel1D, KernelFamily
from sdkn.network import (
    ActivationLayer,
    LinearLayer,
    NotRealizableError,
    SdknModel,
    activation_forward,
    backward,
    deep_kernel_eval,
    features,
    forward,
    init_model,
    linear_from_center_coefficients,
    realize_linear_from_centers,
)
from sdkn.serialize import ModelFormatError, dumps, loads, load_model, save_model

G = Kernel1D(KernelFamily.GAUSSIAN, 1.0)


def naive_activation(alpha, kernels, X, Z):
    out = np.zeros((X.shape[0], X.shape[1]))
    for n in range(X.shape[0]):
        for j in range(X.shape[1]):
            out[n, j] = sum(alpha[i, j] * kernels[j](X[n, j], Z[i, j]) for i in range(Z.shape[0]))
    return out


def stepwise(model, x):
    h = np.asarray(x, dtype=float)
    z = model.centers.copy()
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            h, z = h @ layer.weights.T, z @ layer.weights.T
        else:
            h, z = naive_activation(layer.coefficients, layer.kernels, h, z), naive_activation(
                layer.coefficients, layer.kernels, z, z
            )
    return h


class TestActivationForward:
    def test_zero_coefficients(self):
        layer = ActivationLayer(np.zeros((3, 2)), G)
        assert not activation_forward(layer, np.ones((4, 2)), np.zeros((3, 2))).any()

    def test_single_center(self):
        layer = ActivationLayer(np.ones((1, 1)), G)
        assert activation_forward(layer, np.zeros((1, 1)), np.zeros((1, 1)))[0, 0] == 1.0

    def test_matches_double_sum(self):
        rng = np.random.default_rng(0)
        kernels = (G, Kernel1D(KernelFamily.MATERN_QUADRATIC, 0.6))
        layer = ActivationLayer(rng.normal(size=(3, 2)), kernels)
        X, Z = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(activation_forward(layer, X, Z), naive_activation(layer.coefficients, kernels, X, Z), rtol=1e-12)

    def test_shape_mismatch(self):
        layer = ActivationLayer(np.ones((3, 2)), G)
        with pytest.raises(ValueError):
            activation_forward(layer, np.ones((4, 3)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            activation_forward(layer, np.ones((4, 2)), np.zeros((2, 2)))

    def test_rejects_linear_kernel(self):
        with pytest.raises(ValueError):
            ActivationLayer(np.ones((2, 1)), Kernel1D(KernelFamily.LINEAR))


class TestForward:
    def test_single_linear_layer_is_matmul(self):
        A = np.array([[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]])
        model = SdknModel([LinearLayer(A)], np.zeros((1, 2)))
        X = np.array([[1.0, 1.0], [2.0, -1.0]])
        np.testing.assert_array_equal(forward(model, X)[0], X @ A.T)

    def test_centers_reproduce_trace(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(size=(4, 2))
        model = init_model(2, [3, 3], 1, Z, G, 2)
        _, trace = forward(model, Z)
        for l in range(len(model.layers) + 1):
            np.testing.assert_allclose(trace.batch(l), trace.centers(l), rtol=1e-13, atol=1e-14)

    def test_depth_two_matches_stepwise(self):
        rng = np.random.default_rng(4)
        model = init_model(2, [3, 4], 2, rng.normal(size=(5, 2)), G, 5)
        X = rng.normal(size=(6, 2))
        np.testing.assert_allclose(forward(model, X)[0], stepwise(model, X), rtol=1e-11, atol=1e-13)

    def test_dimension_mismatch(self):
        model = init_model(2, [3], 1, np.zeros((2, 2)), G, 0)
        with pytest.raises(ValueError):
            forward(model, np.zeros((3, 3)))

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        model = init_model(1, [4, 4], 1, rng.normal(size=(5, 1)), G, 1)
        X = rng.normal(size=(7, 1))
        assert forward(model, X)[0].tobytes() == forward(model, X)[0].tobytes()


class TestModelStructure:
    def test_dims_width_depth(self):
        model = init_model(3, [5, 2], 4, np.zeros((6, 3)), G, 0)
        assert model.dims == [3, 5, 5, 2, 2, 4]
        assert model.depth == 2 and model.width == 5 and model.num_centers == 6

    def test_validate_rejects_bad_chains(self):
        with pytest.raises(ValueError):
            SdknModel([LinearLayer(np.ones((2, 1))), ActivationLayer(np.ones((3, 2)), G)], np.zeros((3, 1))).validate()
        with pytest.raises(ValueError):
            SdknModel(
                [LinearLayer(np.ones((2, 1))), ActivationLayer(np.ones((2, 2)), G), LinearLayer(np.ones((1, 2)))],
                np.zeros((3, 1)),
            ).validate()
        with pytest.raises(ValueError):
            SdknModel([LinearLayer(np.full((1, 1), np.nan))], np.zeros((1, 1))).validate()

    def test_init_ranges(self):
        model = init_model(4, [50], 1, np.zeros((400, 4)), G, 3)
        W, A = model.layers[0].weights, model.layers[1].coefficients
        assert np.abs(W).max() <= 0.5
        assert A.std() == pytest.approx(1 / 20, rel=0.1)

    def test_zero_coefficient_centers_do_not_change_outputs(self):
        rng = np.random.default_rng(9)
        model = init_model(2, [3, 3], 1, rng.normal(size=(4, 2)), G, 4)
        extra = rng.normal(size=(3, 2))
        layers = []
        for layer in model.layers:
            if isinstance(layer, ActivationLayer):
                layer = ActivationLayer(np.vstack([layer.coefficients, np.zeros((3, layer.d_in))]), layer.kernels)
            layers.append(layer)
        bigger = SdknModel(layers, np.vstack([model.centers, extra])).validate()
        X = rng.normal(size=(5, 2))
        np.testing.assert_allclose(forward(bigger, X)[0], forward(model, X)[0], rtol=1e-13, atol=1e-15)


class TestDeepKernel:
    def test_linear_only_model_gives_base_kernel(self):
        model = SdknModel([LinearLayer(np.eye(2))], np.zeros((1, 2)))
        x, y = np.array([0.3, -0.2]), np.array([1.0, 0.4])
        assert deep_kernel_eval(model, G, x, y) == pytest.approx(np.exp(-np.sum((x - y) ** 2)), rel=1e-14)

    def test_symmetric_and_matches_features(self):
        rng = np.random.default_rng(12)
        model = init_model(2, [3, 3], 1, rng.normal(size=(4, 2)), G, 6)
        outer = Kernel1D(KernelFamily.MATERN_QUADRATIC, 0.8)
        x, y = rng.normal(size=2), rng.normal(size=2)
        assert deep_kernel_eval(model, outer, x, y) == deep_kernel_eval(model, outer, y, x)
        F = stepwise(SdknModel(model.layers[:-1], model.centers), np.vstack([x, y]))
        expected = outer.profile(0.8 * np.linalg.norm(F[0] - F[1]))
        assert deep_kernel_eval(model, outer, x, y) == pytest.approx(expected, rel=1e-11)

    def test_features_drop_the_readout(self):
        model = init_model(1, [4], 2, np.zeros((2, 1)), G, 0)
        assert features(model, np.zeros((3, 1))).shape == (3, 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 7))
    def test_gram_is_psd(self, seed, n):
        rng = np.random.default_rng(seed)
        model = init_model(2, [3, 2], 1, rng.normal(size=(3, 2)), G, rng)
        X = rng.normal(size=(n, 2))
        K = np.array([[deep_kernel_eval(model, G, a, b) for b in X] for a in X])
        lam = np.linalg.eigvalsh(K)
        assert lam.min() >= -1e-10 * max(lam.max(), 1.0)


class TestBackward:
    def test_zero_cotangent(self):
        rng = np.random.default_rng(2)
        model = init_model(2, [3, 3], 1, rng.normal(size=(4, 2)), G, 1)
        _, trace = forward(model, rng.normal(size=(5, 2)))
        assert all(not g.any() for g in backward(model, trace, np.zeros((5, 1))))

    def test_linear_least_squares_closed_form(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(2, 3))
        X, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        model = SdknModel([LinearLayer(A)], np.zeros((1, 3)))
        pred, trace = forward(model, X)
        (g,) = backward(model, trace, 2.0 * (pred - Y) / 10)
        np.testing.assert_allclose(g, (2 / 10) * (A @ X.T - Y.T) @ X, rtol=1e-12)

    def test_stale_trace(self):
        rng = np.random.default_rng(3)
        model = init_model(2, [3], 1, rng.normal(size=(4, 2)), G, 1)
        _, trace = forward(model, rng.normal(size=(5, 2)))
        with pytest.raises(ValueError):
            backward(model, trace, np.zeros((4, 1)))
        other = init_model(2, [4], 1, rng.normal(size=(4, 2)), G, 1)
        with pytest.raises(ValueError):
            backward(other, trace, np.zeros((5, 1)))

    def test_depth_two_finite_differences(self):
        rng = np.random.default_rng(7)
        model = init_model(2, [3, 3], 1, rng.normal(size=(4, 2)), G, rng)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
        n_bad, _ = worst_gradient_mismatch(model, X, Y)
        assert n_bad == 0

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_models_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng)
        X = rng.normal(size=(4, model.d_in))
        Y = rng.normal(size=(4, model.d_out))
        n_bad, worst = worst_gradient_mismatch(model, X, Y)
        assert n_bad == 0, worst


class TestRealizeLinear:
    def test_standard_basis(self):
        A = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        C = realize_linear_from_centers(A, np.eye(3))
        np.testing.assert_allclose(C, A.T, atol=1e-14)

    def test_orthogonal_row_rejected_with_residual(self):
        with pytest.raises(NotRealizableError) as info:
            realize_linear_from_centers([[0.0, 1.0]], [[1.0, 0.0]])
        assert info.value.residual == pytest.approx(1.0)

    def test_vanishing_map_on_data_needs_no_coefficients(self):
        # features g(x) = (x, 2x, x^2); the map 2 g1 - g2 vanishes on every feature vector
        x = np.linspace(-1, 1, 7)
        Z = np.column_stack([x, 2 * x, x**2])[:3]
        data = np.column_stack([x, 2 * x, x**2])
        C = realize_linear_from_centers([[2.0, -1.0, 0.0]], Z, data=data)
        np.testing.assert_allclose(C, 0.0, atol=1e-14)
        with pytest.raises(NotRealizableError):
            realize_linear_from_centers([[2.0, -1.0, 0.0]], Z[:1])

    def test_round_trip_random(self):
        rng = np.random.default_rng(5)
        A, Z = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
        C = realize_linear_from_centers(A, Z)
        np.testing.assert_allclose(linear_from_center_coefficients(C, Z), A, rtol=1e-10, atol=1e-12)
        x = rng.normal(size=4)
        center_sum = sum(C[i] * (x @ Z[i]) for i in range(6))
        np.testing.assert_allclose(center_sum, A @ x, rtol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            realize_linear_from_centers(np.ones((1, 3)), np.ones((2, 2)))


class TestSerialization:
    def test_round_trip_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        kernels = [Kernel1D(KernelFamily.MATERN_QUADRATIC, 0.3), G]
        model = init_model(2, [3, 2], 2, rng.normal(size=(4, 2)), kernels, 7)
        path = tmp_path / "m.txt"
        save_model(model, path)
        back = load_model(path)
        for a, b in zip(model.parameters(), back.parameters()):
            assert a.tobytes() == b.tobytes()
        assert back.centers.tobytes() == model.centers.tobytes()
        assert [ly.kernels for ly in back.layers[1::2]] == [ly.kernels for ly in model.layers[1::2]]

    def test_header_checks(self):
        text = dumps(init_model(1, [2], 1, np.zeros((2, 1)), G, 0))
        with pytest.raises(ModelFormatError):
            loads(text.replace("sdkn-model 1", "sdkn-model 9"))
        with pytest.raises(ModelFormatError):
            loads(text.replace("dims 1 2 2 1", "dims 1 3 3 1"))
        with pytest.raises(ModelFormatError):
            loads("\n".join(text.splitlines()[:-3]))
