"""Graph-reasoning layer: embedding, attention, similarity and Laplacian paths."""

from dataclasses import replace

import numpy as np
import pytest

from spygr.core import ops
from spygr.core.errors import ConfigError, NonFiniteError, OracleSizeError, ShapeError
from spygr.core.layer import (
    AttentionMode,
    LaplacianPath,
    SimilarityFactors,
    SpyGRParams,
    apply_laplacian,
    apply_laplacian_factored,
    apply_laplacian_naive,
    build_factors,
    channel_attention,
    degrees_factored,
    embed_phi,
    graph_reason,
    load_params,
    materialize_similarity,
    project_static_lambda,
    save_params,
    similarity_row,
    simplest_gcn,
)
from spygr.core.tensor import Tensor


def _rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def _factors(phi, lam=None, epsilon=1e-6, h=None, w=None):
    phi_t = Tensor(phi)
    n, m = phi.shape
    lam_t = Tensor(np.ones(m) if lam is None else lam)
    degrees = degrees_factored(SimilarityFactors(phi_t, lam_t, Tensor.zeros(n), epsilon, h or n, w or 1))
    return SimilarityFactors(phi_t, lam_t, degrees, epsilon, h or n, w or 1)


def _positive_params(rng, c, m, mode=AttentionMode.DYNAMIC, epsilon=0.0):
    params = SpyGRParams.init(c, m, attention_mode=mode, epsilon=epsilon, rng=rng)
    return replace(params, w_phi=Tensor(np.abs(params.w_phi.data) + 0.05))


class TestParams:
    def test_static_lambda_starts_at_ones(self, rng):
        params = SpyGRParams.init(4, 3, attention_mode=AttentionMode.STATIC, rng=rng)
        np.testing.assert_array_equal(params.static_lambda.data, 1.0)
        assert params.w_rho is None

    def test_dynamic_requires_w_rho(self, make_params):
        params = make_params(c=4, m=2)
        with pytest.raises(ConfigError):
            replace(params, w_rho=None)

    def test_static_lambda_only_in_static_mode(self, make_params):
        params = make_params(c=4, m=2, mode=AttentionMode.NONE)
        with pytest.raises(ConfigError):
            replace(params, static_lambda=Tensor.ones(2))

    def test_negative_epsilon_rejected(self, make_params):
        with pytest.raises(ConfigError):
            make_params(epsilon=-1.0)

    def test_projection_clamps_static_lambda(self, rng):
        params = SpyGRParams.init(3, 3, attention_mode=AttentionMode.STATIC, rng=rng)
        params = replace(params, static_lambda=Tensor([-1.0, 0.0, 2.0]))
        projected = project_static_lambda(params)
        np.testing.assert_array_equal(projected.static_lambda.data, [1e-4, 1e-4, 2.0])


class TestEmbedding:
    def test_zero_input_gives_zero_phi(self):
        phi = embed_phi(Tensor.zeros((1, 3, 2, 2)), Tensor(np.ones((3, 2))))
        np.testing.assert_array_equal(phi.data, 0.0)

    def test_relu_clamps(self):
        phi = embed_phi(Tensor.full((1, 1, 1, 1), 2.0), Tensor([[-1.0]]))
        assert phi.data[0, 0] == 0.0

    def test_per_pixel_oracle(self, rng):
        x, w = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((4, 5))
        phi = embed_phi(Tensor(x), Tensor(w)).data
        for r in range(3):
            for c in range(3):
                np.testing.assert_allclose(phi[r * 3 + c], np.maximum(x[0, :, r, c] @ w, 0), rtol=1e-12)

    def test_batch_input_rejected(self, rng):
        with pytest.raises(ShapeError):
            embed_phi(Tensor(rng.standard_normal((2, 3, 2, 2))), Tensor(np.ones((3, 2))))


class TestAttention:
    def test_zero_weights_give_half(self, random_x):
        lam = channel_attention(random_x(c=4), Tensor.zeros((4, 3)))
        np.testing.assert_array_equal(lam.data, 0.5)

    def test_explicit_oracle(self, rng, random_x):
        x = random_x(c=5, h=4, w=3)
        w = rng.standard_normal((5, 3))
        expected = 1.0 / (1.0 + np.exp(-(x.data[0].mean(axis=(1, 2)) @ w)))
        assert _rel(channel_attention(x, Tensor(w)).data, expected) < 1e-12

    def test_constant_channels_pool_exactly(self):
        x = Tensor(np.broadcast_to(np.array([0.3, -1.2])[None, :, None, None], (1, 2, 5, 4)))
        pooled = ops.global_avg_pool(x).data.ravel()
        np.testing.assert_array_equal(pooled, [0.3, -1.2])


class TestSimilarity:
    def test_identical_rows_give_constant(self):
        p = np.array([0.5, 1.0, 2.0])
        lam = np.array([1.0, 0.5, 0.25])
        factors = _factors(np.tile(p, (6, 1)), lam)
        a = materialize_similarity(factors).data
        np.testing.assert_allclose(a, p @ (lam * p), rtol=1e-14)
        np.testing.assert_allclose(factors.degrees.data, 6 * (p @ (lam * p)), rtol=1e-12)

    def test_unit_lambda_is_gram_matrix(self, rng):
        phi = rng.uniform(0, 1, (9, 3))
        a = materialize_similarity(_factors(phi)).data
        np.testing.assert_allclose(a, phi @ phi.T, rtol=1e-13)

    def test_symmetric_and_nonnegative_diagonal(self, rng):
        phi = rng.uniform(0, 1, (9, 4))
        a = materialize_similarity(_factors(phi, rng.uniform(0.1, 2.0, 4))).data
        np.testing.assert_array_equal(a, a.T)
        assert np.all(np.diag(a) >= 0)

    def test_zero_row_gives_zero_degree(self, rng):
        phi = rng.uniform(0, 1, (5, 2))
        phi[2] = 0.0
        assert _factors(phi).degrees.data[2] == 0.0

    def test_degrees_match_row_sums(self, rng, random_x, make_params):
        factors = build_factors(random_x(c=6, h=5, w=4), make_params(c=6, m=3))
        row_sums = materialize_similarity(factors).data.sum(axis=1)
        assert _rel(degrees_factored(factors).data, row_sums) < 1e-12

    def test_similarity_row_matches_dense(self, random_x, make_params):
        factors = build_factors(random_x(c=6, h=4, w=4), make_params(c=6, m=3))
        dense = materialize_similarity(factors).data
        np.testing.assert_allclose(similarity_row(factors, 5), dense[5], rtol=1e-12, atol=1e-14)

    def test_oracle_cap_refuses(self, random_x, make_params):
        factors = build_factors(random_x(c=4, h=5, w=5), make_params(c=4, m=2))
        with pytest.raises(OracleSizeError) as excinfo:
            materialize_similarity(factors, oracle_cap=24)
        assert excinfo.value.n == 25
        assert "oracle cap 24" in str(excinfo.value)


class TestLaplacian:
    def test_constant_field_annihilated(self, rng):
        params = _positive_params(rng, 3, 4)
        x = Tensor(np.broadcast_to(np.array([0.7, 1.1, 0.4])[None, :, None, None], (1, 3, 5, 5)))
        factors = build_factors(x, params)
        for path in LaplacianPath:
            out = apply_laplacian(x, factors, True, path)
            assert np.max(np.abs(out.data)) < 1e-12

    def test_null_vector(self, rng):
        params = _positive_params(rng, 4, 3)
        x = Tensor(rng.uniform(0.1, 1.0, (1, 4, 6, 5)))
        factors = build_factors(x, params)
        v = Tensor(np.sqrt(factors.degrees.data).reshape(1, 1, 6, 5))
        for path in LaplacianPath:
            assert np.max(np.abs(apply_laplacian(v, factors, True, path).data)) < 1e-8

    @pytest.mark.parametrize("mode", list(AttentionMode))
    @pytest.mark.parametrize("include_identity", [True, False])
    def test_factored_matches_naive(self, random_x, make_params, mode, include_identity):
        x = random_x(c=8, h=7, w=7)
        params = make_params(c=8, m=4, mode=mode)
        factors = build_factors(x, params)
        fast = apply_laplacian_factored(x, factors, include_identity).data
        slow = apply_laplacian_naive(x, factors, include_identity).data
        assert _rel(fast, slow) < 1e-10

    def test_naive_path_ignores_supplied_degrees(self, rng):
        phi = np.abs(rng.standard_normal((12, 3))) + 0.05
        x = Tensor(rng.standard_normal((1, 2, 3, 4)))
        good = _factors(phi, epsilon=0.0, h=3, w=4)
        bad = replace(good, degrees=Tensor(good.degrees.data * 3.0 + 1.0))
        expected = apply_laplacian_naive(x, good).data
        np.testing.assert_array_equal(apply_laplacian_naive(x, bad).data, expected)
        assert _rel(apply_laplacian_factored(x, bad).data, expected) > 1e-3

    def test_zero_similarity_keeps_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        factors = _factors(np.zeros((9, 2)), h=3, w=3)
        for path in LaplacianPath:
            np.testing.assert_array_equal(apply_laplacian(x, factors, True, path).data, x.data)

    def test_zero_degree_without_floor_is_non_finite(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        factors = _factors(np.zeros((9, 2)), epsilon=0.0, h=3, w=3)
        with pytest.raises(NonFiniteError):
            apply_laplacian(x, factors)

    def test_single_pixel_graph(self, rng):
        params = _positive_params(rng, 3, 2)
        x = Tensor(rng.uniform(0.1, 1.0, (1, 3, 1, 1)))
        factors = build_factors(x, params)
        for path in LaplacianPath:
            assert np.max(np.abs(apply_laplacian(x, factors, True, path).data)) < 1e-12

    def test_grid_mismatch(self, random_x, make_params):
        params = make_params(c=4, m=2)
        factors = build_factors(random_x(c=4, h=3, w=3), params)
        with pytest.raises(ShapeError):
            apply_laplacian(random_x(c=4, h=4, w=3), factors)


class TestGraphReason:
    def test_zero_theta(self, random_x, make_params):
        params = make_params(c=4, m=2)
        params = replace(params, theta=Tensor.zeros((4, 4)))
        np.testing.assert_array_equal(graph_reason(random_x(c=4), params).data, 0.0)

    def test_constant_input_gives_zero(self, rng):
        x = Tensor.full((1, 4, 6, 6), 0.8)
        for mode in AttentionMode:
            params = _positive_params(rng, 4, 3, mode=mode)
            assert np.max(np.abs(graph_reason(x, params).data)) < 1e-12

    def test_output_channels(self, random_x, make_params):
        y = graph_reason(random_x(c=4, h=5, w=6), make_params(c=4, m=2, c_out=7))
        assert y.shape == (1, 7, 5, 6)
        assert np.all(y.data >= 0)

    def test_batch_elements_independent(self, random_x, make_params):
        params = make_params(c=4, m=3)
        x = random_x(c=4, h=5, w=5, n=3)
        batched = graph_reason(x, params).data
        for b in range(3):
            single = graph_reason(Tensor(x.data[b:b + 1]), params).data
            np.testing.assert_array_equal(batched[b:b + 1], single)

    @pytest.mark.parametrize("mode", list(AttentionMode))
    def test_factored_matches_naive_pipeline(self, random_x, make_params, mode):
        x = random_x(c=6, h=6, w=5)
        params = make_params(c=6, m=4, mode=mode)
        fast = graph_reason(x, params).data
        slow = graph_reason(x, params, LaplacianPath.NAIVE).data
        assert _rel(fast, slow) < 1e-10

    def test_channel_mismatch(self, random_x, make_params):
        with pytest.raises(ShapeError):
            graph_reason(random_x(c=3), make_params(c=4))


class TestSimplestGCN:
    def test_requires_no_attention(self, random_x, make_params):
        with pytest.raises(ConfigError):
            simplest_gcn(random_x(c=4), make_params(c=4, mode=AttentionMode.DYNAMIC))

    def test_equals_unit_lambda_without_identity(self, rng, random_x):
        x = random_x(c=4, h=4, w=4)
        unit_static = SpyGRParams.init(4, 3, attention_mode=AttentionMode.STATIC, include_identity=False, rng=rng)
        plain = SpyGRParams(w_phi=unit_static.w_phi, theta=unit_static.theta,
                            attention_mode=AttentionMode.NONE, include_identity=True)
        forced = build_factors(x, unit_static)
        np.testing.assert_array_equal(forced.lam.data, 1.0)
        expected = graph_reason(x, unit_static).data
        np.testing.assert_allclose(simplest_gcn(x, plain).data, expected, rtol=1e-12, atol=1e-14)

    def test_constant_input_identity_theta(self):
        params = SpyGRParams(w_phi=Tensor.full((3, 2), 0.5), theta=Tensor(np.eye(3)),
                             attention_mode=AttentionMode.NONE, epsilon=0.0)
        values = np.array([0.5, -0.25, 2.0])
        x = Tensor(np.broadcast_to(values[None, :, None, None], (1, 3, 4, 4)))
        y = simplest_gcn(x, params).data
        np.testing.assert_allclose(y[0, :, 2, 1], np.maximum(values, 0), rtol=1e-10, atol=1e-12)

    def test_matches_naive(self, random_x, make_params):
        x = random_x(c=4, h=5, w=5)
        params = make_params(c=4, m=3, mode=AttentionMode.NONE)
        assert _rel(simplest_gcn(x, params).data, simplest_gcn(x, params, LaplacianPath.NAIVE).data) < 1e-10


class TestPersistence:
    def test_save_load(self, tmp_path, make_params):
        params = make_params(c=4, m=2, mode=AttentionMode.DYNAMIC)
        save_params(params, str(tmp_path))
        loaded = load_params(str(tmp_path))
        assert loaded.attention_mode is AttentionMode.DYNAMIC
        assert loaded.epsilon == params.epsilon
        for name, tensor in params.tensors().items():
            np.testing.assert_array_equal(loaded.tensors()[name].data, tensor.data)
