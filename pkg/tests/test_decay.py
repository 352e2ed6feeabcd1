import math

import numpy as np
import pytest

from leadlag.decay import (
    DecayParams,
    attention_dense,
    decay_weights,
    effective_dense,
    effective_graph,
    init_decay_params,
    input_attention,
    rates,
    rates_dense,
)
from leadlag.engine import DiffArray, Tape, grad_check, mean, mul
from leadlag.hierarchy import hierarchy_from_assignments
from leadlag.laggraph import build_initial_graph


def _graph(n=3, window=16, patch=4, seed=0, k=2):
    rng = np.random.default_rng(seed)
    series = rng.normal(size=(n, 8 * window))
    h = hierarchy_from_assignments(series, [], [patch], window)
    return build_initial_graph(h, k=k).scales[0], rng


def _params(graph, rng, d_e=4, d_a=3):
    return init_decay_params(rng, graph.n_groups, graph.patch_count,
                             graph.patch_len, d_e, d_a)


class TestRates:
    def test_zero_embeddings_give_uniform_rows(self):
        graph, rng = _graph()
        params = _params(graph, rng)
        for arr in (params.e_ni, params.e_ne, params.e_p):
            arr.values[:] = 0.0
        be, bi = rates(params, graph)
        t = graph.n_tokens
        assert np.allclose(be.values, 1.0 / t, atol=1e-15)
        assert np.allclose(bi.values, 1.0 / t, atol=1e-15)

    def test_rates_strictly_inside_unit_interval(self):
        graph, rng = _graph(seed=1)
        params = _params(graph, rng)
        be, bi = rates(params, graph)
        for b in (be.values, bi.values):
            assert np.all(b > 0.0) and np.all(b < 1.0)

    def test_dense_rows_sum_to_one(self):
        graph, rng = _graph(seed=2)
        params = _params(graph, rng)
        be_dense, bi_dense = rates_dense(params)
        for d in (be_dense.values, bi_dense.values):
            assert np.max(np.abs(d.sum(axis=-1) - 1.0)) < 1e-12

    def test_edges_match_dense_entries(self):
        graph, rng = _graph(seed=3)
        params = _params(graph, rng)
        be, _ = rates(params, graph)
        be_dense, _ = rates_dense(params)
        expect = be_dense.values[graph.src_token, graph.dst_token]
        assert np.max(np.abs(be.values - expect)) < 1e-15


class TestInputAttention:
    def test_identical_patches_uniform(self):
        graph, rng = _graph(seed=4)
        params = _params(graph, rng)
        b, n, p, plen = 2, graph.n_groups, graph.patch_count, graph.patch_len
        patched = DiffArray(np.ones((b, n, p, plen)))
        alpha = input_attention(patched, params, graph)
        assert np.allclose(alpha.values, 1.0 / graph.n_tokens, atol=1e-12)

    def test_rows_sum_to_one(self):
        graph, rng = _graph(seed=5)
        params = _params(graph, rng)
        patched = DiffArray(rng.normal(size=(3, graph.n_groups, graph.patch_count,
                                             graph.patch_len)))
        dense = attention_dense(patched, params)
        assert np.max(np.abs(dense.values.sum(axis=-1) - 1.0)) < 1e-12

    def test_sensitive_to_input_perturbation(self):
        graph, rng = _graph(seed=6)
        params = _params(graph, rng)
        x = rng.normal(size=(1, graph.n_groups, graph.patch_count, graph.patch_len))
        base = input_attention(DiffArray(x), params, graph).values
        x2 = x.copy()
        x2[0, 0, 0] *= 2.0
        moved = input_attention(DiffArray(x2), params, graph).values
        assert np.max(np.abs(moved - base)) > 0.0


class TestDecayWeights:
    def test_zero_lag_equals_alpha(self):
        rng = np.random.default_rng(7)
        e = 50
        beta_e = DiffArray(rng.uniform(0.01, 0.99, e))
        beta_i = DiffArray(rng.uniform(0.01, 0.99, e))
        alpha = DiffArray(rng.uniform(0.01, 0.99, (4, e)))
        lam = decay_weights(beta_e, beta_i, alpha, np.zeros(e))
        assert np.max(np.abs(lam.values - alpha.values)) < 1e-12

    def test_large_lag_vanishes(self):
        beta_e = DiffArray([0.3])
        beta_i = DiffArray([0.5])
        alpha = DiffArray([[0.4]])
        lam = decay_weights(beta_e, beta_i, alpha, np.array([200.0]))
        assert lam.values[0, 0] == pytest.approx(0.0, abs=1e-20)

    def test_scalar_arithmetic_case(self):
        # beta_e=0.5, beta_i=0.9, alpha=0.7, delta=2
        expect = max(0.0, math.exp(-1.0) - 0.3 * math.exp(-1.8))
        lam = decay_weights(DiffArray([0.5]), DiffArray([0.9]),
                            DiffArray([[0.7]]), np.array([2.0]))
        assert lam.values[0, 0] == pytest.approx(expect, abs=1e-12)
        assert lam.values[0, 0] == pytest.approx(0.3183, abs=5e-4)

    def test_unit_interval_over_random_sweep(self):
        rng = np.random.default_rng(8)
        n = 10_000
        lam = decay_weights(
            DiffArray(rng.uniform(0, 1, n)), DiffArray(rng.uniform(0, 1, n)),
            DiffArray(rng.uniform(0, 1, n)), rng.integers(0, 30, n).astype(float),
        )
        assert np.all(lam.values >= 0.0)
        assert np.all(lam.values <= 1.0)

    def test_monotone_decay_in_contractive_regime(self):
        # non-increasing in the lag whenever beta_i >= beta_e and
        # (1 - alpha) * beta_i <= beta_e (sufficient condition; the general
        # case can rise before decaying)
        rng = np.random.default_rng(9)
        deltas = np.arange(0.0, 12.0)
        for _ in range(200):
            beta_e = rng.uniform(0.05, 0.95)
            beta_i = rng.uniform(beta_e, 0.99)
            alpha_min = max(0.0, 1.0 - beta_e / beta_i)
            alpha = rng.uniform(alpha_min, 1.0)
            lam = decay_weights(DiffArray(np.full_like(deltas, beta_e)),
                                DiffArray(np.full_like(deltas, beta_i)),
                                DiffArray(np.full_like(deltas, alpha)), deltas)
            assert np.all(np.diff(lam.values) <= 1e-12)

    def test_leak_lets_gradient_through_dead_edges(self):
        beta_e = DiffArray([0.2], trainable=True)
        beta_i = DiffArray([0.9])
        alpha = DiffArray([[0.0]])  # pre-relu value is exactly 0 at delta 0
        with Tape() as tape:
            lam = decay_weights(beta_e, beta_i, alpha, np.array([0.0]), leak=0.01)
            tape.backward(mean(lam))
        assert beta_e.grad is not None


class TestEffectiveGraph:
    def test_all_ones_reduces_to_initial(self):
        graph, rng = _graph(seed=10)
        w = effective_graph(graph, None)
        assert np.array_equal(w.values, np.ones(graph.edge_count))
        dense = effective_dense(graph, w.values)
        assert np.array_equal(dense, graph.dense())

    def test_sparse_matches_dense_elementwise_product(self):
        graph, rng = _graph(seed=11)
        lam = rng.uniform(0, 1, graph.edge_count)
        dense = effective_dense(graph, lam)
        # dense reference: binary mask elementwise-times a full weight tensor
        mask = graph.dense()
        full = np.zeros_like(mask)
        full[graph.dst_token, graph.src_token] = lam
        assert np.max(np.abs(dense - mask * full)) < 1e-12
        assert np.all(dense[mask == 0] == 0)

    def test_weight_count_mismatch_rejected(self):
        graph, _ = _graph(seed=12)
        from leadlag.engine import ShapeError
        with pytest.raises(ShapeError):
            effective_graph(graph, DiffArray(np.ones(graph.edge_count + 1)))


class TestGradients:
    def test_all_decay_parameters_receive_gradients(self):
        graph, rng = _graph(n=3, window=8, patch=2, seed=13, k=1)
        params = _params(graph, rng, d_e=3, d_a=2)
        x = rng.normal(size=(2, graph.n_groups, graph.patch_count, graph.patch_len))

        def f():
            be, bi = rates(params, graph)
            alpha = input_attention(DiffArray(x), params, graph)
            lam = decay_weights(be, bi, alpha, graph.delta.astype(float))
            return mean(mul(lam, lam))

        report = grad_check(f, params.named("d"), step=1e-5, tol=1e-4)
        assert report.passed, report.summary()
