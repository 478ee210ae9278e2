import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from awq_edge.tensor import (
    RopeParams, ShapeError, causal_attention, matmul_f32, rmsnorm, rope_apply, silu, softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
            c[i, j] = acc
    return c


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((4, 6)).astype(np.float32)
        np.testing.assert_array_equal(matmul_f32(np.eye(4, dtype=np.float32), x), x)

    def test_scalar(self):
        assert matmul_f32([[2.0]], [[3.0]])[0, 0] == 6.0

    def test_matches_triple_loop_bitwise(self, rng):
        a = rng.standard_normal((5, 7)).astype(np.float32)
        b = rng.standard_normal((7, 3)).astype(np.float32)
        np.testing.assert_array_equal(matmul_f32(a, b), triple_loop(a, b))

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul_f32(np.zeros((2, 3)), np.zeros((4, 5)))

    @pytest.mark.parametrize("workers", [2, 3, 4])
    def test_worker_count_does_not_change_bits(self, rng, workers):
        a = rng.standard_normal((37, 50)).astype(np.float32)
        b = rng.standard_normal((50, 11)).astype(np.float32)
        np.testing.assert_array_equal(matmul_f32(a, b, workers=workers), matmul_f32(a, b))


class TestRmsnorm:
    def test_constant_vector(self):
        np.testing.assert_allclose(rmsnorm([2, 2, 2, 2], np.ones(4), 1e-12), np.ones(4), atol=1e-6)

    def test_zero_gamma(self, rng):
        assert not np.any(rmsnorm(rng.standard_normal(8), np.zeros(8)))

    def test_matches_formula(self, rng):
        x = rng.standard_normal(896)
        g = rng.standard_normal(896)
        expect = g * x / np.sqrt(np.mean(x.astype(np.float64) ** 2) + 1e-6)
        got = rmsnorm(x.astype(np.float32), g.astype(np.float32), 1e-6)
        assert np.max(np.abs(got - expect)) <= 1e-6 * max(1.0, np.max(np.abs(expect)))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            rmsnorm(np.ones(3), np.ones(4))

    @given(arrays(np.float32, 64, elements=st.floats(0.5, 100, width=32)))
    def test_unit_rms(self, x):
        y = rmsnorm(x, np.ones(64), 1e-9)
        assert abs(np.sqrt(np.mean(y.astype(np.float64) ** 2)) - 1.0) <= 1e-5


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.standard_normal(64).astype(np.float32)
        np.testing.assert_array_equal(rope_apply(x, 0, RopeParams(64)), x)

    def test_head_dim_two(self):
        y = rope_apply(np.array([1.0, 0.0]), 1, RopeParams(2, 10000.0))
        np.testing.assert_allclose(y, [math.cos(1.0), math.sin(1.0)], atol=1e-7)

    def test_odd_head_dim(self):
        with pytest.raises(ShapeError):
            RopeParams(7)

    @settings(max_examples=50)
    @given(arrays(np.float32, 16, elements=finite), st.integers(0, 5000))
    def test_pair_norms_preserved(self, x, pos):
        y = rope_apply(x, pos, RopeParams(16, 10000.0))
        n_in = np.hypot(x[:8].astype(np.float64), x[8:])
        n_out = np.hypot(y[:8].astype(np.float64), y[8:])
        np.testing.assert_allclose(n_out, n_in, rtol=1e-6, atol=1e-30)

    def test_half_split_pairing(self):
        # lane 0 pairs with lane head_dim/2, not lane 1
        x = np.zeros(4, dtype=np.float32)
        x[0] = 1.0
        y = rope_apply(x, 1, RopeParams(4, 10000.0))
        assert y[1] == 0.0 and y[2] != 0.0


class TestSilu:
    def test_values(self):
        assert silu(0.0) == 0.0
        assert abs(silu(20.0) - 20.0) <= 1e-6
        assert abs(float(silu(1.0)) - 1.0 / (1.0 + math.exp(-1.0))) <= 1e-7

    def test_large_negative_is_finite(self):
        assert np.isfinite(silu(np.float32(-1e4)))


@settings(max_examples=50)
@given(arrays(np.float32, st.integers(1, 40), elements=finite))
def test_softmax_sums_to_one(s):
    assert abs(float(np.sum(softmax(s), dtype=np.float64)) - 1.0) <= 1e-6


def attention_oracle(q, keys, values, n_kv):
    n_heads, hd = q.shape
    group = n_heads // n_kv
    out = []
    for h in range(n_heads):
        g = h // group
        scores = [sum(float(q[h, d]) * float(keys[p, g, d]) for d in range(hd)) / math.sqrt(hd)
                  for p in range(keys.shape[0])]
        mx = max(scores)
        w = [math.exp(s - mx) for s in scores]
        tot = sum(w)
        out.extend(sum(w[p] / tot * float(values[p, g, d]) for p in range(keys.shape[0])) for d in range(hd))
    return np.array(out)


class TestAttention:
    def test_single_position(self, rng):
        q = rng.standard_normal((2, 4)).astype(np.float32)
        k = rng.standard_normal((1, 1, 4)).astype(np.float32)
        v = rng.standard_normal((1, 1, 4)).astype(np.float32)
        np.testing.assert_allclose(causal_attention(q, k, v, 1), np.tile(v[0, 0], 2), atol=1e-7)

    def test_equal_scores_average(self, rng):
        q = np.zeros((2, 4), dtype=np.float32)
        k = rng.standard_normal((5, 1, 4)).astype(np.float32)
        v = rng.standard_normal((5, 1, 4)).astype(np.float32)
        np.testing.assert_allclose(causal_attention(q, k, v, 1), np.tile(v[:, 0].mean(0), 2), atol=1e-6)

    def test_matches_oracle(self, rng):
        q = rng.standard_normal((2, 8)).astype(np.float32)
        k = rng.standard_normal((4, 1, 8)).astype(np.float32)
        v = rng.standard_normal((4, 1, 8)).astype(np.float32)
        assert np.max(np.abs(causal_attention(q, k, v, 1) - attention_oracle(q, k, v, 1))) <= 1e-6

    def test_grouped_heads_use_their_kv_group(self, rng):
        q = rng.standard_normal((4, 8)).astype(np.float32)
        k = rng.standard_normal((3, 2, 8)).astype(np.float32)
        v = rng.standard_normal((3, 2, 8)).astype(np.float32)
        assert np.max(np.abs(causal_attention(q, k, v, 2) - attention_oracle(q, k, v, 2))) <= 1e-6

    def test_errors(self):
        with pytest.raises(ShapeError):
            causal_attention(np.zeros((3, 4)), np.zeros((1, 2, 4)), np.zeros((1, 2, 4)), 2)
        with pytest.raises(ValueError):
            causal_attention(np.zeros((2, 4)), np.zeros((0, 1, 4)), np.zeros((0, 1, 4)), 1)
