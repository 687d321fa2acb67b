import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sret.attention import (
    AttentionParams,
    invert_permutation,
    make_permutation,
    sliced_group_mhsa,
    vanilla_mhsa,
)
from sret.tensor import ConfigError, ShapeError, Tensor, grad_check_finite_diff, mul, reduce_sum

import oracles


def make_params(d, heads, rng, dtype=np.float64, identity_out=False):
    w_qkv = rng.normal(0, 0.5, size=(d, 3 * d)).astype(dtype)
    b_qkv = rng.normal(0, 0.1, size=3 * d).astype(dtype)
    if identity_out:
        w_o = np.eye(d, dtype=dtype)
        b_o = np.zeros(d, dtype=dtype)
    else:
        w_o = rng.normal(0, 0.5, size=(d, d)).astype(dtype)
        b_o = rng.normal(0, 0.1, size=d).astype(dtype)
    return AttentionParams(
        Tensor(w_qkv, requires_grad=True),
        Tensor(b_qkv, requires_grad=True),
        Tensor(w_o, requires_grad=True),
        Tensor(b_o, requires_grad=True),
        heads,
    )


class TestVanilla:
    def test_matches_per_head_loop_oracle(self):
        rng = np.random.default_rng(0)
        p = make_params(8, 2, rng)
        x = rng.normal(size=(2, 4, 8))
        out = vanilla_mhsa(Tensor(x), p)
        expected = oracles.mhsa_loops(x, p.w_qkv.data, p.b_qkv.data, p.w_o.data, p.b_o.data, 2)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_single_token_weight_is_one(self):
        rng = np.random.default_rng(1)
        d = 6
        p = make_params(d, 2, rng)
        x = rng.normal(size=(1, 1, d))
        out = vanilla_mhsa(Tensor(x), p)
        v = x @ p.w_qkv.data[:, 2 * d :] + p.b_qkv.data[2 * d :]
        np.testing.assert_allclose(out.data, v @ p.w_o.data + p.b_o.data, atol=1e-10)

    def test_zero_query_gives_uniform_attention(self):
        rng = np.random.default_rng(2)
        d = 4
        p = make_params(d, 1, rng, identity_out=True)
        p.w_qkv.data[:, :d] = 0.0
        p.b_qkv.data[:d] = 0.0
        x = rng.normal(size=(1, 5, d))
        out = vanilla_mhsa(Tensor(x), p)
        v = x @ p.w_qkv.data[:, 2 * d :] + p.b_qkv.data[2 * d :]
        np.testing.assert_allclose(out.data[0], v[0].mean(axis=0, keepdims=True).repeat(5, 0), atol=1e-8)

    def test_dim_mismatch(self):
        p = make_params(8, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            vanilla_mhsa(Tensor(np.zeros((1, 3, 4))), p)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            make_params(6, 4, np.random.default_rng(0))

    def test_backward(self):
        rng = np.random.default_rng(3)
        p = make_params(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
        f = lambda: reduce_sum(mul(vanilla_mhsa(x, p), vanilla_mhsa(x, p)))
        params = [x, p.w_qkv, p.b_qkv, p.w_o, p.b_o]
        assert grad_check_finite_diff(f, params, samples_per_param=4) < 1e-6


class TestSliced:
    def test_groups_one_is_bitwise_vanilla(self):
        rng = np.random.default_rng(0)
        p = make_params(8, 2, rng, dtype=np.float32)
        x = Tensor(rng.normal(size=(2, 6, 8)).astype(np.float32))
        a = vanilla_mhsa(x, p)
        b = sliced_group_mhsa(x, p, groups=1, mode="P+I-L", rng=np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)

    def test_identity_permutation_equals_block_diagonal_oracle(self):
        rng = np.random.default_rng(1)
        for n, groups in [(4, 2), (8, 4), (12, 3), (16, 8)]:
            p = make_params(8, 2, rng)
            x = rng.normal(size=(2, n, 8))
            out = sliced_group_mhsa(
                Tensor(x), p, groups=groups, mode="P+I", permutation=np.arange(n)
            )
            expected = oracles.mhsa_loops(
                x, p.w_qkv.data, p.b_qkv.data, p.w_o.data, p.b_o.data, 2,
                mask=oracles.block_diagonal_mask(n, groups),
            )
            np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_random_permutation_groups_one_matches_vanilla(self):
        # permute -> full attention -> inverse-permute commutes at groups=1
        rng = np.random.default_rng(2)
        p = make_params(8, 4, rng)
        x = rng.normal(size=(1, 10, 8))
        a = vanilla_mhsa(Tensor(x), p)
        b = sliced_group_mhsa(
            Tensor(x), p, groups=1, mode="P+I", rng=np.random.default_rng(11)
        )
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_mode_p_leaves_tokens_permuted(self):
        rng = np.random.default_rng(3)
        p = make_params(4, 1, rng)
        x = rng.normal(size=(1, 6, 4))
        perm = np.array([3, 1, 5, 0, 4, 2])
        restored = sliced_group_mhsa(Tensor(x), p, 2, mode="P+I", permutation=perm)
        shuffled = sliced_group_mhsa(Tensor(x), p, 2, mode="P", permutation=perm)
        np.testing.assert_allclose(
            shuffled.data[0], restored.data[0][perm], atol=1e-10
        )

    def test_divisibility_error(self):
        p = make_params(4, 1, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            sliced_group_mhsa(Tensor(np.zeros((1, 5, 4))), p, groups=2)

    def test_constant_tokens_stay_constant(self):
        # value projection = identity, output projection = identity: each
        # output row is a convex combination, so constant rows prove the
        # attention rows sum to one within every slice
        d = 4
        p = make_params(d, 2, np.random.default_rng(4), identity_out=True)
        p.w_qkv.data[:, 2 * d :] = np.eye(d)
        p.b_qkv.data[2 * d :] = 0.0
        x = np.tile(np.array([0.3, -1.2, 0.7, 2.0]), (1, 8, 1))
        out = sliced_group_mhsa(
            Tensor(x), p, groups=4, mode="P+I", rng=np.random.default_rng(6)
        )
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_shares_parameters_with_vanilla(self):
        p = make_params(8, 2, np.random.default_rng(5))
        total = sum(t.size for t in (p.w_qkv, p.b_qkv, p.w_o, p.b_o))
        assert total == 3 * (8 * 8 + 8) + 8 * 8 + 8  # same count for any groups

    def test_backward_through_slicing(self):
        rng = np.random.default_rng(6)
        p = make_params(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 6, 4)), requires_grad=True)
        perm = np.random.default_rng(7).permutation(6)
        f = lambda: reduce_sum(
            mul(
                sliced_group_mhsa(x, p, 3, mode="P+I", permutation=perm),
                sliced_group_mhsa(x, p, 3, mode="P+I", permutation=perm),
            )
        )
        params = [x, p.w_qkv, p.b_qkv, p.w_o, p.b_o]
        assert grad_check_finite_diff(f, params, samples_per_param=4) < 1e-6


class TestPermutations:
    def test_single_element(self):
        assert make_permutation(1, np.random.default_rng(0)).tolist() == [0]

    def test_deterministic_for_fixed_seed(self):
        a = make_permutation(50, np.random.default_rng(42))
        b = make_permutation(50, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_bijection_at_realistic_length(self):
        p = make_permutation(196, np.random.default_rng(1))
        assert np.array_equal(np.sort(p), np.arange(196))

    def test_invert_identity(self):
        assert invert_permutation(np.array([0, 1, 2])).tolist() == [0, 1, 2]

    def test_invert_enumeration(self):
        assert invert_permutation(np.array([2, 0, 1])).tolist() == [1, 2, 0]

    @given(st.integers(0, 10_000), st.integers(1, 64))
    @settings(max_examples=50)
    def test_inverse_properties(self, seed, n):
        p = make_permutation(n, np.random.default_rng(seed))
        q = invert_permutation(p)
        assert np.array_equal(q[p], np.arange(n))
        assert np.array_equal(invert_permutation(q), p)
