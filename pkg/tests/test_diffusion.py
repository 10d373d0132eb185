import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.attention import AttentionMatrices, MultiHeadParams, directional_attention
from src.diffusion import DiffusionFilter, FilterBank, diffuse, diffusion_conv, diffusion_conv_bank
from src.errors import DimensionError
from src.numerics import Parameter, Tensor, finite_difference_check, tanh, total
from tests.conftest import random_graph


def row_stochastic(rng, n):
    a = rng.random((n, n))
    return a / a.sum(axis=1, keepdims=True)


def literal_diffusion(x, a_out, a_in, theta):
    """Triple loop over columns, hops and directions with explicit matrix powers."""
    n, k_sig = x.shape
    out = np.zeros(n)
    for k in range(k_sig):
        for h in range(1, theta.shape[1] + 1):
            p_out = np.linalg.matrix_power(a_out, h)
            p_in = np.linalg.matrix_power(a_in, h)
            for i in range(n):
                out[i] += theta[k, h - 1, 0] * (p_out[i] @ x[:, k]) + theta[k, h - 1, 1] * (p_in[i] @ x[:, k])
    return out


def test_matches_literal_loop_on_dense_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, steps, k_sig = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        x = rng.normal(size=(n, k_sig))
        a_out, a_in = row_stochastic(rng, n), row_stochastic(rng, n)
        theta = rng.normal(size=(k_sig, steps, 2))
        att = AttentionMatrices(a_out=Tensor(a_out), a_in=Tensor(a_in))
        got = diffusion_conv(x, att, DiffusionFilter(Tensor(theta))).data
        assert_allclose(got, literal_diffusion(x, a_out, a_in, theta), atol=1e-10)


def test_sparse_hops_match_literal_loop():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n, steps, k_sig = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        g = random_graph(rng, n, density=0.4)
        att = directional_attention(rng.normal(size=(n, k_sig)), g, MultiHeadParams.init(rng, k_sig, 2, 2, "att"))
        x = rng.normal(size=(n, k_sig))
        theta = rng.normal(size=(k_sig, steps, 2))
        got = diffusion_conv(x, att, DiffusionFilter(Tensor(theta))).data
        assert_allclose(got, literal_diffusion(x, att.a_out.data, att.a_in.data, theta), atol=1e-10)


def test_bank_matches_individual_filters():
    rng = np.random.default_rng(2)
    n, k_sig, steps, q = 5, 3, 2, 4
    att = AttentionMatrices(a_out=Tensor(row_stochastic(rng, n)), a_in=Tensor(row_stochastic(rng, n)))
    bank = FilterBank(Tensor(rng.normal(size=(k_sig, steps, 2, q))))
    x = rng.normal(size=(n, k_sig))
    combined = diffusion_conv_bank(x, att, bank).data
    for i, f in enumerate(bank.filters):
        assert_allclose(combined[:, i], diffusion_conv(x, att, f).data, atol=1e-12)

    rebuilt = FilterBank.from_filters(bank.filters)
    assert_allclose(rebuilt.theta.data, bank.theta.data)


def test_one_hop_identity_is_a_linear_map():
    rng = np.random.default_rng(3)
    n, k_sig = 4, 3
    eye = Tensor(np.eye(n))
    theta = rng.normal(size=(k_sig, 1, 2))
    x = rng.normal(size=(n, k_sig))
    got = diffusion_conv(x, AttentionMatrices(eye, eye), DiffusionFilter(Tensor(theta))).data
    assert_allclose(got, x @ (theta[:, 0, 0] + theta[:, 0, 1]), atol=1e-12)


def test_diffuse_feature_layout():
    rng = np.random.default_rng(4)
    n = 3
    a_out, a_in = row_stochastic(rng, n), row_stochastic(rng, n)
    x = rng.normal(size=(n, 2))
    feats = diffuse(x, AttentionMatrices(Tensor(a_out), Tensor(a_in)), 2).data
    expected = np.concatenate([a_out @ x, a_in @ x, a_out @ a_out @ x, a_in @ a_in @ x], axis=1)
    assert_allclose(feats, expected, atol=1e-12)


def test_activation_is_applied():
    rng = np.random.default_rng(5)
    att = AttentionMatrices(Tensor(row_stochastic(rng, 3)), Tensor(row_stochastic(rng, 3)))
    f = DiffusionFilter(Tensor(rng.normal(size=(2, 2, 2))))
    x = rng.normal(size=(3, 2))
    assert_allclose(diffusion_conv(x, att, f, activation=tanh).data, np.tanh(diffusion_conv(x, att, f).data))


def test_gradient_reaches_filters_and_attention():
    rng = np.random.default_rng(6)
    n, k_sig = 4, 3
    a_out = Parameter(row_stochastic(rng, n), name='a_out')
    a_in = Parameter(row_stochastic(rng, n), name='a_in')
    theta = Parameter(rng.normal(size=(k_sig, 2, 2, 2)), name='theta')
    x = rng.normal(size=(n, k_sig))

    def f():
        return total(tanh(diffusion_conv_bank(x, AttentionMatrices(a_out, a_in), FilterBank(theta))))

    assert finite_difference_check(f, {'a_out': a_out, 'a_in': a_in, 'theta': theta}) < 1e-4


def test_width_mismatch_is_rejected():
    rng = np.random.default_rng(7)
    att = AttentionMatrices(Tensor(np.eye(3)), Tensor(np.eye(3)))
    with pytest.raises(DimensionError):
        diffusion_conv_bank(rng.normal(size=(3, 2)), att, FilterBank(Tensor(np.ones((3, 1, 2, 1)))))
    with pytest.raises(DimensionError):
        diffuse(rng.normal(size=(4, 2)), att, 1)


def test_linear_in_the_signal():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n, k_sig = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        att = AttentionMatrices(Tensor(row_stochastic(rng, n)), Tensor(row_stochastic(rng, n)))
        f = DiffusionFilter(Tensor(rng.normal(size=(k_sig, 3, 2))))
        x, y = rng.normal(size=(n, k_sig)), rng.normal(size=(n, k_sig))
        alpha, beta = rng.normal(size=2)
        combined = diffusion_conv(alpha * x + beta * y, att, f).data
        parts = alpha * diffusion_conv(x, att, f).data + beta * diffusion_conv(y, att, f).data
        assert_allclose(combined, parts, atol=1e-10)


def test_constant_signal_is_scaled_by_the_filter_sum():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n, k_sig, steps = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        att = AttentionMatrices(Tensor(row_stochastic(rng, n)), Tensor(row_stochastic(rng, n)))
        theta = rng.normal(size=(k_sig, steps, 2))
        c = rng.normal(size=k_sig)
        got = diffusion_conv(np.tile(c, (n, 1)), att, DiffusionFilter(Tensor(theta))).data
        assert_allclose(got, np.full(n, c @ theta.sum(axis=(1, 2))), atol=1e-10)
