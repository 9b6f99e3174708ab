import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbb import oracle
from vbb import tensor as T
from vbb.attention import (
    AttentionConfig,
    ConvParams,
    PermutationPair,
    VbbBlockParams,
    conv_branch,
    flop_count,
    full_attention,
    global_attention,
    make_permutation,
    rs_win_attention,
    vbb_block,
)
from vbb.errors import ConfigError
from vbb.tensor import MacCounter, Tensor


def tokens(rng, B, L, C):
    return Tensor(rng.normal(size=(B, L, C)))


def qkv_weight(rng, C):
    return Tensor(rng.normal(size=(C, 3 * C)) / math.sqrt(C))


def identity_conv(C, kernel):
    eye = Tensor(np.eye(C))
    return ConvParams(eye, Tensor(kernel), Tensor(np.ones(C)), Tensor(np.zeros(C)), eye)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# --- permutations -----------------------------------------------------------

def test_permutation_singleton():
    p = make_permutation(1, 1, 0)
    assert p.shuffle.tolist() == [[0]] and p.restore.tolist() == [[0]]


def test_restore_is_inverse_of_known_shuffle():
    shuffle = np.array([[2, 0, 1]])
    assert T.argsort(shuffle, axis=1).tolist() == [[1, 2, 0]]


def test_permutation_is_seed_determined():
    a, b = make_permutation(3, 20, 5), make_permutation(3, 20, 5)
    assert np.array_equal(a.shuffle, b.shuffle)
    assert not np.array_equal(a.shuffle, make_permutation(3, 20, 6).shuffle)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 64))
def test_permutation_round_trip(seed, B, L):
    p = make_permutation(B, L, seed)
    for row in (p.shuffle, p.restore):
        assert np.array_equal(np.sort(row, axis=1), np.broadcast_to(np.arange(L), (B, L)))
    assert np.array_equal(np.take_along_axis(p.shuffle, p.restore, axis=1), np.broadcast_to(np.arange(L), (B, L)))
    x = np.random.default_rng(seed).normal(size=(B, L, 2))
    assert np.array_equal(p.undo(p.apply(x)), x)


# --- RS-Win -----------------------------------------------------------------

@pytest.mark.parametrize("B,L,C,heads", [(1, 4, 6, 1), (2, 9, 6, 3), (2, 16, 12, 3)])
def test_rs_win_full_window_equals_full_attention(rng, B, L, C, heads):
    x, w = tokens(rng, B, L, C), qkv_weight(rng, C)
    got = rs_win_attention(x, w, heads=heads, window_size=L, rng_seed=3)
    assert oracle.compare(got, oracle.full_attention_oracle(x, heads, w)).max_abs_diff < 1e-9


def test_rs_win_window_one_is_value_projection(rng):
    x, w = tokens(rng, 2, 6, 6), qkv_weight(rng, 6)
    got = rs_win_attention(x, w, heads=3, window_size=1, rng_seed=0)
    np.testing.assert_allclose(got.data, x.data @ w.data[:, 12:], atol=1e-13)


def test_rs_win_matches_naive_window_loop(rng):
    x, w = tokens(rng, 2, 8, 6), qkv_weight(rng, 6)
    got = rs_win_attention(x, w, heads=3, window_size=4, rng_seed=11)
    perm = make_permutation(2, 8, 11)
    want = oracle.rs_win_oracle(x, 3, w, 4, perm.shuffle)
    assert oracle.compare(got, want).max_abs_diff < 1e-12


@pytest.mark.parametrize("L,window", [(7, 3), (10, 4), (5, 2)])
def test_rs_win_padding_matches_short_last_window(rng, L, window):
    x, w = tokens(rng, 2, L, 6), qkv_weight(rng, 6)
    got = rs_win_attention(x, w, heads=3, window_size=window, rng_seed=2)
    want = oracle.rs_win_oracle(x, 3, w, window, make_permutation(2, L, 2).shuffle)
    assert oracle.compare(got, want).max_abs_diff < 1e-12


def test_rs_win_rejects_window_longer_than_sequence(rng):
    with pytest.raises(ConfigError):
        rs_win_attention(tokens(rng, 1, 4, 6), qkv_weight(rng, 6), heads=1, window_size=5, rng_seed=0)


def test_rs_win_uses_explicit_permutation(rng):
    x, w = tokens(rng, 1, 6, 6), qkv_weight(rng, 6)
    ident = PermutationPair(np.arange(6)[None], np.arange(6)[None])
    got = rs_win_attention(x, w, heads=1, window_size=3, rng_seed=0, perm=ident)
    want = oracle.rs_win_oracle(x, 1, w, 3, ident.shuffle)
    assert oracle.compare(got, want).max_abs_diff < 1e-12


def test_rs_win_deterministic_and_seed_dependent(rng):
    x, w = tokens(rng, 2, 12, 6), qkv_weight(rng, 6)
    a = rs_win_attention(x, w, heads=3, window_size=4, rng_seed=1).data
    b = rs_win_attention(x, w, heads=3, window_size=4, rng_seed=1).data
    c = rs_win_attention(x, w, heads=3, window_size=4, rng_seed=2).data
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


# --- global attention -------------------------------------------------------

@pytest.mark.parametrize("B,L,C,heads", [(1, 4, 6, 1), (2, 9, 12, 3)])
def test_global_pool_one_equals_full_attention(rng, B, L, C, heads):
    x, w = tokens(rng, B, L, C), qkv_weight(rng, C)
    got = global_attention(x, w, heads=heads, pool_size=1)
    assert oracle.compare(got, oracle.full_attention_oracle(x, heads, w)).max_abs_diff < 1e-9


def test_global_pool_full_length_single_key(rng):
    x, w = tokens(rng, 2, 8, 6), qkv_weight(rng, 6)
    got = global_attention(x, w, heads=3, pool_size=8).data
    want = x.data.mean(axis=1, keepdims=True) @ w.data[:, 12:]
    np.testing.assert_allclose(got, np.broadcast_to(want, got.shape), atol=1e-13)


@pytest.mark.parametrize("pool", [1, 2, 3, 5])
def test_global_constant_input_gives_constant_output(rng, pool):
    v = rng.normal(size=6)
    x = Tensor(np.broadcast_to(v, (1, 5, 6)).copy())
    out = global_attention(x, qkv_weight(rng, 6), heads=3, pool_size=pool).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-13)


def test_global_matches_pooled_loop_oracle(rng):
    x, w = tokens(rng, 2, 10, 6), qkv_weight(rng, 6)
    got = global_attention(x, w, heads=3, pool_size=3)
    assert oracle.compare(got, oracle.global_attention_oracle(x, 3, w, 3)).max_abs_diff < 1e-12


# --- conv branch ------------------------------------------------------------

def test_conv_delta_kernel_identity(rng):
    kernel = np.zeros((3, 3, 4))
    kernel[1, 1] = 1.0
    x = tokens(rng, 2, 12, 4)
    out = conv_branch(x, identity_conv(4, kernel), 3, 4, test_mode=True)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_kernel_gives_zero(rng):
    x = tokens(rng, 1, 9, 3)
    out = T.depthwise_conv3x3(T.reshape(x, (1, 3, 3, 3)), Tensor(np.zeros((3, 3, 3))))
    assert not out.data.any()


def test_conv_uniform_kernel_corner_sees_four_taps():
    c = 2.5
    x = Tensor(np.full((1, 16, 1), c))
    out = conv_branch(x, identity_conv(1, np.full((3, 3, 1), 1 / 9)), 4, 4, test_mode=True).data.reshape(4, 4)
    np.testing.assert_allclose(out[1:3, 1:3], c, atol=1e-15)
    for corner in (out[0, 0], out[0, 3], out[3, 0], out[3, 3]):
        assert corner == pytest.approx(4 * c / 9, abs=1e-15)
    assert out[0, 1] == pytest.approx(6 * c / 9, abs=1e-15)


def test_conv_matches_direct_convolution(rng):
    x = rng.normal(size=(5, 6, 3))
    kernel = rng.normal(size=(3, 3, 3))
    out = conv_branch(Tensor(x.reshape(1, 30, 3)), identity_conv(3, kernel), 5, 6, test_mode=True)
    np.testing.assert_allclose(out.data.reshape(5, 6, 3), oracle.conv2d_oracle(x, kernel), atol=1e-13)


def test_conv_positional_signal_for_any_non_delta_kernel(rng):
    x = Tensor(np.ones((1, 25, 2)))
    for _ in range(5):
        out = conv_branch(x, identity_conv(2, rng.normal(size=(3, 3, 2))), 5, 5, test_mode=True)
        out = out.data.reshape(5, 5, 2)
        for border in (out[0, 0], out[0, 2], out[4, 4], out[2, 0]):
            assert not np.allclose(border, out[2, 2])


def test_conv_positional_signal_survives_norm_and_activation(rng):
    params = VbbBlockParams.init(18, rng).conv
    out = conv_branch(Tensor(np.ones((1, 25, 6))), params, 5, 5).data.reshape(5, 5, 6)
    assert np.allclose(out[1:4, 1:4], out[2, 2])
    assert not np.allclose(out[0, 0], out[2, 2], atol=1e-6)


def test_conv_grid_mismatch(rng):
    with pytest.raises(ConfigError):
        conv_branch(tokens(rng, 1, 10, 3), identity_conv(3, np.zeros((3, 3, 3))), 3, 3)


# --- block ------------------------------------------------------------------

def block_setup(rng, C=6, L=6, grid=(2, 3), heads=3, window=3, pool=2):
    cfg = AttentionConfig(heads_total=heads, window_size=window, pool_size=pool, grid_h=grid[0], grid_w=grid[1])
    return cfg, VbbBlockParams.init(C, rng), tokens(rng, 2, L, C)


def test_block_zero_scales_is_residual(rng):
    cfg, params, x = block_setup(rng)
    for s in (params.alpha, params.beta, params.lam):
        s.data[...] = 0.0
    out = vbb_block(x, cfg, params, rng_seed=0, test_mode=True)
    np.testing.assert_array_equal(out.data, x.data)


def test_block_masked_identity(rng):
    cfg, params, x = block_setup(rng)
    params.w_o.data[...] = np.eye(6)
    params.beta.data[...] = 0.0
    params.lam.data[...] = 0.0
    params.alpha.data[...] = 0.7
    out = vbb_block(x, cfg, params, rng_seed=0, test_mode=True).data
    conv = conv_branch(Tensor(x.data[..., :2]), params.conv, 2, 3, test_mode=True).data
    np.testing.assert_allclose(out[..., :2], x.data[..., :2] + 0.7 * conv, atol=1e-14)
    np.testing.assert_array_equal(out[..., 2:], x.data[..., 2:])


def test_block_gradcheck_and_scaling_gradients(rng):
    cfg, params, _ = block_setup(rng)
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    w = rng.normal(size=(2, 6, 6))

    def f():
        return T.sum_(T.mul(vbb_block(x, cfg, params, rng_seed=4), w))

    named = list(params.named_parameters())
    assert T.grad_check(f, [x] + [t for _, t in named]) < 1e-4
    T.backward(f())
    for s in (params.alpha, params.beta, params.lam):
        assert abs(s.grad.item()) > 1e-6


def test_block_preserves_shape_and_is_deterministic(rng):
    cfg, params, x = block_setup(rng, C=12, L=16, grid=(4, 4), heads=6, window=4, pool=4)
    params = VbbBlockParams.init(12, rng)
    a = vbb_block(x, cfg, params, rng_seed=9).data
    assert a.shape == x.shape
    assert np.array_equal(a, vbb_block(x, cfg, params, rng_seed=9).data)


def test_block_config_errors(rng):
    with pytest.raises(ConfigError):
        AttentionConfig(heads_total=4, window_size=2, pool_size=1, grid_h=2, grid_w=2)
    with pytest.raises(ConfigError):
        VbbBlockParams.init(8, rng)
    cfg = AttentionConfig(heads_total=3, window_size=2, pool_size=1, grid_h=2, grid_w=2)
    with pytest.raises(ConfigError):
        vbb_block(tokens(rng, 1, 4, 8), cfg, VbbBlockParams.init(6, rng), 0)


def test_disabled_mechanism_has_no_parameters(rng):
    params = VbbBlockParams.init(6, rng, disabled={"conv"})
    names = [n for n, _ in params.named_parameters()]
    assert params.conv is None and not any(n.startswith("conv.") or n == "alpha" for n in names)
    assert params.alpha.item() == 0.0


# --- FLOP formulas ----------------------------------------------------------

def test_flop_full_attention_example():
    assert flop_count("full", 64, 32).mixing == 262144


def test_flop_rs_win_example():
    assert flop_count("rs_win", 64, 33, window_size=8).mixing == 11264


def test_flop_rs_win_linear_in_length():
    assert flop_count("rs_win", 256, 33, window_size=8).mixing * 2 == flop_count("rs_win", 512, 33, window_size=8).mixing


@pytest.mark.parametrize("L", [16, 32, 64])
def test_flop_pooled_global_linear_when_pool_grows_with_length(L):
    a = flop_count("global", L, 12, pool_size=L // 8).mixing
    b = flop_count("global", 2 * L, 12, pool_size=2 * L // 8).mixing
    assert b == 2 * a


@pytest.mark.parametrize("mech,L,window,pool", [
    ("full", 16, None, None), ("rs_win", 16, 4, None), ("rs_win", 10, 4, None),
    ("global", 12, None, 5), ("conv", 12, None, None),
])
def test_counter_matches_formula(rng, mech, L, window, pool):
    C = 18
    entry = flop_count(mech, L, C, 3, window_size=window, pool_size=pool)
    width = C if mech == "full" else C // 3
    x, w = tokens(rng, 1, L, width), qkv_weight(rng, width)
    with MacCounter() as c:
        if mech == "full":
            full_attention(x, w, 3)
        elif mech == "rs_win":
            rs_win_attention(x, w, heads=3, window_size=window, rng_seed=0)
        elif mech == "global":
            global_attention(x, w, heads=3, pool_size=pool)
        else:
            conv_branch(x, identity_conv(width, rng.normal(size=(3, 3, width))), 3, 4)
    assert c["attn_score"] + c["attn_mix"] + c["conv_spatial"] == entry.mixing
    assert c["proj"] == entry.projection


def test_flop_unknown_mechanism():
    with pytest.raises(ConfigError):
        flop_count("shifted", 16, 6)
