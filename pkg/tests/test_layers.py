import math

import numpy as np
import pytest

from sambalm.errors import ContractError
from sambalm.layers import (
    DELTA_MAX,
    DELTA_MIN,
    KVCache,
    MambaState,
    init_mamba_params,
    init_mlp_params,
    init_swa_params,
    mamba_forward,
    mamba_step,
    mlp_forward,
    rope_apply,
    swa_forward,
    swa_step,
)
from sambalm.model import ModelConfig
from sambalm.numerics import Tensor, softplus_np
from sambalm.verify import fd_check
from sambalm.numerics import weighted_sum

D_M, D_E, D_R, D_S, K = 10, 20, 2, 4, 4


@pytest.fixture
def mamba_params(rng):
    return init_mamba_params(rng, D_M, D_E, D_R, D_S, K, out_scale=1.0)


def swa_params(rng, window, *, d_m=D_M, n_q=2, n_kv=1, hd=6, rope=True):
    return init_swa_params(rng, d_m, n_q, n_kv, hd, window, 10000.0, rope, 1.0)


# --- Mamba -------------------------------------------------------------------

def test_mamba_zero_input_gives_zero_output(mamba_params):
    out = mamba_forward(Tensor(np.zeros((5, D_M))), mamba_params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_mamba_n1_equals_fresh_step(rng, mamba_params):
    x = rng.standard_normal(D_M)
    full = mamba_forward(Tensor(x[None, :]), mamba_params).data[0]
    step, _ = mamba_step(x, mamba_params, MambaState(D_E, D_S, K))
    np.testing.assert_allclose(step, full, atol=1e-12)


def test_mamba_streaming_matches_forward(rng, mamba_params):
    n = 33
    x = rng.standard_normal((n, D_M))
    full = mamba_forward(Tensor(x), mamba_params).data
    state = MambaState(D_E, D_S, K)
    rows = np.stack([mamba_step(x[t], mamba_params, state)[0] for t in range(n)])
    assert np.abs(rows - full).max() < 1e-10


def test_mamba_state_matches_batch_scan_state(rng, mamba_params):
    n = 17
    x = rng.standard_normal((n, D_M))
    batch_state = MambaState(D_E, D_S, K)
    mamba_forward(Tensor(x), mamba_params, state=batch_state)
    step_state = MambaState(D_E, D_S, K)
    for t in range(n):
        mamba_step(x[t], mamba_params, step_state)
    assert np.abs(batch_state.z - step_state.z).max() < 1e-10
    np.testing.assert_allclose(batch_state.conv, step_state.conv, atol=1e-12)


def test_mamba_fresh_state_has_zero_conv_window():
    state = MambaState(D_E, D_S, K)
    assert state.conv.shape == (K - 1, D_E)
    np.testing.assert_array_equal(state.conv, 0.0)
    assert state.steps == 0


def test_mamba_chunked_continuation_matches_full(rng, mamba_params):
    n = 24
    x = rng.standard_normal((n, D_M))
    full = mamba_forward(Tensor(x), mamba_params).data
    state = MambaState(D_E, D_S, K)
    parts = [mamba_forward(Tensor(x[s : s + 7]), mamba_params, state=state).data
             for s in range(0, n, 7)]
    assert np.abs(np.vstack(parts) - full).max() < 1e-10


def test_mamba_causality(rng, mamba_params):
    n = 12
    x = rng.standard_normal((n, D_M))
    base = mamba_forward(Tensor(x), mamba_params).data
    for t in (0, 4, n - 2):
        x2 = x.copy()
        x2[t + 1 :] += rng.standard_normal((n - t - 1, D_M))
        pert = mamba_forward(Tensor(x2), mamba_params).data
        np.testing.assert_array_equal(base[: t + 1], pert[: t + 1])


def test_mamba_init_contract(rng):
    p = init_mamba_params(rng, D_M, D_E, D_R, D_S, K, out_scale=0.5)
    expected_a = np.broadcast_to(np.log(np.arange(1, D_S + 1.0)), (D_E, D_S))
    np.testing.assert_array_equal(p.a.data, expected_a)
    np.testing.assert_array_equal(p.d.data, 1.0)
    np.testing.assert_array_equal(p.w_q.data, 0.0)
    delta0 = softplus_np(p.b.data)
    assert (delta0 >= DELTA_MIN).all() and (delta0 <= DELTA_MAX).all()


def test_mamba_step_rejects_mismatched_state(rng, mamba_params):
    with pytest.raises(ContractError):
        mamba_step(rng.standard_normal(D_M), mamba_params, MambaState(D_E + 1, D_S, K))
    with pytest.raises(ContractError):
        mamba_step(rng.standard_normal(D_M + 2), mamba_params, MambaState(D_E, D_S, K))


# --- sliding-window attention ---------------------------------------------------

def dense_causal_attention(x, p):
    """Independent dense oracle: full causal attention with RoPE, no windowing."""
    n = x.shape[0]
    hq, hkv, hd = p.n_q_heads, p.n_kv_heads, p.head_dim
    g = hq // hkv
    q = (x @ p.w_q_attn.data).reshape(n, hq, hd)
    k = (x @ p.w_k_attn.data).reshape(n, hkv, hd)
    v = (x @ p.w_v_attn.data).reshape(n, hkv, hd)
    if p.rope_enabled:
        half = hd // 2
        inv = p.rope_base ** (-2.0 * np.arange(half) / hd)
        ang = np.arange(n)[:, None] * inv[None, :]
        cos, sin = np.cos(ang), np.sin(ang)
        for arr in (q, k):
            e, o = arr[..., 0::2].copy(), arr[..., 1::2].copy()
            arr[..., 0::2] = e * cos[:, None, :] - o * sin[:, None, :]
            arr[..., 1::2] = e * sin[:, None, :] + o * cos[:, None, :]
    out = np.zeros((n, hq, hd))
    for h in range(hq):
        for i in range(n):
            scores = k[: i + 1, h // g] @ q[i, h] / math.sqrt(hd)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, h] = w @ v[: i + 1, h // g]
    return out.reshape(n, hq * hd) @ p.w_o_attn.data


def test_swa_window_one_attends_to_self(rng):
    p = swa_params(rng, window=1)
    x = rng.standard_normal((6, D_M))
    out = swa_forward(Tensor(x), p).data
    v = (x @ p.w_v_attn.data).reshape(6, 1, 6)
    per_token = np.repeat(v, 2, axis=1).reshape(6, 12) @ p.w_o_attn.data
    np.testing.assert_allclose(out, per_token, atol=1e-12)


def test_swa_large_window_equals_dense_causal(rng):
    n = 14
    p = swa_params(rng, window=n + 3)
    x = rng.standard_normal((n, D_M))
    np.testing.assert_allclose(swa_forward(Tensor(x), p).data,
                               dense_causal_attention(x, p), atol=1e-12)


def test_swa_rope_identity_at_position_zero(rng):
    x = rng.standard_normal((1, D_M))
    p_on = swa_params(rng, window=4, rope=True)
    p_off = init_swa_params(rng, D_M, 2, 1, 6, 4, 10000.0, False, 1.0)
    for f in ("w_q_attn", "w_k_attn", "w_v_attn", "w_o_attn"):
        getattr(p_off, f).data = getattr(p_on, f).data.copy()
    np.testing.assert_allclose(swa_forward(Tensor(x), p_on).data,
                               swa_forward(Tensor(x), p_off).data, atol=1e-15)


def test_swa_streaming_matches_forward(rng):
    n, w = 29, 5
    p = swa_params(rng, window=w)
    x = rng.standard_normal((n, D_M))
    full = swa_forward(Tensor(x), p).data
    cache = KVCache(w, p.n_kv_heads, p.head_dim)
    rows = np.stack([swa_step(x[t], p, cache)[0] for t in range(n)])
    assert np.abs(rows - full).max() < 1e-10


def test_swa_chunked_continuation_matches_full(rng):
    n, w = 26, 6
    p = swa_params(rng, window=w)
    x = rng.standard_normal((n, D_M))
    full = swa_forward(Tensor(x), p).data
    cache = KVCache(w, p.n_kv_heads, p.head_dim)
    parts = []
    pos = 0
    for s in range(0, n, w):
        chunk = x[s : s + w]
        parts.append(swa_forward(Tensor(chunk), p, pos_offset=pos, cache=cache).data)
        pos += len(chunk)
    assert np.abs(np.vstack(parts) - full).max() < 1e-10


def test_kv_cache_capacity_and_eviction(rng):
    w = 4
    p = swa_params(rng, window=w)
    cache = KVCache(w, p.n_kv_heads, p.head_dim)
    for t in range(w + 5):
        swa_step(rng.standard_normal(D_M), p, cache)
    assert cache.count == w
    assert cache.next_pos == w + 5
    assert cache.nbytes() == 2 * p.n_kv_heads * w * p.head_dim * 8


def test_kv_cache_keeps_newest_rows():
    cache = KVCache(3, 1, 2)
    for t in range(5):
        cache.append(np.full((1, 1, 2), float(t)), np.full((1, 1, 2), 10.0 + t))
    k, v = cache.view()
    np.testing.assert_array_equal(k[0, :, 0], [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(v[0, :, 0], [12.0, 13.0, 14.0])


def test_swa_first_step_weight_is_one(rng):
    p = swa_params(rng, window=5)
    x = rng.standard_normal(D_M)
    cache = KVCache(5, p.n_kv_heads, p.head_dim)
    out, _ = swa_step(x, p, cache)
    v = (x @ p.w_v_attn.data).reshape(1, 6)
    np.testing.assert_allclose(out, np.repeat(v, 2, axis=0).reshape(-1) @ p.w_o_attn.data,
                               atol=1e-12)


def test_swa_causality(rng):
    n = 12
    p = swa_params(rng, window=4)
    x = rng.standard_normal((n, D_M))
    base = swa_forward(Tensor(x), p).data
    for t in (0, 5, n - 2):
        x2 = x.copy()
        x2[t + 1 :] += rng.standard_normal((n - t - 1, D_M))
        pert = swa_forward(Tensor(x2), p).data
        np.testing.assert_array_equal(base[: t + 1], pert[: t + 1])


def test_swa_shift_covariance_of_attention_probs(rng):
    n = 10
    p = swa_params(rng, window=4)
    x = rng.standard_normal((n, D_M))
    captured = {0: [], 1: []}
    swa_forward(Tensor(x), p, pos_offset=0, on_probs=captured[0].append)
    swa_forward(Tensor(x), p, pos_offset=57, on_probs=captured[1].append)
    assert len(captured[0]) == len(captured[1]) > 0
    for a, b in zip(captured[0], captured[1]):
        assert np.abs(a - b).max() < 1e-10


def test_swa_pos_offset_contract(rng):
    p = swa_params(rng, window=4)
    with pytest.raises(ContractError):
        swa_forward(Tensor(np.zeros((2, D_M))), p, pos_offset=-1)
    cache = KVCache(4, 1, 6)
    with pytest.raises(ContractError):
        swa_forward(Tensor(np.zeros((2, D_M))), p, pos_offset=3, cache=cache)


def test_swa_step_rejects_wrong_cache_geometry(rng):
    p = swa_params(rng, window=4)
    with pytest.raises(ContractError):
        swa_step(np.zeros(D_M), p, KVCache(5, p.n_kv_heads, p.head_dim))


# --- gated MLP -------------------------------------------------------------

def test_mlp_zero_input(rng):
    p = init_mlp_params(rng, D_M, 7, 1.0)
    out = mlp_forward(Tensor(np.zeros((3, D_M))), p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_mlp_silu_saturation(rng):
    p = init_mlp_params(rng, D_M, 7, 1.0)
    x = 100.0 * np.abs(rng.standard_normal((4, D_M)))
    p.w_gate.data = np.abs(p.w_gate.data)  # large positive pre-activations
    out = mlp_forward(Tensor(x), p).data
    linear = ((x @ p.w_gate.data) * (x @ p.w_up.data)) @ p.w_down.data
    np.testing.assert_allclose(out, linear, rtol=1e-8)


def test_mlp_gradients(rng):
    p = init_mlp_params(rng, 5, 7, 1.0)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    r = rng.standard_normal((3, 5))
    check = fd_check("mlp", lambda: weighted_sum(mlp_forward(x, p), r),
                     [x, p.w_gate, p.w_up, p.w_down], tol=1e-5)
    assert check.ok, check.detail


# --- rotary embedding --------------------------------------------------------

def test_rope_position_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 8)))
    out = rope_apply(x, np.zeros(3), 10000.0)
    np.testing.assert_array_equal(out.data, x.data)


def test_rope_preserves_pair_norms(rng):
    x = Tensor(rng.standard_normal((2, 5, 8)))
    positions = rng.integers(0, 100000, size=5)
    out = rope_apply(x, positions, 10000.0).data
    norms_in = np.hypot(x.data[..., 0::2], x.data[..., 1::2])
    norms_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(norms_in, norms_out, atol=1e-12)


def test_rope_inverse_rotation_recovers_input(rng):
    x = Tensor(rng.standard_normal((1, 4, 6)))
    positions = np.array([3.0, 11.0, 42.0, 1000.0])
    fwd = rope_apply(x, positions, 10000.0)
    back = rope_apply(fwd, -positions, 10000.0).data
    np.testing.assert_allclose(back, x.data, atol=1e-12)


def test_rope_rejects_odd_head_dim(rng):
    with pytest.raises(ContractError):
        rope_apply(Tensor(np.zeros((1, 2, 5))), np.zeros(2), 10000.0)


def test_rope_angle_formula(rng):
    # pair i rotates by pos * base^(-2i/head_dim)
    hd, pos, base = 6, 7.0, 50.0
    x = np.zeros((1, 1, hd))
    x[..., 0::2] = 1.0
    out = rope_apply(Tensor(x), [pos], base).data
    for i in range(hd // 2):
        theta = pos * base ** (-2.0 * i / hd)
        assert abs(out[0, 0, 2 * i] - math.cos(theta)) < 1e-12
        assert abs(out[0, 0, 2 * i + 1] - math.sin(theta)) < 1e-12
