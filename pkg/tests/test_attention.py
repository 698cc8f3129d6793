import numpy as np
import pytest

from gradcheck import fd_grad_check
from hybridlab.attention import (
    AttnConfig,
    attention_forward,
    attn_param_shapes,
    causal_mask,
    init_attn_params,
    repeat_kv_heads,
    swa_mask,
)
from hybridlab.nn import RopeConfig, apply_rope
from hybridlab.tensor import ContractError, Tensor, named_rng, no_grad

TINY = AttnConfig(d_model=16, n_heads=4, n_kv_heads=2, d_qk=4, d_v=4)
ROPE = RopeConfig(head_dim=4, base=10000.0)


def test_causal_mask_is_lower_triangular():
    m = causal_mask(5)
    assert m.shape == (5, 5)
    assert np.array_equal(m, np.tril(np.ones((5, 5))))


@pytest.mark.parametrize("window,sink", [(3, 0), (3, 2), (1, 1), (8, 2)])
def test_swa_mask_matches_bruteforce_rule(window, sink):
    L = 10
    m = swa_mask(L, window, sink)
    for i in range(L):
        for j in range(L):
            visible = j <= i and (i - j < window or j < sink)
            assert m[i, j] == (1.0 if visible else 0.0), (i, j)


def test_swa_mask_row_budget():
    m = swa_mask(40, 6, 3)
    assert m.sum(axis=1).max() == 6 + 3


def test_param_shapes_cover_gqa():
    shapes = attn_param_shapes(TINY)
    assert shapes["attn.wq"] == (16, 4 * 4)
    assert shapes["attn.wk"] == (16, 2 * 4)
    assert shapes["attn.wv"] == (16, 2 * 4)
    assert shapes["attn.wo"] == (4 * 4, 16)


def test_group_size_contract():
    assert TINY.group_size == 2
    with pytest.raises(ContractError):
        AttnConfig(d_model=16, n_heads=4, n_kv_heads=3, d_qk=4, d_v=4)


def test_repeat_kv_heads_tiles_groups():
    t = Tensor(np.arange(2 * 3 * 2 * 4, dtype=np.float64).reshape(2, 3, 2, 4))
    r = repeat_kv_heads(t, 2).data
    assert r.shape == (2, 3, 4, 4)
    assert np.array_equal(r[:, :, 0], r[:, :, 1])
    assert np.array_equal(r[:, :, 2], r[:, :, 3])
    assert np.array_equal(r[:, :, 0], t.data[:, :, 0])


def test_forward_matches_naive_reference():
    # no grouping, so the reference is a plain softmax attention per head
    cfg = AttnConfig(d_model=8, n_heads=2, n_kv_heads=2, d_qk=4, d_v=4)
    rope = RopeConfig(head_dim=4, base=10000.0)
    rng = named_rng(0, "ref")
    weights = init_attn_params(cfg, rng)
    x = rng.normal(size=(1, 6, 8))
    with no_grad():
        got = attention_forward(Tensor(x), weights, cfg, rope, np.arange(6)).data

    q = (x @ weights["attn.wq"].data).reshape(1, 6, 2, 4)
    k = (x @ weights["attn.wk"].data).reshape(1, 6, 2, 4)
    v = (x @ weights["attn.wv"].data).reshape(1, 6, 2, 4)
    with no_grad():
        q = apply_rope(Tensor(q), rope, np.arange(6)).data
        k = apply_rope(Tensor(k), rope, np.arange(6)).data
    ctx = np.zeros((1, 6, 2, 4))
    for h in range(2):
        s = q[0, :, h] @ k[0, :, h].T / np.sqrt(4)
        s = np.where(np.tril(np.ones((6, 6))) > 0, s, -np.inf)
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        ctx[0, :, h] = p @ v[0, :, h]
    want = ctx.reshape(1, 6, 8) @ weights["attn.wo"].data
    assert np.abs(got - want).max() < 1e-12


def test_mutating_a_future_token_never_changes_the_past():
    rng = named_rng(0, "mut")
    weights = init_attn_params(TINY, rng)
    x = rng.normal(size=(1, 8, 16))
    with no_grad():
        base = attention_forward(Tensor(x), weights, TINY, ROPE, np.arange(8)).data
        x2 = x.copy()
        x2[0, 5] += 10.0
        out = attention_forward(Tensor(x2), weights, TINY, ROPE, np.arange(8)).data
    assert np.array_equal(out[:, :5], base[:, :5])  # bitwise
    assert not np.allclose(out[:, 5:], base[:, 5:])


def test_swa_restricts_reach_beyond_window():
    # with window 2, sink 0: moving token 0 cannot affect token 4
    cfg = AttnConfig(d_model=8, n_heads=2, n_kv_heads=2, d_qk=4, d_v=4)
    rope = RopeConfig(head_dim=4, base=10000.0)
    rng = named_rng(0, "swamut")
    weights = init_attn_params(cfg, rng)
    x = rng.normal(size=(1, 6, 8))
    mask = swa_mask(6, 2, 0)
    with no_grad():
        base = attention_forward(Tensor(x), weights, cfg, rope, np.arange(6), mask=mask).data
        x2 = x.copy()
        x2[0, 0] += 5.0
        out = attention_forward(Tensor(x2), weights, cfg, rope, np.arange(6), mask=mask).data
    assert np.array_equal(out[:, 2:], base[:, 2:])
    assert not np.allclose(out[:, 0], base[:, 0])


def test_attention_gradients():
    rng = named_rng(0, "attngrad")
    cfg = AttnConfig(d_model=6, n_heads=2, n_kv_heads=1, d_qk=4, d_v=4)
    rope = RopeConfig(head_dim=4, base=100.0)
    weights = init_attn_params(cfg, rng)
    x = rng.normal(size=(1, 4, 6))

    def loss_fn():
        y = attention_forward(Tensor(x), weights, cfg, rope, np.arange(4))
        return (y * y).sum()

    fd_grad_check(loss_fn, weights, named_rng(1, "c"), coords_per_tensor=3)
