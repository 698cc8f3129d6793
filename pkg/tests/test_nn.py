import numpy as np
import pytest

from gradcheck import fd_grad_check
from hybridlab.nn import (
    NORM_EPS,
    FFNConfig,
    RopeConfig,
    apply_rope,
    ffn_param_shapes,
    group_norm_per_head,
    param,
    proj_init,
    rms_norm,
    rope_angles,
    siglu_ffn,
)
from hybridlab.tensor import ContractError, Tensor, named_rng, no_grad


def test_rms_norm_produces_unit_rms():
    rng = named_rng(0, "rms")
    x = Tensor(rng.normal(size=(3, 5, 8)) * 4)
    w = Tensor(np.ones(8))
    y = rms_norm(x, w).data
    rms = np.sqrt((y ** 2).mean(-1))
    assert np.allclose(rms, 1.0, atol=1e-4)


def test_rms_norm_eps_keeps_zero_input_finite():
    y = rms_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(4))).data
    assert np.allclose(y, 0.0)
    assert NORM_EPS == 1e-5


def test_rms_norm_gradients():
    rng = named_rng(0, "rmsgrad")
    params = {
        "x": Tensor(rng.normal(size=(2, 6)), requires_grad=True),
        "w": Tensor(rng.normal(size=(6,)), requires_grad=True),
    }
    def loss_fn():
        y = rms_norm(params["x"], params["w"])
        return (y * y).sum()

    fd_grad_check(loss_fn, params, named_rng(1, "c"), coords_per_tensor=4)


def test_group_norm_normalizes_each_head():
    rng = named_rng(0, "gn")
    x = Tensor(rng.normal(size=(2, 3, 4, 6)) * 3 + 1)
    w = Tensor(np.ones((4, 6)))
    y = group_norm_per_head(x, w).data
    assert np.allclose(y.mean(-1), 0.0, atol=1e-10)
    assert np.allclose(y.var(-1), 1.0, atol=1e-3)


def test_group_norm_weight_is_per_head():
    rng = named_rng(0, "gnw")
    x = Tensor(rng.normal(size=(1, 2, 2, 4)))
    w = np.ones((2, 4))
    w[1] = 5.0
    y = group_norm_per_head(x, Tensor(w)).data
    base = group_norm_per_head(x, Tensor(np.ones((2, 4)))).data
    assert np.allclose(y[..., 0, :], base[..., 0, :])
    assert np.allclose(y[..., 1, :], 5.0 * base[..., 1, :])


def test_siglu_ffn_matches_reference():
    rng = named_rng(0, "ffn")
    x = rng.normal(size=(2, 3, 4))
    wg, wu, wd = rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(6, 4))
    with no_grad():
        y = siglu_ffn(Tensor(x), Tensor(wg), Tensor(wu), Tensor(wd)).data
    g = x @ wg
    want = ((g / (1 + np.exp(-g))) * (x @ wu)) @ wd
    assert np.allclose(y, want, atol=1e-12)


def test_ffn_param_shapes():
    shapes = ffn_param_shapes(FFNConfig(d_model=8, d_ffn=24))
    assert shapes == {"ffn.gate": (8, 24), "ffn.up": (8, 24), "ffn.down": (24, 8)}


def test_rope_default_base_and_even_dim_contract():
    assert RopeConfig(head_dim=8).base == 500000.0
    with pytest.raises(ContractError):
        RopeConfig(head_dim=7)


def test_rope_preserves_vector_norms():
    rng = named_rng(0, "rope")
    cfg = RopeConfig(head_dim=16, base=10000.0)
    x = Tensor(rng.normal(size=(1, 5, 2, 16)))
    y = apply_rope(x, cfg, np.arange(5)).data
    assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x.data, axis=-1))


def test_rope_position_zero_is_identity():
    rng = named_rng(0, "rope0")
    cfg = RopeConfig(head_dim=8, base=10000.0)
    x = Tensor(rng.normal(size=(1, 1, 1, 8)))
    y = apply_rope(x, cfg, np.array([0])).data
    assert np.allclose(y, x.data)


def test_rope_scores_depend_only_on_distance():
    # q . k after rotation must be invariant to a shared position shift
    rng = named_rng(0, "ropeshift")
    cfg = RopeConfig(head_dim=8, base=10000.0)
    q = Tensor(rng.normal(size=(1, 1, 1, 8)))
    k = Tensor(rng.normal(size=(1, 1, 1, 8)))

    def score(pq, pk):
        rq = apply_rope(q, cfg, np.array([pq])).data.reshape(8)
        rk = apply_rope(k, cfg, np.array([pk])).data.reshape(8)
        return float(rq @ rk)

    assert abs(score(7, 3) - score(107, 103)) < 1e-10


def test_rope_rotates_adjacent_pairs():
    # pair (0, 1) at position p rotates by exactly angle p (frequency 1)
    cfg = RopeConfig(head_dim=4, base=10000.0)
    x = np.zeros((1, 1, 1, 4))
    x[..., 0] = 1.0
    y = apply_rope(Tensor(x), cfg, np.array([2])).data.reshape(4)
    assert abs(y[0] - np.cos(2.0)) < 1e-12
    assert abs(y[1] - np.sin(2.0)) < 1e-12


def test_rope_angles_shapes():
    cos, sin = rope_angles(RopeConfig(head_dim=10), np.arange(7))
    assert cos.shape == (7, 5) and sin.shape == (7, 5)
    assert np.allclose(cos ** 2 + sin ** 2, 1.0)


def test_rope_gradients():
    rng = named_rng(0, "ropegrad")
    cfg = RopeConfig(head_dim=4, base=100.0)
    params = {"x": Tensor(rng.normal(size=(1, 3, 2, 4)), requires_grad=True)}
    fd_grad_check(
        lambda: (apply_rope(params["x"], cfg, np.arange(3)) * apply_rope(params["x"], cfg, np.arange(3))).sum(),
        params, named_rng(1, "c"), coords_per_tensor=6,
    )


def test_proj_init_scales_with_fan_in():
    rng = named_rng(0, "init")
    w = proj_init(rng, 400, 50)
    assert w.requires_grad
    assert abs(w.data.std() - 400 ** -0.5) < 0.01


def test_param_marks_requires_grad():
    p = param(named_rng(0, "p"), (3, 3), 0.1)
    assert p.requires_grad and p.shape == (3, 3)
