import numpy as np
import pytest

from hybridlab.moe import (
    MoeConfig,
    RouterState,
    init_moe_params,
    moe_forward,
    moe_param_shapes,
    route,
    update_balance,
)
from hybridlab.nn import siglu_ffn
from hybridlab.tensor import DimensionError, Tensor, named_rng, no_grad

TINY = MoeConfig(d_model=6, d_ffn_expert=8, n_experts=4)


def test_route_matches_argmax_oracle():
    rng = named_rng(0, "route")
    scores = rng.normal(size=(32, 4))
    bias = rng.normal(size=4) * 0.1
    got = route(scores, bias)
    want = np.array([int(np.argmax(scores[t] + bias)) for t in range(32)])
    assert np.array_equal(got, want)


def test_route_ties_go_to_the_lowest_index():
    scores = np.array([[0.5, 0.5, 0.5], [0.2, 0.7, 0.7]])
    picked = route(scores, np.zeros(3))
    assert picked.tolist() == [0, 1]


def test_route_rejects_mismatched_bias():
    with pytest.raises(DimensionError):
        route(np.zeros((4, 3)), np.zeros(5))


def test_forward_is_shared_plus_one_gated_expert():
    rng = named_rng(0, "moefwd")
    weights = init_moe_params(TINY, rng)
    state = RouterState.fresh(TINY.n_experts)
    x = rng.normal(size=(2, 3, 6))
    with no_grad():
        out, loads = moe_forward(Tensor(x), weights, TINY, state)

        xf = x.reshape(6, 6)
        scores = 1.0 / (1.0 + np.exp(-(xf @ weights["moe.router"].data)))
        picked = route(scores, state.expert_bias)
        want = siglu_ffn(
            Tensor(xf), weights["moe.shared.gate"], weights["moe.shared.up"],
            weights["moe.shared.down"],
        ).data.copy()
        for t in range(6):
            e = picked[t]
            ye = siglu_ffn(
                Tensor(xf[t : t + 1]), weights[f"moe.expert{e}.gate"],
                weights[f"moe.expert{e}.up"], weights[f"moe.expert{e}.down"],
            ).data[0]
            want[t] += scores[t, e] * ye
    assert np.abs(out.data.reshape(6, 6) - want).max() < 1e-12
    assert loads.sum() == 6
    assert np.array_equal(loads, np.bincount(picked, minlength=4))


def test_gate_uses_unbiased_score():
    # the bias may flip WHICH expert wins, but the gate value is the raw
    # sigmoid score of the winner, not score + bias
    rng = named_rng(0, "gate")
    weights = init_moe_params(TINY, rng)
    x = rng.normal(size=(1, 2, 6))
    state = RouterState.fresh(TINY.n_experts)
    state.expert_bias = np.array([100.0, -100.0, -100.0, -100.0])
    with no_grad():
        out, loads = moe_forward(Tensor(x), weights, TINY, state)
        assert loads[0] == 2  # bias forced expert 0
        xf = x.reshape(2, 6)
        scores = 1.0 / (1.0 + np.exp(-(xf @ weights["moe.router"].data)))
        shared = siglu_ffn(
            Tensor(xf), weights["moe.shared.gate"], weights["moe.shared.up"],
            weights["moe.shared.down"],
        ).data
        y0 = siglu_ffn(
            Tensor(xf), weights["moe.expert0.gate"], weights["moe.expert0.up"],
            weights["moe.expert0.down"],
        ).data
        want = shared + scores[:, :1] * y0
    assert np.abs(out.data.reshape(2, 6) - want).max() < 1e-12


def test_update_balance_sinks_overloaded_experts():
    state = RouterState.fresh(4)
    update_balance(state, np.array([10, 0, 3, 3]), rate=0.01)
    assert state.expert_bias[0] == -0.01   # above the mean -> pushed down
    assert state.expert_bias[1] == 0.01
    assert (state.expert_bias[2:] == 0.01).all()
    assert state.last_load.tolist() == [10, 0, 3, 3]


def test_balance_loop_tames_a_skewed_router():
    # a router with a strongly preferred expert must flatten out
    rng = named_rng(0, "skew")
    n, tokens = 8, 256
    pref = np.zeros(n)
    pref[3] = 2.0
    state = RouterState.fresh(n)
    fracs = []
    for _ in range(800):
        scores = rng.normal(size=(tokens, n)) * 0.3 + pref
        picked = route(scores, state.expert_bias)
        loads = np.bincount(picked, minlength=n)
        update_balance(state, loads, rate=1e-2)
        fracs.append(loads.max() / tokens)
    # single steps are noisy; the settled max-load level is what matters
    assert fracs[0] > 0.5
    assert 0.075 <= np.mean(fracs[-100:]) <= 0.175


def test_param_shapes_include_router_shared_and_experts():
    shapes = moe_param_shapes(TINY)
    assert shapes["moe.router"] == (6, 4)
    assert shapes["moe.shared.gate"] == (6, 8)
    assert shapes["moe.expert3.down"] == (8, 6)
    assert len(shapes) == 1 + 3 + 3 * 4


def test_every_token_activates_exactly_one_routed_expert():
    rng = named_rng(0, "activate")
    weights = init_moe_params(TINY, rng)
    state = RouterState.fresh(TINY.n_experts)
    x = rng.normal(size=(4, 8, 6))
    with no_grad():
        _, loads = moe_forward(Tensor(x), weights, TINY, state)
    assert loads.sum() == 4 * 8
