"""Mixture-of-experts FFN: one always-on shared expert plus top-1 routing.

Routing is sigmoid-scored with a loss-free balancing bias: expert
selection is argmax(score + bias) (ties to the lowest index), but the
gate that scales the chosen expert's output is the raw, unbiased score,
so the bias steers traffic without touching the math of the forward
value. The bias is a buffer, not a parameter: it is updated by a sign
rule on observed batch loads and receives no gradient.

Experts (shared and routed alike) are half-width relative to the dense
FFN they replace, so shared + one routed expert costs the same as the
dense layer it stands in for. Expert evaluation below is dense-masked
(every expert with traffic runs on the full token batch and is masked
to its own tokens); the values are exactly those of subset dispatch,
which is the accounting the cost model uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import proj_init, siglu_ffn
from .tensor import ContractError, DimensionError, Tensor, matmul, sigmoid

BALANCE_RATE = 1e-3


@dataclass(frozen=True)
class MoeConfig:
    d_model: int
    d_ffn_expert: int
    n_experts: int = 8
    balance_rate: float = BALANCE_RATE

    def __post_init__(self):
        if self.n_experts < 1:
            raise ContractError("need at least one routed expert")


@dataclass
class RouterState:
    """Balancing bias and the most recent batch's expert loads."""

    expert_bias: np.ndarray
    last_load: np.ndarray

    @classmethod
    def fresh(cls, n_experts: int) -> "RouterState":
        return cls(
            expert_bias=np.zeros(n_experts, dtype=np.float64),
            last_load=np.zeros(n_experts, dtype=np.int64),
        )


def moe_param_shapes(cfg: MoeConfig, prefix: str = "moe") -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        f"{prefix}.router": (cfg.d_model, cfg.n_experts),
        f"{prefix}.shared.gate": (cfg.d_model, cfg.d_ffn_expert),
        f"{prefix}.shared.up": (cfg.d_model, cfg.d_ffn_expert),
        f"{prefix}.shared.down": (cfg.d_ffn_expert, cfg.d_model),
    }
    for e in range(cfg.n_experts):
        shapes[f"{prefix}.expert{e}.gate"] = (cfg.d_model, cfg.d_ffn_expert)
        shapes[f"{prefix}.expert{e}.up"] = (cfg.d_model, cfg.d_ffn_expert)
        shapes[f"{prefix}.expert{e}.down"] = (cfg.d_ffn_expert, cfg.d_model)
    return shapes


def init_moe_params(cfg: MoeConfig, rng: np.random.Generator, prefix: str = "moe") -> dict[str, Tensor]:
    return {
        name: proj_init(rng, shape[0], shape[1])
        for name, shape in moe_param_shapes(cfg, prefix).items()
    }


def route(scores: np.ndarray, expert_bias: np.ndarray) -> np.ndarray:
    """Selected expert per token: argmax(score + bias), ties -> lowest index.

    Pure numpy on score values; the selection itself carries no gradient.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[1] != expert_bias.shape[0]:
        raise DimensionError(f"scores {scores.shape} vs bias {expert_bias.shape}")
    return np.argmax(scores + expert_bias[None, :], axis=1)


def update_balance(state: RouterState, loads: np.ndarray, rate: float = BALANCE_RATE) -> None:
    """bias_e += rate * sign(mean_load - load_e); overloaded experts sink."""
    loads = np.asarray(loads, dtype=np.float64)
    state.expert_bias = state.expert_bias + rate * np.sign(loads.mean() - loads)
    state.last_load = loads.astype(np.int64)


def moe_forward(
    x: Tensor,
    weights: dict[str, Tensor],
    cfg: MoeConfig,
    state: RouterState,
    prefix: str = "moe",
) -> tuple[Tensor, np.ndarray]:
    """(B, L, d_model) -> (B, L, d_model) plus per-expert token loads.

    out = shared(x) + gate * expert_selected(x); gate is the unbiased
    sigmoid score of the selected expert.
    """
    if x.ndim != 3:
        raise DimensionError(f"moe expects (batch, seq, d_model), got {x.shape}")
    b, l, d = x.shape
    tokens = b * l
    xf = x.reshape(tokens, d)

    scores = sigmoid(matmul(xf, weights[f"{prefix}.router"]))       # (T, E)
    selected = route(scores.data, state.expert_bias)                # (T,)
    gates = scores[np.arange(tokens), selected].reshape(tokens, 1)  # (T, 1)

    out = siglu_ffn(
        xf,
        weights[f"{prefix}.shared.gate"],
        weights[f"{prefix}.shared.up"],
        weights[f"{prefix}.shared.down"],
    )
    for e in range(cfg.n_experts):
        picked = selected == e
        if not picked.any():
            continue
        indicator = Tensor(picked[:, None].astype(np.float64))
        ye = siglu_ffn(
            xf,
            weights[f"{prefix}.expert{e}.gate"],
            weights[f"{prefix}.expert{e}.up"],
            weights[f"{prefix}.expert{e}.down"],
        )
        out = out + ye * (gates * indicator)

    loads = np.bincount(selected, minlength=cfg.n_experts)
    return out.reshape(b, l, d), loads
