"""Causal self-attention with grouped KV heads, full-context or windowed.

The windowed variant keeps a block of always-visible sink positions at
the start of the sequence plus a sliding window of the most recent
positions, so its state is bounded by window + sink entries no matter
how long the sequence grows. Masks are plain boolean numpy arrays;
masked lanes get exactly-zero attention weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import RopeConfig, apply_rope, proj_init
from .tensor import ContractError, DimensionError, Tensor, masked_softmax_lastdim, matmul


@dataclass(frozen=True)
class AttnConfig:
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_qk: int
    d_v: int

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ContractError(
                f"n_heads {self.n_heads} not a multiple of n_kv_heads {self.n_kv_heads}"
            )

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


def causal_mask(seq_len: int) -> np.ndarray:
    """(L, L) boolean, True where key position j is visible to query i."""
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def swa_mask(seq_len: int, window: int, sink: int) -> np.ndarray:
    """Causal sliding-window mask with always-visible sink positions.

    Visible(i, j) iff j <= i and (i - j < window or j < sink). Every
    query sees at most window + sink keys.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    if sink < 0:
        raise ContractError("sink must be >= 0")
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    return (j <= i) & ((i - j < window) | (j < sink))


def attn_param_shapes(cfg: AttnConfig, prefix: str = "attn") -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.wq": (cfg.d_model, cfg.n_heads * cfg.d_qk),
        f"{prefix}.wk": (cfg.d_model, cfg.n_kv_heads * cfg.d_qk),
        f"{prefix}.wv": (cfg.d_model, cfg.n_kv_heads * cfg.d_v),
        f"{prefix}.wo": (cfg.n_heads * cfg.d_v, cfg.d_model),
    }


def init_attn_params(cfg: AttnConfig, rng: np.random.Generator, prefix: str = "attn") -> dict[str, Tensor]:
    return {
        name: proj_init(rng, shape[0], shape[1])
        for name, shape in attn_param_shapes(cfg, prefix).items()
    }


def repeat_kv_heads(t: Tensor, group_size: int) -> Tensor:
    """(B, L, n_kv, d) -> (B, L, n_kv * group_size, d), grouped order."""
    if group_size == 1:
        return t
    b, l, kv, d = t.shape
    ones = Tensor(np.ones((1, 1, 1, group_size, 1)))
    return (t.reshape(b, l, kv, 1, d) * ones).reshape(b, l, kv * group_size, d)


def attention_scores(q: Tensor, k: Tensor, mask: np.ndarray) -> Tensor:
    """Masked softmax of scaled q @ k^T; q, k are (B, H, L, d_qk)."""
    d_qk = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (d_qk ** -0.5)
    return masked_softmax_lastdim(scores, mask)


def attention_context(
    x: Tensor,
    weights: dict[str, Tensor],
    cfg: AttnConfig,
    rope: RopeConfig,
    positions: np.ndarray,
    mask: np.ndarray | None = None,
    prefix: str = "attn",
) -> Tensor:
    """Per-head context before the output projection.

    x (B, L, d_model) -> (B, L, n_heads, d_v). `mask` defaults to plain
    causal; pass `swa_mask(...)` for the windowed variant. `positions`
    are the absolute positions of the L tokens (rotary embedding is
    position-absolute).
    """
    if x.ndim != 3:
        raise DimensionError(f"attention expects (batch, seq, d_model), got {x.shape}")
    b, l, d = x.shape
    if d != cfg.d_model:
        raise DimensionError(f"d_model mismatch: config {cfg.d_model}, input {d}")
    if mask is None:
        mask = causal_mask(l)

    wq, wk = weights[f"{prefix}.wq"], weights[f"{prefix}.wk"]
    wv = weights[f"{prefix}.wv"]

    q = matmul(x, wq).reshape(b, l, cfg.n_heads, cfg.d_qk)
    k = matmul(x, wk).reshape(b, l, cfg.n_kv_heads, cfg.d_qk)
    v = matmul(x, wv).reshape(b, l, cfg.n_kv_heads, cfg.d_v)

    q = apply_rope(q, rope, positions)
    k = apply_rope(k, rope, positions)
    k = repeat_kv_heads(k, cfg.group_size)
    v = repeat_kv_heads(v, cfg.group_size)

    q = q.swapaxes(1, 2)                      # (B, H, L, d_qk)
    k = k.swapaxes(1, 2)
    v = v.swapaxes(1, 2)

    probs = attention_scores(q, k, mask)      # (B, H, L, L)
    ctx = matmul(probs, v)                    # (B, H, L, d_v)
    return ctx.swapaxes(1, 2)                 # (B, L, H, d_v)


def attention_forward(
    x: Tensor,
    weights: dict[str, Tensor],
    cfg: AttnConfig,
    rope: RopeConfig,
    positions: np.ndarray,
    mask: np.ndarray | None = None,
    prefix: str = "attn",
) -> Tensor:
    """Full block pass: x (B, L, d_model) -> (B, L, d_model)."""
    ctx = attention_context(x, weights, cfg, rope, positions, mask, prefix)
    b, l = x.shape[0], x.shape[1]
    ctx = ctx.reshape(b, l, cfg.n_heads * cfg.d_v)
    return matmul(ctx, weights[f"{prefix}.wo"])
