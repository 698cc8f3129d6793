"""Shared network primitives: norms, gated FFN, rotary embedding, init.

Conventions used by every model in the package:

* projections are stored as (d_in, d_out) matrices applied as ``x @ W``,
  bias-free unless stated otherwise;
* all norms use eps = 1e-5 inside the square root;
* rotary embedding rotates adjacent channel pairs (2i, 2i+1) by
  ``pos * base**(-2i/d)`` and is applied at absolute positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    matmul,
    silu,
    sqrt,
    square,
    tmean,
)

NORM_EPS = 1e-5


@dataclass(frozen=True)
class FFNConfig:
    d_model: int
    d_ffn: int


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 500000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ContractError(f"rotary head_dim must be even, got {self.head_dim}")


def param(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    """Gaussian parameter tensor with requires_grad set."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def proj_init(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    return param(rng, (d_in, d_out), d_in ** -0.5)


def rms_norm(x: Tensor, weight: Tensor, eps: float = NORM_EPS) -> Tensor:
    """x * rsqrt(mean(x^2) + eps) * weight over the last dim."""
    if weight.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm weight {weight.shape} vs features {x.shape[-1]}")
    ms = tmean(square(x), axis=-1, keepdims=True)
    return x / sqrt(ms + eps) * weight


def group_norm_per_head(x: Tensor, weight: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Zero-mean unit-variance per (position, head) with per-head affine.

    x: (..., n_heads, head_dim); weight: (n_heads, head_dim). A constant
    head normalizes to zeros (variance floor eps), never to NaN.
    """
    if x.ndim < 2:
        raise DimensionError("group_norm_per_head needs (..., heads, head_dim)")
    if weight.shape != x.shape[-2:]:
        raise DimensionError(f"group norm weight {weight.shape} vs heads {x.shape[-2:]}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(square(centered), axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * weight


def siglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """down( silu(x @ gate) * (x @ up) )."""
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


def ffn_param_shapes(cfg: FFNConfig, prefix: str = "ffn") -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.gate": (cfg.d_model, cfg.d_ffn),
        f"{prefix}.up": (cfg.d_model, cfg.d_ffn),
        f"{prefix}.down": (cfg.d_ffn, cfg.d_model),
    }


def rope_angles(cfg: RopeConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for integer positions, shape (len(positions), d/2)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = cfg.head_dim // 2
    inv_freq = cfg.base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    theta = positions[..., None] * inv_freq
    return np.cos(theta), np.sin(theta)


def apply_rope(x: Tensor, cfg: RopeConfig, positions: np.ndarray) -> Tensor:
    """Rotate (..., seq, n_heads, head_dim) at the given absolute positions.

    positions has shape (seq,). Pair (2i, 2i+1) rotates by angle
    pos * base**(-2i/head_dim); position 0 is the identity.
    """
    if x.shape[-1] != cfg.head_dim:
        raise DimensionError(f"rope head_dim {cfg.head_dim} vs input {x.shape[-1]}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or x.shape[-3] != positions.shape[0]:
        raise DimensionError("positions must be 1-d and match the sequence axis")
    cos, sin = rope_angles(cfg, positions)          # (seq, d/2)
    cos = cos[:, None, :]                           # broadcast over heads
    sin = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    # re-interleave: stack on a trailing axis then flatten the last two
    stacked = concat([r_even.reshape(*r_even.shape, 1), r_odd.reshape(*r_odd.shape, 1)], axis=-1)
    return stacked.reshape(*x.shape)
