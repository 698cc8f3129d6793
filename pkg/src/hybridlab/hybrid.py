"""Intra-layer hybrid mixer: half-width attention and SSM branches, fused.

The block splits its heads between a grouped-query attention branch and
a selective-SSM branch running in parallel on the same input. Both
branches produce per-head contexts of the same head width
``d_fuse = d_model / n_half``: the attention branch queries and keys at
a reduced ``d_qk`` while its values are expanded back to ``d_fuse``;
the SSM branch runs its native heads at ``d_fuse`` channels. A
``FusionSpec`` then picks one cell of the combination matrix:

  norm      none | group         per-branch per-head normalization
  scalar    none | scale | gate | diff_lambda
  fusion    add | diff | concat
  out_projs 1 | 2               fuse-then-project vs project-then-fuse

``diff_lambda`` scales the SSM branch by the reparameterized scalar
lambda = exp(lq1.lk1) - exp(lq2.lk2) + lambda_init before fusing, with
lambda_init decaying toward 0.8 with depth. With two output
projections the branches are fused after each is mapped to d_model, so
any dim ratio is legal; with one projection, add/diff require the
branch widths to match and concat projects the doubled width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttnConfig, attention_context, attn_param_shapes, init_attn_params
from .nn import RopeConfig, group_norm_per_head, param, proj_init
from .ssm import (
    SsmConfig,
    SsmState,
    conv_tail,
    init_ssm_params,
    ssm_featurize,
    ssm_param_shapes,
    ssm_scan,
    ssm_step_core,
    ssm_step_featurize,
)
from .tensor import ContractError, Tensor, concat, exp, matmul, sigmoid, silu, tsum

NORMS = ("none", "group")
SCALARS = ("none", "scale", "gate", "diff_lambda")
FUSIONS = ("add", "diff", "concat")


@dataclass(frozen=True)
class FusionSpec:
    norm: str = "group"
    scalar: str = "none"
    fusion: str = "diff"
    out_projs: int = 2

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ContractError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.scalar not in SCALARS:
            raise ContractError(f"scalar must be one of {SCALARS}, got {self.scalar!r}")
        if self.fusion not in FUSIONS:
            raise ContractError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.out_projs not in (1, 2):
            raise ContractError(f"out_projs must be 1 or 2, got {self.out_projs}")
        if self.fusion == "concat" and self.out_projs != 1:
            raise ContractError("concat fuses before the single output projection")


def legal_fusion_specs() -> list[FusionSpec]:
    """Every legal cell of the fusion combination matrix."""
    cells = []
    for norm in NORMS:
        for scalar in SCALARS:
            for fusion in FUSIONS:
                for out in (1, 2):
                    if fusion == "concat" and out != 1:
                        continue
                    cells.append(FusionSpec(norm, scalar, fusion, out))
    return cells


# named rows of the published variant matrix, for presets and the CLI
FUSION_PRESETS = {
    "best": FusionSpec("group", "none", "diff", 2),
    "hymba": FusionSpec("group", "scale", "add", 1),
    "concat": FusionSpec("none", "none", "concat", 1),
    "diff-t": FusionSpec("none", "diff_lambda", "diff", 1),
    "diff-m": FusionSpec("none", "diff_lambda", "diff", 2),
}


def default_lambda_init(layer_index: int) -> float:
    """Depth-dependent lambda_init for the diff_lambda scalar."""
    return 0.8 - 0.6 * math.exp(-0.3 * layer_index)


@dataclass(frozen=True)
class IntraHybridConfig:
    """Dims of one intra-layer hybrid block.

    n_heads / n_kv_heads / d_ssm are the full-block reference counts;
    each branch gets half (n_half query heads, n_kv halved with a floor
    of 1, d_ssm scaled by the dim ratio). dim_ratio is the
    (attention, ssm) width split, normalized internally; 1:1 puts
    d_qk at half the fused head width and the SSM branch at half the
    reference d_ssm.
    """

    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ssm: int
    d_state: int
    n_conv: int
    n_groups: int = 1
    dim_ratio: tuple[float, float] = (1.0, 1.0)
    rope_base: float = 500000.0

    def __post_init__(self):
        if self.n_heads % 2 != 0 or self.n_heads < 2:
            raise ContractError("intra-hybrid needs an even head count >= 2")
        if self.d_model % (self.n_heads // 2) != 0:
            raise ContractError("d_model must divide evenly into n_heads/2 fused heads")
        a, s = self.dim_ratio
        if a < 0 or s <= 0:
            raise ContractError("dim_ratio parts must be positive (ssm side nonzero)")

    @property
    def n_half(self) -> int:
        return self.n_heads // 2

    @property
    def d_fuse(self) -> int:
        return self.d_model // self.n_half

    @property
    def ratio(self) -> tuple[float, float]:
        a, s = self.dim_ratio
        return a / (a + s), s / (a + s)

    @property
    def d_qk(self) -> int:
        frac = self.ratio[0]
        return max(2, 2 * round(frac * self.d_fuse / 2))

    @property
    def d_ssm_branch(self) -> int:
        frac = self.ratio[1]
        return max(self.d_fuse, round(frac * self.d_ssm / self.d_fuse) * self.d_fuse)

    @property
    def attn_cfg(self) -> AttnConfig:
        return AttnConfig(
            d_model=self.d_model,
            n_heads=self.n_half,
            n_kv_heads=max(1, self.n_kv_heads // 2),
            d_qk=self.d_qk,
            d_v=self.d_fuse,
        )

    @property
    def ssm_cfg(self) -> SsmConfig:
        return SsmConfig(
            d_model=self.d_model,
            d_ssm=self.d_ssm_branch,
            d_head=self.d_fuse,
            d_state=self.d_state,
            n_conv=self.n_conv,
            n_groups=self.n_groups,
            gated_norm=False,
        )

    @property
    def rope_cfg(self) -> RopeConfig:
        return RopeConfig(head_dim=self.d_qk, base=self.rope_base)

    def validate_fusion(self, spec: FusionSpec) -> None:
        if spec.out_projs == 1 and spec.fusion in ("add", "diff"):
            attn_w = self.n_half * self.d_fuse
            if attn_w != self.d_ssm_branch:
                raise ContractError(
                    f"{spec.fusion} with one projection needs equal branch widths, "
                    f"got attention {attn_w} vs ssm {self.d_ssm_branch}; "
                    "use out_projs=2 or a 1:1 dim ratio"
                )


def fused_width(icfg: IntraHybridConfig, spec: FusionSpec) -> int:
    """Width entering the single output projection (out_projs=1)."""
    attn_w = icfg.n_half * icfg.d_fuse
    return attn_w + icfg.d_ssm_branch if spec.fusion == "concat" else attn_w


def intra_param_shapes(
    icfg: IntraHybridConfig, spec: FusionSpec, prefix: str = "intra"
) -> dict[str, tuple[int, ...]]:
    icfg.validate_fusion(spec)
    shapes = attn_param_shapes(icfg.attn_cfg, f"{prefix}.attn")
    shapes.pop(f"{prefix}.attn.wo")
    shapes.update(ssm_param_shapes(icfg.ssm_cfg, f"{prefix}.ssm"))
    shapes.pop(f"{prefix}.ssm.out_proj")

    h_attn, h_ssm = icfg.n_half, icfg.d_ssm_branch // icfg.d_fuse
    if spec.norm == "group":
        shapes[f"{prefix}.norm_attn.weight"] = (h_attn, icfg.d_fuse)
        shapes[f"{prefix}.norm_ssm.weight"] = (h_ssm, icfg.d_fuse)
    if spec.scalar == "scale":
        shapes[f"{prefix}.scale_attn"] = (1,)
        shapes[f"{prefix}.scale_ssm"] = (1,)
    elif spec.scalar == "gate":
        shapes[f"{prefix}.gate_attn"] = (h_attn,)
        shapes[f"{prefix}.gate_ssm"] = (h_ssm,)
    elif spec.scalar == "diff_lambda":
        for name in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
            shapes[f"{prefix}.{name}"] = (icfg.d_fuse,)

    if spec.out_projs == 1:
        shapes[f"{prefix}.wo"] = (fused_width(icfg, spec), icfg.d_model)
    else:
        shapes[f"{prefix}.wo_attn"] = (h_attn * icfg.d_fuse, icfg.d_model)
        shapes[f"{prefix}.wo_ssm"] = (icfg.d_ssm_branch, icfg.d_model)
    return shapes


def init_intra_params(
    icfg: IntraHybridConfig,
    spec: FusionSpec,
    rng: np.random.Generator,
    prefix: str = "intra",
) -> dict[str, Tensor]:
    icfg.validate_fusion(spec)
    params = init_attn_params(icfg.attn_cfg, rng, f"{prefix}.attn")
    params.pop(f"{prefix}.attn.wo")
    params.update(init_ssm_params(icfg.ssm_cfg, rng, f"{prefix}.ssm"))
    params.pop(f"{prefix}.ssm.out_proj")

    h_attn, h_ssm = icfg.n_half, icfg.d_ssm_branch // icfg.d_fuse
    if spec.norm == "group":
        params[f"{prefix}.norm_attn.weight"] = Tensor(np.ones((h_attn, icfg.d_fuse)), requires_grad=True)
        params[f"{prefix}.norm_ssm.weight"] = Tensor(np.ones((h_ssm, icfg.d_fuse)), requires_grad=True)
    if spec.scalar == "scale":
        params[f"{prefix}.scale_attn"] = Tensor(np.ones(1), requires_grad=True)
        params[f"{prefix}.scale_ssm"] = Tensor(np.ones(1), requires_grad=True)
    elif spec.scalar == "gate":
        params[f"{prefix}.gate_attn"] = Tensor(np.zeros(h_attn), requires_grad=True)
        params[f"{prefix}.gate_ssm"] = Tensor(np.zeros(h_ssm), requires_grad=True)
    elif spec.scalar == "diff_lambda":
        for name in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
            params[f"{prefix}.{name}"] = param(rng, (icfg.d_fuse,), 0.1)

    if spec.out_projs == 1:
        params[f"{prefix}.wo"] = proj_init(rng, fused_width(icfg, spec), icfg.d_model)
    else:
        params[f"{prefix}.wo_attn"] = proj_init(rng, h_attn * icfg.d_fuse, icfg.d_model)
        params[f"{prefix}.wo_ssm"] = proj_init(rng, icfg.d_ssm_branch, icfg.d_model)
    return params


def diff_lambda_value(weights: dict[str, Tensor], lambda_init: float, prefix: str = "intra") -> Tensor:
    """Scalar lambda = exp(lq1.lk1) - exp(lq2.lk2) + lambda_init."""
    l1 = exp(tsum(weights[f"{prefix}.lambda_q1"] * weights[f"{prefix}.lambda_k1"]))
    l2 = exp(tsum(weights[f"{prefix}.lambda_q2"] * weights[f"{prefix}.lambda_k2"]))
    return l1 - l2 + lambda_init


def fuse_branches(
    a: Tensor,
    m: Tensor,
    weights: dict[str, Tensor],
    icfg: IntraHybridConfig,
    spec: FusionSpec,
    lambda_init: float = 0.5,
    prefix: str = "intra",
) -> Tensor:
    """Norm, scalar, fusion, projection. a (B,L,Ha,df), m (B,L,Hm,df)."""
    b, l = a.shape[0], a.shape[1]
    if spec.norm == "group":
        a = group_norm_per_head(a, weights[f"{prefix}.norm_attn.weight"])
        m = group_norm_per_head(m, weights[f"{prefix}.norm_ssm.weight"])
    if spec.scalar == "scale":
        a = a * weights[f"{prefix}.scale_attn"]
        m = m * weights[f"{prefix}.scale_ssm"]
    elif spec.scalar == "gate":
        ha, hm = a.shape[2], m.shape[2]
        a = a * sigmoid(weights[f"{prefix}.gate_attn"]).reshape(1, 1, ha, 1)
        m = m * sigmoid(weights[f"{prefix}.gate_ssm"]).reshape(1, 1, hm, 1)
    elif spec.scalar == "diff_lambda":
        m = m * diff_lambda_value(weights, lambda_init, prefix)

    flat_a = a.reshape(b, l, a.shape[2] * a.shape[3])
    flat_m = m.reshape(b, l, m.shape[2] * m.shape[3])
    if spec.out_projs == 1:
        if spec.fusion == "concat":
            fused = concat([flat_a, flat_m], axis=-1)
        elif spec.fusion == "add":
            fused = flat_a + flat_m
        else:
            fused = flat_a - flat_m
        return matmul(fused, weights[f"{prefix}.wo"])
    ya = matmul(flat_a, weights[f"{prefix}.wo_attn"])
    ym = matmul(flat_m, weights[f"{prefix}.wo_ssm"])
    return ya + ym if spec.fusion == "add" else ya - ym


def ssm_branch_context(
    x: Tensor,
    weights: dict[str, Tensor],
    scfg: SsmConfig,
    chunk: int = 16,
    prefix: str = "intra.ssm",
) -> Tensor:
    """SSM half: featurize, scan, silu(z) gate; no norm weight, no proj.

    Returns per-head contexts (B, L, H_ssm, d_fuse).
    """
    z, xs, bm, cm, dt, _ = ssm_featurize(x, weights, scfg, prefix)
    y = ssm_scan(xs, dt, bm, cm, weights[f"{prefix}.A_log"], weights[f"{prefix}.D"], chunk=chunk)
    b, l = x.shape[0], x.shape[1]
    gate = silu(z).reshape(b, l, scfg.n_heads, scfg.d_head)
    return y * gate


def ssm_branch_prefill(
    x: Tensor,
    weights: dict[str, Tensor],
    scfg: SsmConfig,
    chunk: int = 16,
    prefix: str = "intra.ssm",
) -> tuple[Tensor, SsmState]:
    """`ssm_branch_context` that also returns the decode state."""
    z, xs, bm, cm, dt, conv_in = ssm_featurize(x, weights, scfg, prefix)
    y, h_state = ssm_scan(
        xs, dt, bm, cm, weights[f"{prefix}.A_log"], weights[f"{prefix}.D"],
        chunk=chunk, return_state=True,
    )
    b, l = x.shape[0], x.shape[1]
    gate = silu(z).reshape(b, l, scfg.n_heads, scfg.d_head)
    state = SsmState(conv_buf=conv_tail(conv_in, scfg), h=Tensor(np.array(h_state.data)))
    return y * gate, state


def ssm_branch_step(
    x_t: Tensor,
    weights: dict[str, Tensor],
    scfg: SsmConfig,
    state: SsmState,
    prefix: str = "intra.ssm",
) -> tuple[Tensor, SsmState]:
    """Single-token SSM half: x_t (B, d_model) -> (B, 1, H_ssm, d_fuse)."""
    b = x_t.shape[0]
    z, xs, bm, cm, dt, new_buf = ssm_step_featurize(x_t, weights, scfg, state, prefix)
    y, h_new = ssm_step_core(
        xs, dt, bm, cm, weights[f"{prefix}.A_log"], weights[f"{prefix}.D"], state.h
    )
    gate = silu(z).reshape(b, scfg.n_heads, scfg.d_head)
    m = (y * gate).reshape(b, 1, scfg.n_heads, scfg.d_head)
    return m, SsmState(conv_buf=new_buf, h=h_new)


def intra_hybrid_forward(
    x: Tensor,
    weights: dict[str, Tensor],
    icfg: IntraHybridConfig,
    spec: FusionSpec,
    positions: np.ndarray,
    lambda_init: float = 0.5,
    chunk: int = 16,
    prefix: str = "intra",
) -> Tensor:
    """Full block pass: (B, L, d_model) -> (B, L, d_model)."""
    icfg.validate_fusion(spec)
    a = attention_context(
        x, weights, icfg.attn_cfg, icfg.rope_cfg, positions, mask=None, prefix=f"{prefix}.attn"
    )
    m = ssm_branch_context(x, weights, icfg.ssm_cfg, chunk=chunk, prefix=f"{prefix}.ssm")
    return fuse_branches(a, m, weights, icfg, spec, lambda_init, prefix)
