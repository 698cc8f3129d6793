#!/usr/bin/env python3
"""
Intra-block hybrids: attention and recurrent branches fused per head.

Walks the fusion combination matrix (norm x scalar x fusion x output
projections), shows how the width splits between branches, and runs a
forward pass through each named recipe.

Usage:
    python3 demos/04_intra_fusion.py
"""

import numpy as np

from hybridlab.hybrid import (
    FUSION_PRESETS,
    IntraHybridConfig,
    default_lambda_init,
    init_intra_params,
    intra_hybrid_forward,
    legal_fusion_specs,
)
from hybridlab.tensor import Tensor, named_rng, no_grad

# ---------------------------------------------------------------------------
# 1. the combination matrix
# ---------------------------------------------------------------------------
# Four axes: per-branch group norm on/off, an optional learned scalar
# (scale / gate / lambda), the fusion op (add / diff / concat), and
# one or two output projections. Not every combination is meaningful;
# the enumeration below contains exactly the legal ones.

cells = legal_fusion_specs()
print(f"legal fusion cells: {len(cells)}")
by_fusion = {}
for c in cells:
    by_fusion.setdefault(c.fusion, []).append(c)
for fusion, group in sorted(by_fusion.items()):
    print(f"  {fusion:<7} {len(group)} cells")

print("\nnamed recipes:")
for name, spec in FUSION_PRESETS.items():
    print(f"  {name:<8} norm={spec.norm:<6} scalar={spec.scalar:<6} "
          f"fusion={spec.fusion:<7} out_projs={spec.out_projs}")

# ---------------------------------------------------------------------------
# 2. how the width splits
# ---------------------------------------------------------------------------
# Half the heads go to each branch by default; dim_ratio tilts the
# split. The recurrent branch keeps its expansion factor, so equal
# branch output widths need d_ssm = 2 * d_model.

base = IntraHybridConfig(d_model=8, n_heads=4, n_kv_heads=2, d_ssm=16, d_state=4, n_conv=2)
tilted = IntraHybridConfig(d_model=8, n_heads=4, n_kv_heads=2, d_ssm=16, d_state=4, n_conv=2,
                           dim_ratio=(3.0, 1.0))
for label, cfg in (("even split", base), ("3:1 toward attention", tilted)):
    print(f"\n{label}: branch outputs {cfg.n_half * cfg.d_fuse} (attn) / "
          f"{cfg.d_ssm_branch} (ssm), query/key width {cfg.d_qk}")

# ---------------------------------------------------------------------------
# 3. forward through every named recipe
# ---------------------------------------------------------------------------

rng = named_rng(0, "demo-fusion")
x = rng.normal(size=(1, 6, 8))
for name, spec in FUSION_PRESETS.items():
    weights = init_intra_params(base, spec, rng)
    with no_grad():
        y = intra_hybrid_forward(Tensor(x), weights, base, spec, np.arange(6), 0.4)
    print(f"{name:<8} -> output {y.shape}, finite {bool(np.isfinite(y.data).all())}")

# ---------------------------------------------------------------------------
# 4. the depth-dependent mixing scalar
# ---------------------------------------------------------------------------
# The difference fusion subtracts a learned share of the recurrent
# branch; its initial value grows with depth so late blocks start out
# mixing more aggressively.

print("\nlambda_init by layer:",
      " ".join(f"{default_lambda_init(i):.2f}" for i in range(8)))
