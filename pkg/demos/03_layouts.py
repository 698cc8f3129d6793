#!/usr/bin/env python3
"""
Layout planning: mixing block kinds along the depth axis.

Shows ratio sugar, explicit counts, the positioning strategies, the
lint rules that flag placements known to hurt, and the layout file
round-trip.

Usage:
    python3 demos/03_layouts.py
"""

from hybridlab.layout import (
    BlockSpec,
    format_layout,
    lint_layout,
    parse_layout,
    plan_layout,
)

# ---------------------------------------------------------------------------
# 1. one attention block per twelve recurrent blocks
# ---------------------------------------------------------------------------
# With a single special block the planner centers it; the middle is
# the placement that measures best.

lay = plan_layout(depth=13, ratio=(1, 12))
print("depth 13, ratio 1:12:", " ".join(b.kind for b in lay.blocks))
print("special index:", [i for i, b in enumerate(lay.blocks) if b.kind == "attn"])

# ---------------------------------------------------------------------------
# 2. explicit counts and the positioning strategies
# ---------------------------------------------------------------------------

for pos in ("scatter", "cluster", "sandwich"):
    lay = plan_layout(depth=10, counts=(3, 7), positioning=pos)
    marks = "".join("A" if b.kind == "attn" else "." for b in lay.blocks)
    print(f"{pos:<9} {marks}")

# ---------------------------------------------------------------------------
# 3. lint warnings for known-bad placements
# ---------------------------------------------------------------------------

front = plan_layout(depth=6, counts=(1, 5), positioning="front")
sandwich = plan_layout(depth=8, counts=(2, 6), positioning="sandwich")
for name, lay in (("front", front), ("sandwich", sandwich)):
    print(f"\nlint({name}):")
    for warning in lint_layout(lay):
        print(" ", warning)

# ---------------------------------------------------------------------------
# 4. per-block overrides and the text round-trip
# ---------------------------------------------------------------------------
# The base and special blocks can carry their own knobs: windows for
# the windowed kind, a fusion recipe for the intra-hybrid kind.

lay = plan_layout(
    depth=6,
    counts=(1, 5),
    special="attn",
    base="swa",
    base_spec=BlockSpec("swa", window=512, sink=64),
)
text = format_layout(lay)
print("\nlayout file:")
print(text)
back = parse_layout(text)
print("round-trip equal:", back == lay)
