"""Runnable models: embedding, pre-norm block stack, head.

Every layer is residual pre-norm twice over: once around its mixer
(attention, windowed attention, SSM, or the fused intra-layer hybrid)
and once around its FFN (dense or mixture-of-experts). Weights live in
flat name->Tensor dicts with dotted prefixes ("blocks.3.ssm.in_proj"),
which is also exactly the inventory the cost model counts.
"""

from __future__ import annotations

import numpy as np

from .attention import attention_forward, causal_mask, init_attn_params, swa_mask
from .config import ModelConfig
from .hybrid import default_lambda_init, init_intra_params, intra_hybrid_forward
from .layout import BlockSpec, LayoutSpec
from .moe import RouterState, init_moe_params, moe_forward, update_balance
from .nn import RopeConfig, param, proj_init, rms_norm, siglu_ffn
from .ssm import init_ssm_params, ssm_forward
from .tensor import ContractError, Tensor, embedding_lookup, matmul, named_rng

EMBED_STD = 0.02
HEAD_STD = 0.02
SSM_CHUNK = 16


class Block:
    """One layer: pre-norm mixer + pre-norm FFN/MoE, both residual."""

    def __init__(self, spec: BlockSpec, cfg: ModelConfig, rng: np.random.Generator, index: int):
        self.spec = spec
        self.cfg = cfg
        self.index = index
        self.kind = spec.kind
        self.weights: dict[str, Tensor] = {}
        self.moe_state: RouterState | None = None
        self.last_moe_load: np.ndarray | None = None
        self.lambda_init = default_lambda_init(index)

        self.weights["attn_norm.weight"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
        if spec.kind in ("attn", "swa"):
            self.attn_cfg = cfg.attn_cfg()
            self.rope: RopeConfig | None = RopeConfig(head_dim=cfg.d_head, base=cfg.rope_base)
            self.weights.update(init_attn_params(self.attn_cfg, rng))
        elif spec.kind == "mamba":
            self.ssm_cfg = cfg.ssm_cfg()
            self.rope = None
            self.weights.update(init_ssm_params(self.ssm_cfg, rng))
        elif spec.kind == "intra":
            self.intra_cfg = cfg.intra_cfg(spec)
            self.fusion = cfg.block_fusion(spec)
            self.rope = self.intra_cfg.rope_cfg
            self.weights.update(init_intra_params(self.intra_cfg, self.fusion, rng))
        else:
            raise ContractError(f"unknown block kind {spec.kind!r}")

        self.weights["ffn_norm.weight"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
        if spec.moe:
            self.moe_cfg = cfg.moe_cfg()
            self.moe_state = RouterState.fresh(self.moe_cfg.n_experts)
            self.weights.update(init_moe_params(self.moe_cfg, rng))
        else:
            self.weights["ffn.gate"] = proj_init(rng, cfg.d_model, cfg.d_ffn)
            self.weights["ffn.up"] = proj_init(rng, cfg.d_model, cfg.d_ffn)
            self.weights["ffn.down"] = proj_init(rng, cfg.d_ffn, cfg.d_model)

    def mixer(self, normed: Tensor, positions: np.ndarray) -> Tensor:
        seq = normed.shape[1]
        if self.kind == "attn":
            return attention_forward(normed, self.weights, self.attn_cfg, self.rope, positions)
        if self.kind == "swa":
            window, sink = self.cfg.block_window(self.spec)
            mask = swa_mask(seq, window, sink)
            return attention_forward(
                normed, self.weights, self.attn_cfg, self.rope, positions, mask=mask
            )
        if self.kind == "mamba":
            return ssm_forward(normed, self.weights, self.ssm_cfg, chunk=SSM_CHUNK)
        return intra_hybrid_forward(
            normed, self.weights, self.intra_cfg, self.fusion, positions,
            lambda_init=self.lambda_init, chunk=SSM_CHUNK,
        )

    def ffn(self, normed: Tensor) -> Tensor:
        if self.spec.moe:
            out, loads = moe_forward(normed, self.weights, self.moe_cfg, self.moe_state)
            self.last_moe_load = loads
            return out
        return siglu_ffn(
            normed, self.weights["ffn.gate"], self.weights["ffn.up"], self.weights["ffn.down"]
        )

    def forward(self, x: Tensor, positions: np.ndarray) -> Tensor:
        x = x + self.mixer(rms_norm(x, self.weights["attn_norm.weight"]), positions)
        x = x + self.ffn(rms_norm(x, self.weights["ffn_norm.weight"]))
        return x

    def update_moe_balance(self) -> None:
        if self.moe_state is not None and self.last_moe_load is not None:
            update_balance(self.moe_state, self.last_moe_load, self.moe_cfg.balance_rate)
            self.last_moe_load = None


def build_block(spec: BlockSpec, cfg: ModelConfig, rng: np.random.Generator, index: int = 0) -> Block:
    return Block(spec, cfg, rng, index)


class HybridModel:
    """Embedding + block stack + final norm + untied output head."""

    def __init__(self, cfg: ModelConfig, layout: LayoutSpec, seed: int = 0):
        self.cfg = cfg
        self.layout = layout
        self.seed = seed
        self.embed = param(named_rng(seed, "embed"), (cfg.vocab, cfg.d_model), EMBED_STD)
        self.blocks = [
            build_block(spec, cfg, named_rng(seed, f"blocks.{i}"), index=i)
            for i, spec in enumerate(layout.blocks)
        ]
        self.final_norm = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.head = param(named_rng(seed, "head"), (cfg.d_model, cfg.vocab), HEAD_STD)

    def forward(self, tokens: np.ndarray) -> Tensor:
        """tokens (batch, seq) int -> logits (batch, seq, vocab)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be (batch, seq), got {tokens.shape}")
        positions = np.arange(tokens.shape[1])
        x = embedding_lookup(self.embed, tokens)
        for block in self.blocks:
            x = block.forward(x, positions)
        x = rms_norm(x, self.final_norm)
        return matmul(x, self.head)

    def hidden_states(self, tokens: np.ndarray) -> Tensor:
        """Final pre-head hidden states (batch, seq, d_model)."""
        tokens = np.asarray(tokens)
        positions = np.arange(tokens.shape[1])
        x = embedding_lookup(self.embed, tokens)
        for block in self.blocks:
            x = block.forward(x, positions)
        return rms_norm(x, self.final_norm)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed.weight": self.embed}
        for i, block in enumerate(self.blocks):
            for name, tensor in block.weights.items():
                out[f"blocks.{i}.{name}"] = tensor
        out["final_norm.weight"] = self.final_norm
        out["head.weight"] = self.head
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            if block.moe_state is not None:
                out[f"blocks.{i}.moe.expert_bias"] = block.moe_state.expert_bias
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def update_moe_balance(self) -> None:
        for block in self.blocks:
            block.update_moe_balance()

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def load_state(self, arrays: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, tensor in params.items():
            arr = np.asarray(arrays[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {tensor.shape}")
            tensor.data = arr
        for i, block in enumerate(self.blocks):
            key = f"blocks.{i}.moe.expert_bias"
            if buffers and key in buffers and block.moe_state is not None:
                block.moe_state.expert_bias = np.asarray(buffers[key], dtype=np.float64)
